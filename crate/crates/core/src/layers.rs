//! Graph-convolution layer, node-wise dense layer, and the Leaky ReLU
//! activation.
//!
//! Layers return pre-activation values; the model stack interleaves the
//! activation after every hidden layer and applies none after the output
//! head. The head itself is an [`MlpLayer`] of width 3 labeled `head`.

use std::sync::Arc;

use rand::Rng;

use crate::diff::{Layer, ParamTensor};
use crate::linalg::Matrix;
use crate::mesh::MeshGraph;
use crate::{Error, Result};

/// Negative slope of the shared activation.
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

pub fn leaky_relu(u: f64) -> f64 {
    if u >= 0.0 {
        u
    } else {
        LEAKY_RELU_SLOPE * u
    }
}

fn leaky_relu_deriv(u: f64) -> f64 {
    if u >= 0.0 {
        1.0
    } else {
        LEAKY_RELU_SLOPE
    }
}

/// Uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)); keeps initial outputs O(1).
pub(crate) fn init_uniform(p: &mut ParamTensor, fan_in: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    for v in p.values_mut().data_mut() {
        *v = rng.gen_range(-bound..bound);
    }
}

/// Graph convolution: `propagate(X) * W + b`, pre-activation.
pub struct GcnLayer {
    label: String,
    graph: Arc<MeshGraph>,
    weights: ParamTensor,
    bias: ParamTensor,
    /// Cached propagated input from the last training forward.
    cache: Option<Matrix>,
}

impl GcnLayer {
    pub fn new(
        label: impl Into<String>,
        n_in: usize,
        n_out: usize,
        graph: Arc<MeshGraph>,
        rng: &mut impl Rng,
    ) -> Self {
        let label = label.into();
        let mut weights = ParamTensor::matrix(format!("{label}.weights"), n_in, n_out);
        init_uniform(&mut weights, n_in, rng);
        let bias = ParamTensor::vector(format!("{label}.bias"), n_out);
        GcnLayer {
            label,
            graph,
            weights,
            bias,
            cache: None,
        }
    }

    fn affine(&self, propagated: &Matrix) -> Result<Matrix> {
        let mut out = propagated.matmul(self.weights.values())?;
        out.add_row_broadcast(self.bias.values().row(0))?;
        Ok(out)
    }
}

impl Layer for GcnLayer {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn forward(&mut self, input: &Matrix) -> Result<Matrix> {
        let propagated = self.graph.norm_adj.propagate(input)?;
        let out = self.affine(&propagated)?;
        self.cache = Some(propagated);
        Ok(out)
    }

    fn forward_inference(&self, input: &Matrix) -> Result<Matrix> {
        let propagated = self.graph.norm_adj.propagate(input)?;
        self.affine(&propagated)
    }

    fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        let propagated = self
            .cache
            .take()
            .ok_or_else(|| Error::State(format!("{}: backward without forward", self.label)))?;
        self.weights.accumulate_grad(&propagated.matmul_tn(upstream)?)?;
        self.bias.accumulate_grad(&upstream.column_sums())?;
        // norm_adj is symmetric, so the adjoint of propagate is propagate.
        let local = upstream.matmul_nt(self.weights.values())?;
        self.graph.norm_adj.propagate(&local)
    }

    fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.weights, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.weights, &mut self.bias]
    }

    fn rebind_graph(&mut self, graph: &Arc<MeshGraph>) {
        self.graph = Arc::clone(graph);
    }
}

/// Node-wise dense layer: `X * W + b`, pre-activation. Also serves as the
/// linear output head.
pub struct MlpLayer {
    label: String,
    weights: ParamTensor,
    bias: ParamTensor,
    cache: Option<Matrix>,
}

impl MlpLayer {
    pub fn new(label: impl Into<String>, n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let label = label.into();
        let mut weights = ParamTensor::matrix(format!("{label}.weights"), n_in, n_out);
        init_uniform(&mut weights, n_in, rng);
        let bias = ParamTensor::vector(format!("{label}.bias"), n_out);
        MlpLayer {
            label,
            weights,
            bias,
            cache: None,
        }
    }
}

impl Layer for MlpLayer {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn forward(&mut self, input: &Matrix) -> Result<Matrix> {
        self.cache = Some(input.clone());
        self.forward_inference(input)
    }

    fn forward_inference(&self, input: &Matrix) -> Result<Matrix> {
        let mut out = input.matmul(self.weights.values())?;
        out.add_row_broadcast(self.bias.values().row(0))?;
        Ok(out)
    }

    fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        let input = self
            .cache
            .take()
            .ok_or_else(|| Error::State(format!("{}: backward without forward", self.label)))?;
        self.weights.accumulate_grad(&input.matmul_tn(upstream)?)?;
        self.bias.accumulate_grad(&upstream.column_sums())?;
        upstream.matmul_nt(self.weights.values())
    }

    fn params(&self) -> Vec<&ParamTensor> {
        vec![&self.weights, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![&mut self.weights, &mut self.bias]
    }
}

/// Elementwise Leaky ReLU as a stack node. No parameters.
pub struct LeakyReluLayer {
    cache: Option<Matrix>,
}

impl LeakyReluLayer {
    pub fn new() -> Self {
        LeakyReluLayer { cache: None }
    }
}

impl Default for LeakyReluLayer {
    fn default() -> Self {
        Self::new()
    }
}

impl Layer for LeakyReluLayer {
    fn label(&self) -> String {
        "leaky_relu".into()
    }

    fn forward(&mut self, input: &Matrix) -> Result<Matrix> {
        self.cache = Some(input.clone());
        self.forward_inference(input)
    }

    fn forward_inference(&self, input: &Matrix) -> Result<Matrix> {
        Ok(input.map(leaky_relu))
    }

    fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        let input = self
            .cache
            .take()
            .ok_or_else(|| Error::State("leaky_relu: backward without forward".into()))?;
        if (input.rows(), input.cols()) != (upstream.rows(), upstream.cols()) {
            return Err(Error::Shape("leaky_relu: upstream shape mismatch".into()));
        }
        let mut out = upstream.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(input.data()) {
            *o *= leaky_relu_deriv(x);
        }
        Ok(out)
    }

    fn params(&self) -> Vec<&ParamTensor> {
        vec![]
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![]
    }
}

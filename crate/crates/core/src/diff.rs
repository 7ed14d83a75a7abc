//! Reverse-mode differentiation substrate.
//!
//! The architectures here are pure sequential stacks, so there is no general
//! tape: each layer implements an explicit forward (caching what its backward
//! needs) and a backward that consumes the cache once, accumulates parameter
//! gradients, and returns the input gradient. `gradcheck` verifies every layer
//! against central finite differences of a scalar probe loss.

use crate::linalg::Matrix;
use crate::{Error, Result};

/// Trainable parameter: values plus a same-shape gradient accumulator.
///
/// Biases are declared as vectors and stored as 1 x n matrices; the declared
/// shape is what serializes into checkpoint manifests.
#[derive(Debug, Clone)]
pub struct ParamTensor {
    name: String,
    values: Matrix,
    grad: Matrix,
    vector: bool,
}

impl ParamTensor {
    pub fn matrix(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        ParamTensor {
            name: name.into(),
            values: Matrix::zeros(rows, cols),
            grad: Matrix::zeros(rows, cols),
            vector: false,
        }
    }

    pub fn vector(name: impl Into<String>, len: usize) -> Self {
        ParamTensor {
            name: name.into(),
            values: Matrix::zeros(1, len),
            grad: Matrix::zeros(1, len),
            vector: true,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Declared shape: `[rows, cols]` for matrices, `[len]` for vectors.
    pub fn shape(&self) -> Vec<usize> {
        if self.vector {
            vec![self.values.cols()]
        } else {
            vec![self.values.rows(), self.values.cols()]
        }
    }

    pub fn len(&self) -> usize {
        self.values.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Matrix {
        &mut self.values
    }

    pub fn grad(&self) -> &Matrix {
        &self.grad
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = 0.0;
        }
    }

    pub fn accumulate_grad(&mut self, delta: &Matrix) -> Result<()> {
        self.grad.add_assign(delta)
    }
}

/// Sets every gradient accumulator to exactly zero.
pub fn zero_grads<'a>(params: impl IntoIterator<Item = &'a mut ParamTensor>) {
    for p in params {
        p.zero_grad();
    }
}

/// One differentiable node of a sequential stack.
///
/// `forward` caches activations; `backward` may be called at most once per
/// forward (the cache is consumed). `forward_inference` never touches caches,
/// so a frozen layer can serve concurrent reads.
pub trait Layer {
    fn label(&self) -> String;

    fn forward(&mut self, input: &Matrix) -> Result<Matrix>;

    fn forward_inference(&self, input: &Matrix) -> Result<Matrix>;

    /// Accumulates parameter gradients and returns dL/d(input).
    fn backward(&mut self, upstream: &Matrix) -> Result<Matrix>;

    fn params(&self) -> Vec<&ParamTensor>;

    fn params_mut(&mut self) -> Vec<&mut ParamTensor>;

    /// Swaps the graph a message-passing layer operates on. Node-wise layers
    /// ignore this.
    fn rebind_graph(&mut self, _graph: &std::sync::Arc<crate::mesh::MeshGraph>) {}
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub layer: String,
    pub max_rel_err: f64,
    /// Parameter name (or "input") where the worst error occurred.
    pub worst_at: String,
    pub entries_checked: usize,
    pub pass: bool,
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: max_rel_err={:.3e} at {} over {} entries -> {}",
            self.layer,
            self.max_rel_err,
            self.worst_at,
            self.entries_checked,
            if self.pass { "pass" } else { "FAIL" }
        )
    }
}

fn probe_loss(out: &Matrix) -> f64 {
    out.data().iter().map(|&x| x * x).sum()
}

// Relative error with a floor so that near-zero gradients compare absolutely.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / denom
}

/// Compares analytic gradients of the probe loss `L = sum(out^2)` against
/// central finite differences, for every parameter entry and every input
/// entry. The finite-difference side goes through `forward_inference` only.
pub fn gradcheck(
    layer: &mut dyn Layer,
    input: &Matrix,
    epsilon: f64,
    tolerance: f64,
) -> Result<GradcheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    for p in layer.params() {
        if !p.values().is_finite() {
            return Err(Error::NonFinite(format!("parameter {} before gradcheck", p.name())));
        }
    }

    // Analytic pass.
    zero_grads(layer.params_mut());
    let out = layer.forward(input)?;
    if !out.is_finite() {
        return Err(Error::NonFinite(format!(
            "forward output of {} in gradcheck",
            layer.label()
        )));
    }
    let upstream = out.scale(2.0);
    let input_grad = layer.backward(&upstream)?;
    let analytic_param_grads: Vec<(String, Matrix)> = layer
        .params()
        .iter()
        .map(|p| (p.name().to_string(), p.grad().clone()))
        .collect();

    let mut max_rel = 0.0f64;
    let mut worst = String::from("-");
    let mut checked = 0usize;
    let update = |name: &str, analytic: f64, numeric: f64, max_rel: &mut f64, worst: &mut String| {
        let e = rel_err(analytic, numeric);
        if e > *max_rel {
            *max_rel = e;
            *worst = name.to_string();
        }
    };

    // Parameter entries.
    for (pi, (name, analytic)) in analytic_param_grads.iter().enumerate() {
        for idx in 0..analytic.data().len() {
            let orig = layer.params()[pi].values().data()[idx];

            layer.params_mut()[pi].values_mut().data_mut()[idx] = orig + epsilon;
            let lp = probe_loss(&layer.forward_inference(input)?);
            layer.params_mut()[pi].values_mut().data_mut()[idx] = orig - epsilon;
            let lm = probe_loss(&layer.forward_inference(input)?);
            layer.params_mut()[pi].values_mut().data_mut()[idx] = orig;

            let numeric = (lp - lm) / (2.0 * epsilon);
            update(name, analytic.data()[idx], numeric, &mut max_rel, &mut worst);
            checked += 1;
        }
    }

    // Input entries.
    let mut probe_input = input.clone();
    for idx in 0..probe_input.data().len() {
        let orig = probe_input.data()[idx];
        probe_input.data_mut()[idx] = orig + epsilon;
        let lp = probe_loss(&layer.forward_inference(&probe_input)?);
        probe_input.data_mut()[idx] = orig - epsilon;
        let lm = probe_loss(&layer.forward_inference(&probe_input)?);
        probe_input.data_mut()[idx] = orig;

        let numeric = (lp - lm) / (2.0 * epsilon);
        update("input", input_grad.data()[idx], numeric, &mut max_rel, &mut worst);
        checked += 1;
    }

    Ok(GradcheckReport {
        layer: layer.label(),
        max_rel_err: max_rel,
        worst_at: worst,
        entries_checked: checked,
        pass: max_rel < tolerance,
    })
}

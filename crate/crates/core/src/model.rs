//! Emulator assembly: front end + GCN stack + linear head, residual
//! reconstruction, autoregressive rollout, and checkpoint I/O.
//!
//! Depth counts named layers: a front end (KAN, MLP, or a GCN input
//! projection) plus `total_depth - 1` graph convolutions. The output head is
//! not counted. Leaky ReLU follows every hidden layer and never the head.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Layer, ParamTensor};
use crate::kan::{KanLayer, RbfGrid, DEFAULT_GRID_RANGE, DEFAULT_GRID_SIZE};
use crate::layers::{GcnLayer, LeakyReluLayer, MlpLayer};
use crate::linalg::Matrix;
use crate::mesh::MeshGraph;
use crate::scenario::{NormSpec, FEATURE_MELT, FEATURE_SMB, FEATURE_TIME};
use crate::{Error, Result};

pub const NUM_FEATURES: usize = 6;
pub const NUM_TARGETS: usize = 3;

/// Which layer encodes raw node features into the hidden width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrontEnd {
    Gcn,
    Mlp,
    Kan,
}

fn default_hidden_width() -> usize {
    128
}

fn default_kan_grid() -> usize {
    DEFAULT_GRID_SIZE
}

fn default_true() -> bool {
    true
}

/// Architecture description; `(spec, graph)` fully determines a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmulatorSpec {
    pub front_end: FrontEnd,
    /// Named layers including the front end, 2..=5.
    pub total_depth: usize,
    #[serde(default = "default_hidden_width")]
    pub hidden_width: usize,
    /// RBF basis size of a KAN front end.
    #[serde(default = "default_kan_grid")]
    pub kan_grid: usize,
    #[serde(default)]
    pub seed: u64,
    /// Apply the activation to the front end's output as well (the default);
    /// exposed because either convention is defensible.
    #[serde(default = "default_true")]
    pub front_activation: bool,
}

impl EmulatorSpec {
    pub fn new(front_end: FrontEnd, total_depth: usize, seed: u64) -> Self {
        EmulatorSpec {
            front_end,
            total_depth,
            hidden_width: default_hidden_width(),
            kan_grid: default_kan_grid(),
            seed,
            front_activation: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.total_depth) {
            return Err(Error::Config(format!(
                "total_depth must be in 2..=5, got {}",
                self.total_depth
            )));
        }
        if self.hidden_width == 0 {
            return Err(Error::Config("hidden_width must be at least 1".into()));
        }
        if self.kan_grid < 2 {
            return Err(Error::Config(format!(
                "kan_grid must be at least 2, got {}",
                self.kan_grid
            )));
        }
        Ok(())
    }

    /// Row label in the conventional form: "3gcn", "mlp+2gcn", "kan+gcn", ...
    pub fn label(&self) -> String {
        match self.front_end {
            FrontEnd::Gcn => format!("{}gcn", self.total_depth),
            FrontEnd::Mlp | FrontEnd::Kan => {
                let prefix = if self.front_end == FrontEnd::Mlp {
                    "mlp"
                } else {
                    "kan"
                };
                let n_gcn = self.total_depth - 1;
                if n_gcn == 1 {
                    format!("{prefix}+gcn")
                } else {
                    format!("{prefix}+{n_gcn}gcn")
                }
            }
        }
    }
}

/// Per-node physical state at one timestep plus the static forcings.
///
/// Generated truth satisfies `h >= 0`; an emulator rollout is free-running
/// and reports whatever the model predicts.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFieldFrame {
    pub melt_rate: f64,
    pub smb: Vec<f64>,
    pub time_index: usize,
    pub v_x: Vec<f64>,
    pub v_y: Vec<f64>,
    pub h: Vec<f64>,
}

impl NodeFieldFrame {
    pub fn num_nodes(&self) -> usize {
        self.h.len()
    }

    fn check_consistent(&self) -> Result<()> {
        let n = self.h.len();
        if self.v_x.len() != n || self.v_y.len() != n || self.smb.len() != n {
            return Err(Error::Shape(format!(
                "frame arrays disagree: v_x {}, v_y {}, h {}, smb {}",
                self.v_x.len(),
                self.v_y.len(),
                n,
                self.smb.len()
            )));
        }
        Ok(())
    }
}

/// Normalized nodes x 6 feature matrix for the transition out of `frame`.
pub fn features_from_frame(frame: &NodeFieldFrame, norm: &NormSpec) -> Result<Matrix> {
    frame.check_consistent()?;
    let n = frame.num_nodes();
    let melt = norm.normalize(FEATURE_MELT, frame.melt_rate);
    let time = norm.normalize(FEATURE_TIME, frame.time_index as f64);
    Ok(Matrix::from_fn(n, NUM_FEATURES, |r, c| match c {
        0 => melt,
        1 => time,
        2 => norm.normalize(FEATURE_SMB, frame.smb[r]),
        3 => norm.normalize_target(0, frame.v_x[r]),
        4 => norm.normalize_target(1, frame.v_y[r]),
        _ => norm.normalize_target(2, frame.h[r]),
    }))
}

/// Normalized nodes x 3 state matrix (v_x, v_y, h) of `frame`.
pub fn state_from_frame(frame: &NodeFieldFrame, norm: &NormSpec) -> Result<Matrix> {
    frame.check_consistent()?;
    Ok(Matrix::from_fn(frame.num_nodes(), NUM_TARGETS, |r, c| match c {
        0 => norm.normalize_target(0, frame.v_x[r]),
        1 => norm.normalize_target(1, frame.v_y[r]),
        _ => norm.normalize_target(2, frame.h[r]),
    }))
}

/// One-step delta source; implemented by the emulator and by test stubs.
pub trait DeltaPredictor {
    fn predict_delta(&self, features: &Matrix) -> Result<Matrix>;
}

/// Assembled architecture bound to a mesh.
pub struct EmulatorModel {
    spec: EmulatorSpec,
    graph: Arc<MeshGraph>,
    layers: Vec<Box<dyn Layer>>,
}

/// Instantiates the architecture with deterministic seed-derived weights.
pub fn build(spec: &EmulatorSpec, graph: Arc<MeshGraph>) -> Result<EmulatorModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let h = spec.hidden_width;
    let mut layers: Vec<Box<dyn Layer>> = Vec::new();

    match spec.front_end {
        FrontEnd::Gcn => layers.push(Box::new(GcnLayer::new(
            "front_gcn",
            NUM_FEATURES,
            h,
            Arc::clone(&graph),
            &mut rng,
        ))),
        FrontEnd::Mlp => layers.push(Box::new(MlpLayer::new(
            "front_mlp",
            NUM_FEATURES,
            h,
            &mut rng,
        ))),
        FrontEnd::Kan => {
            let grid = RbfGrid::uniform(spec.kan_grid, DEFAULT_GRID_RANGE.0, DEFAULT_GRID_RANGE.1)?;
            layers.push(Box::new(KanLayer::new(
                "front_kan",
                NUM_FEATURES,
                h,
                grid,
                &mut rng,
            )));
        }
    }
    if spec.front_activation {
        layers.push(Box::new(LeakyReluLayer::new()));
    }

    for i in 1..spec.total_depth {
        layers.push(Box::new(GcnLayer::new(
            format!("gcn_{i}"),
            h,
            h,
            Arc::clone(&graph),
            &mut rng,
        )));
        layers.push(Box::new(LeakyReluLayer::new()));
    }

    layers.push(Box::new(MlpLayer::new("head", h, NUM_TARGETS, &mut rng)));

    Ok(EmulatorModel {
        spec: spec.clone(),
        graph,
        layers,
    })
}

impl EmulatorModel {
    pub fn spec(&self) -> &EmulatorSpec {
        &self.spec
    }

    pub fn graph(&self) -> &Arc<MeshGraph> {
        &self.graph
    }

    pub fn bind_graph(&mut self, graph: &Arc<MeshGraph>) {
        self.graph = Arc::clone(graph);
        for layer in &mut self.layers {
            layer.rebind_graph(graph);
        }
    }

    /// Total trainable entries across all parameter tensors.
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .map(|p| p.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for layer in &mut self.layers {
            crate::diff::zero_grads(layer.params_mut());
        }
    }

    /// Flat snapshot of all parameter values in checkpoint order.
    pub fn param_values(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.params())
            .flat_map(|p| p.values().data().iter().copied().collect::<Vec<_>>())
            .collect()
    }

    pub fn set_param_values(&mut self, values: &[f64]) -> Result<()> {
        let expected = self.parameter_count();
        if values.len() != expected {
            return Err(Error::Shape(format!(
                "snapshot has {} values, model has {expected} parameters",
                values.len()
            )));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for p in layer.params_mut() {
                let n = p.len();
                p.values_mut()
                    .data_mut()
                    .copy_from_slice(&values[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    fn check_features(&self, features: &Matrix) -> Result<()> {
        if features.cols() != NUM_FEATURES {
            return Err(Error::Shape(format!(
                "expected {NUM_FEATURES} feature columns, got {}",
                features.cols()
            )));
        }
        if features.rows() != self.graph.num_nodes {
            return Err(Error::Shape(format!(
                "features have {} rows, bound mesh has {} nodes",
                features.rows(),
                self.graph.num_nodes
            )));
        }
        Ok(())
    }
}

impl Layer for EmulatorModel {
    fn label(&self) -> String {
        self.spec.label()
    }

    fn forward(&mut self, input: &Matrix) -> Result<Matrix> {
        let mut x = input.clone();
        for layer in &mut self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    fn forward_inference(&self, input: &Matrix) -> Result<Matrix> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward_inference(&x)?;
        }
        Ok(x)
    }

    fn backward(&mut self, upstream: &Matrix) -> Result<Matrix> {
        let mut g = upstream.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    fn params(&self) -> Vec<&ParamTensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    fn rebind_graph(&mut self, graph: &Arc<MeshGraph>) {
        self.bind_graph(graph);
    }
}

impl DeltaPredictor for EmulatorModel {
    fn predict_delta(&self, features: &Matrix) -> Result<Matrix> {
        self.check_features(features)?;
        self.forward_inference(features)
    }
}

/// Adds predicted deltas onto the previous state (normalized space).
pub fn reconstruct(prev_state: &Matrix, deltas: &Matrix) -> Result<Matrix> {
    if (prev_state.rows(), prev_state.cols()) != (deltas.rows(), deltas.cols()) {
        return Err(Error::Shape(format!(
            "reconstruct: state {}x{} vs deltas {}x{}",
            prev_state.rows(),
            prev_state.cols(),
            deltas.rows(),
            deltas.cols()
        )));
    }
    prev_state.add(deltas)
}

/// Recursively applies the one-step predictor for `t_steps` steps starting
/// from `initial`, returning all `t_steps + 1` frames in physical units.
/// State feedback is full: each step consumes the previous prediction.
pub fn rollout(
    predictor: &dyn DeltaPredictor,
    initial: &NodeFieldFrame,
    norm: &NormSpec,
    t_steps: usize,
) -> Result<Vec<NodeFieldFrame>> {
    if t_steps < 1 {
        return Err(Error::Config("rollout needs at least one step".into()));
    }
    initial.check_consistent()?;
    let n = initial.num_nodes();
    let melt = norm.normalize(FEATURE_MELT, initial.melt_rate);
    let smb_n: Vec<f64> = initial
        .smb
        .iter()
        .map(|&s| norm.normalize(FEATURE_SMB, s))
        .collect();

    let mut state = state_from_frame(initial, norm)?;
    let mut frames = Vec::with_capacity(t_steps + 1);
    frames.push(initial.clone());

    for step in 0..t_steps {
        let time_val = (initial.time_index + step) as f64;
        let time = norm.normalize(FEATURE_TIME, time_val);
        let features = Matrix::from_fn(n, NUM_FEATURES, |r, c| match c {
            0 => melt,
            1 => time,
            2 => smb_n[r],
            _ => state.get(r, c - 3),
        });
        let deltas = predictor.predict_delta(&features)?;
        if (deltas.rows(), deltas.cols()) != (n, NUM_TARGETS) {
            return Err(Error::Shape(format!(
                "predictor returned {}x{}, expected {n}x{NUM_TARGETS}",
                deltas.rows(),
                deltas.cols()
            )));
        }
        state = reconstruct(&state, &deltas)?;
        if !state.is_finite() {
            return Err(Error::NonFinite(format!(
                "rollout state at step {}",
                step + 1
            )));
        }
        frames.push(NodeFieldFrame {
            melt_rate: initial.melt_rate,
            smb: initial.smb.clone(),
            time_index: initial.time_index + step + 1,
            v_x: (0..n).map(|r| norm.denormalize_target(0, state.get(r, 0))).collect(),
            v_y: (0..n).map(|r| norm.denormalize_target(1, state.get(r, 1))).collect(),
            h: (0..n).map(|r| norm.denormalize_target(2, state.get(r, 2))).collect(),
        });
    }
    Ok(frames)
}

#[derive(Serialize)]
struct TrajectoryLine<'a> {
    t: usize,
    v_x: &'a [f64],
    v_y: &'a [f64],
    #[serde(rename = "H")]
    h: &'a [f64],
}

/// JSON-lines trajectory, one frame per line, physical units.
pub fn trajectory_jsonl(frames: &[NodeFieldFrame]) -> String {
    let mut out = String::new();
    for f in frames {
        let line = TrajectoryLine {
            t: f.time_index,
            v_x: &f.v_x,
            v_y: &f.v_y,
            h: &f.h,
        };
        out.push_str(&serde_json::to_string(&line).expect("trajectory serialization cannot fail"));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON manifest + little-endian f64 blob.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize, PartialEq, Debug)]
struct LayerManifest {
    name: String,
    shapes: Vec<Vec<usize>>,
}

#[derive(Serialize, Deserialize, PartialEq, Debug)]
struct KanGridInfo {
    size: usize,
    min: f64,
    max: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    layers: Vec<LayerManifest>,
    emulator: EmulatorSpec,
    param_count: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    kan_grid: Option<KanGridInfo>,
}

fn manifest_of(model: &EmulatorModel) -> CheckpointManifest {
    let layers = model
        .layers
        .iter()
        .map(|l| LayerManifest {
            name: l.label(),
            shapes: l.params().iter().map(|p| p.shape()).collect(),
        })
        .collect();
    let kan_grid = match model.spec.front_end {
        FrontEnd::Kan => Some(KanGridInfo {
            size: model.spec.kan_grid,
            min: DEFAULT_GRID_RANGE.0,
            max: DEFAULT_GRID_RANGE.1,
        }),
        _ => None,
    };
    CheckpointManifest {
        layers,
        emulator: model.spec.clone(),
        param_count: model.parameter_count(),
        kan_grid,
    }
}

fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

/// Writes `<stem>.json` (manifest) and `<stem>.bin` (all parameter values,
/// little-endian f64, concatenated in manifest order; exactly
/// `8 * param_count` bytes).
pub fn save_checkpoint(model: &EmulatorModel, stem: &Path) -> Result<()> {
    let (json_path, bin_path) = checkpoint_paths(stem);
    let manifest = manifest_of(model);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(json_path, text)?;

    let values = model.param_values();
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in &values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(bin_path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Rebuilds the model from the manifest's architecture spec and loads the
/// parameter blob, verifying layer names, shapes, and the exact byte count.
pub fn load_checkpoint(stem: &Path, graph: Arc<MeshGraph>) -> Result<EmulatorModel> {
    let (json_path, bin_path) = checkpoint_paths(stem);
    let manifest: CheckpointManifest = serde_json::from_str(&std::fs::read_to_string(&json_path)?)?;
    let mut model = build(&manifest.emulator, graph)?;

    let rebuilt = manifest_of(&model);
    if rebuilt.layers != manifest.layers {
        return Err(Error::Config(format!(
            "checkpoint manifest {} does not match the architecture it declares",
            json_path.display()
        )));
    }

    let expected_bytes = model.parameter_count() * 8;
    let mut bytes = Vec::with_capacity(expected_bytes);
    std::fs::File::open(&bin_path)?.read_to_end(&mut bytes)?;
    if bytes.len() != expected_bytes {
        return Err(Error::Config(format!(
            "parameter blob {} has {} bytes, expected {expected_bytes}",
            bin_path.display(),
            bytes.len()
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    model.set_param_values(&values)?;
    Ok(model)
}

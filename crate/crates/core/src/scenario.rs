//! Synthetic ground-truth scenarios, normalization, and dataset assembly.
//!
//! Closed-form transient thickness/velocity fields over a rectangular domain
//! stand in for a numerical ice-sheet solver. Fields are parameterized by the
//! basal melt rate and evolve over a fixed number of one-step transitions;
//! datasets are split into train/val/test by melt-rate membership so that
//! held-out melt regimes test out-of-distribution generalization.
//!
//! Feature column order is fixed: melt rate, time index (t-1), surface mass
//! balance, v_x, v_y, thickness — all affinely mapped to [-1, 1] by nominal
//! per-feature bounds. Targets are the absolute (v_x, v_y, thickness) at t in
//! the same normalization.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::mesh::{build_rect_mesh, MeshGraph};
use crate::model::{features_from_frame, state_from_frame, NodeFieldFrame};
use crate::{Error, Result};

pub const FEATURE_MELT: usize = 0;
pub const FEATURE_TIME: usize = 1;
pub const FEATURE_SMB: usize = 2;
pub const FEATURE_VX: usize = 3;
pub const FEATURE_VY: usize = 4;
pub const FEATURE_H: usize = 5;

pub const FEATURE_NAMES: [&str; 6] = ["melt_rate", "time", "smb", "v_x", "v_y", "h"];
pub const TARGET_NAMES: [&str; 3] = ["v_x", "v_y", "h"];

/// Constants of the closed-form fields, chosen for glacier-like magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConstants {
    /// Reference thickness, m.
    pub h0: f64,
    /// Reference speed, m/a.
    pub v0: f64,
    /// Amplitude of the oscillatory thickness term, m.
    pub amplitude: f64,
    /// Maximum surface mass balance, m/a.
    pub smb_max: f64,
    /// Melt sensitivity of thickness decay, a/m.
    pub beta: f64,
    /// Melt sensitivity of speed-up, a/m.
    pub gamma: f64,
}

impl Default for FieldConstants {
    fn default() -> Self {
        FieldConstants {
            h0: 1500.0,
            v0: 4000.0,
            amplitude: 50.0,
            smb_max: 0.5,
            beta: 0.02,
            gamma: 0.01,
        }
    }
}

fn default_length() -> f64 {
    100_000.0
}

fn default_width() -> f64 {
    60_000.0
}

fn default_resolutions() -> Vec<f64> {
    vec![2000.0, 5000.0, 10000.0]
}

fn default_melt_rates() -> Vec<f64> {
    (0..36).map(|i| 2.0 * i as f64).collect()
}

fn default_val_melt() -> Vec<f64> {
    vec![0.0, 20.0, 40.0, 60.0]
}

fn default_test_melt() -> Vec<f64> {
    vec![10.0, 30.0, 50.0, 70.0]
}

fn default_t_steps() -> usize {
    239
}

/// Full description of a scenario sweep; `(config)` determines every dataset
/// byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_length")]
    pub length_m: f64,
    #[serde(default = "default_width")]
    pub width_m: f64,
    #[serde(default = "default_resolutions")]
    pub resolutions_m: Vec<f64>,
    /// Basal melt rates, m/a, unique and ascending.
    #[serde(default = "default_melt_rates")]
    pub melt_rates: Vec<f64>,
    #[serde(default = "default_val_melt")]
    pub val_melt_rates: Vec<f64>,
    #[serde(default = "default_test_melt")]
    pub test_melt_rates: Vec<f64>,
    /// Transitions per scenario; a trajectory has `t_steps + 1` states.
    #[serde(default = "default_t_steps")]
    pub t_steps: usize,
    #[serde(default)]
    pub fields: FieldConstants,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            length_m: default_length(),
            width_m: default_width(),
            resolutions_m: default_resolutions(),
            melt_rates: default_melt_rates(),
            val_melt_rates: default_val_melt(),
            test_melt_rates: default_test_melt(),
            t_steps: default_t_steps(),
            fields: FieldConstants::default(),
        }
    }
}

impl ScenarioConfig {
    /// Reduced configuration for desk-scale runs: one coarse mesh, 24 states
    /// per scenario, melt rates 0..70 in steps of 10, one held-out melt rate
    /// each for validation and test so training still spans the melt range.
    pub fn desk_scale() -> Self {
        ScenarioConfig {
            resolutions_m: vec![10_000.0],
            melt_rates: (0..8).map(|i| 10.0 * i as f64).collect(),
            val_melt_rates: vec![20.0],
            test_melt_rates: vec![50.0],
            t_steps: 23,
            ..ScenarioConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.melt_rates.is_empty() {
            return Err(Error::Config("melt_rates must not be empty".into()));
        }
        for w in self.melt_rates.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::Config(
                    "melt_rates must be unique and ascending".into(),
                ));
            }
        }
        if self.melt_rates[0] < 0.0 {
            return Err(Error::Config("melt rates must be nonnegative".into()));
        }
        if self.t_steps < 2 {
            return Err(Error::Config(format!(
                "t_steps must be at least 2, got {}",
                self.t_steps
            )));
        }
        if self.resolutions_m.is_empty() {
            return Err(Error::Config("resolutions_m must not be empty".into()));
        }
        for &r in &self.resolutions_m {
            if !(r > 0.0) {
                return Err(Error::Config(format!("bad mesh resolution {r}")));
            }
        }
        for &m in self.val_melt_rates.iter().chain(&self.test_melt_rates) {
            if !self.melt_rates.contains(&m) {
                return Err(Error::Config(format!(
                    "split melt rate {m} is not one of the scenario melt rates"
                )));
            }
        }
        for &m in &self.val_melt_rates {
            if self.test_melt_rates.contains(&m) {
                return Err(Error::Config(format!(
                    "melt rate {m} assigned to both validation and test"
                )));
            }
        }
        Ok(())
    }

    pub fn split_of(&self, melt_rate: f64) -> Split {
        if self.val_melt_rates.contains(&melt_rate) {
            Split::Val
        } else if self.test_melt_rates.contains(&melt_rate) {
            Split::Test
        } else {
            Split::Train
        }
    }

    pub fn build_meshes(&self) -> Result<Vec<Arc<MeshGraph>>> {
        self.resolutions_m
            .iter()
            .map(|&r| Ok(Arc::new(build_rect_mesh(self.length_m, self.width_m, r)?)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

// Closed-form fields. tau is normalized time in [0, 1].

fn thickness_at(f: &FieldConstants, l: f64, w: f64, m: f64, tau: f64, x: f64, y: f64) -> f64 {
    use std::f64::consts::PI;
    f.h0 * (1.0 - x / (2.0 * l)) * (-f.beta * m * tau).exp()
        + f.amplitude * (2.0 * PI * x / l).sin() * (2.0 * PI * y / w).cos() * tau
}

fn velocity_x_at(f: &FieldConstants, l: f64, m: f64, tau: f64, x: f64) -> f64 {
    f.v0 * (x / l) * (x / l) * (1.0 + f.gamma * m * tau)
}

fn velocity_y_at(f: &FieldConstants, w: f64, tau: f64, y: f64) -> f64 {
    use std::f64::consts::PI;
    0.1 * f.v0 * (PI * y / w).sin() * tau
}

fn smb_at(f: &FieldConstants, w: f64, y: f64) -> f64 {
    f.smb_max * (1.0 - y / w)
}

/// Deterministic transient scenario: `t_steps + 1` frames at integer steps,
/// with normalized time `tau = t / t_steps`.
pub fn generate_truth(
    cfg: &ScenarioConfig,
    mesh: &MeshGraph,
    melt_rate: f64,
) -> Result<Vec<NodeFieldFrame>> {
    if melt_rate < 0.0 {
        return Err(Error::Config(format!(
            "melt rate must be nonnegative, got {melt_rate}"
        )));
    }
    let f = &cfg.fields;
    let (l, w) = (cfg.length_m, cfg.width_m);
    let smb: Vec<f64> = mesh.coords.iter().map(|c| smb_at(f, w, c[1])).collect();

    let mut frames = Vec::with_capacity(cfg.t_steps + 1);
    for t in 0..=cfg.t_steps {
        let tau = t as f64 / cfg.t_steps as f64;
        let mut v_x = Vec::with_capacity(mesh.num_nodes);
        let mut v_y = Vec::with_capacity(mesh.num_nodes);
        let mut h = Vec::with_capacity(mesh.num_nodes);
        for c in &mesh.coords {
            v_x.push(velocity_x_at(f, l, melt_rate, tau, c[0]));
            v_y.push(velocity_y_at(f, w, tau, c[1]));
            h.push(thickness_at(f, l, w, melt_rate, tau, c[0], c[1]));
        }
        frames.push(NodeFieldFrame {
            melt_rate,
            smb: smb.clone(),
            time_index: t,
            v_x,
            v_y,
            h,
        });
    }
    Ok(frames)
}

/// The t = 0 state of a scenario, without generating the whole trajectory.
pub fn initial_frame(
    cfg: &ScenarioConfig,
    mesh: &MeshGraph,
    melt_rate: f64,
) -> Result<NodeFieldFrame> {
    if melt_rate < 0.0 {
        return Err(Error::Config(format!(
            "melt rate must be nonnegative, got {melt_rate}"
        )));
    }
    let f = &cfg.fields;
    let (l, w) = (cfg.length_m, cfg.width_m);
    Ok(NodeFieldFrame {
        melt_rate,
        smb: mesh.coords.iter().map(|c| smb_at(f, w, c[1])).collect(),
        time_index: 0,
        v_x: mesh
            .coords
            .iter()
            .map(|c| velocity_x_at(f, l, melt_rate, 0.0, c[0]))
            .collect(),
        v_y: mesh
            .coords
            .iter()
            .map(|c| velocity_y_at(f, w, 0.0, c[1]))
            .collect(),
        h: mesh
            .coords
            .iter()
            .map(|c| thickness_at(f, l, w, melt_rate, 0.0, c[0], c[1]))
            .collect(),
    })
}

/// Per-feature nominal (min, max) bounds for the affine map to [-1, 1].
/// The same spec must be applied at training and inference time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    /// Indexed by feature column; targets share the bounds of columns 3..=5.
    pub bounds: [[f64; 2]; 6],
}

impl NormSpec {
    pub fn validate(&self) -> Result<()> {
        for (i, b) in self.bounds.iter().enumerate() {
            if !(b[1] > b[0]) || !b[0].is_finite() || !b[1].is_finite() {
                return Err(Error::Config(format!(
                    "bad bounds for feature {}: [{}, {}]",
                    FEATURE_NAMES[i], b[0], b[1]
                )));
            }
        }
        Ok(())
    }

    /// `x' = 2 (x - min) / (max - min) - 1`. Out-of-bound values map outside
    /// [-1, 1]; the bounds are nominal, not clamps.
    pub fn normalize(&self, feature: usize, x: f64) -> f64 {
        let [lo, hi] = self.bounds[feature];
        2.0 * (x - lo) / (hi - lo) - 1.0
    }

    pub fn denormalize(&self, feature: usize, xn: f64) -> f64 {
        let [lo, hi] = self.bounds[feature];
        lo + (xn + 1.0) * (hi - lo) / 2.0
    }

    pub fn normalize_target(&self, target: usize, x: f64) -> f64 {
        self.normalize(3 + target, x)
    }

    pub fn denormalize_target(&self, target: usize, xn: f64) -> f64 {
        self.denormalize(3 + target, xn)
    }
}

/// Analytic per-feature extremes of the closed-form fields over the full
/// melt-rate and time range, padded outward by 5% of each bound's magnitude.
/// The melt=0 / time=0 / smb=0 edges map to exactly -1; everything else lands
/// strictly inside (-1, 1).
pub fn nominal_bounds(cfg: &ScenarioConfig) -> NormSpec {
    let f = &cfg.fields;
    let m_min = *cfg.melt_rates.first().unwrap_or(&0.0);
    let m_max = *cfg.melt_rates.last().unwrap_or(&0.0);

    let raw = [
        [m_min, m_max],
        [0.0, (cfg.t_steps - 1) as f64],
        [0.0, f.smb_max],
        [0.0, f.v0 * (1.0 + f.gamma * m_max)],
        [0.0, 0.1 * f.v0],
        [
            0.5 * f.h0 * (-f.beta * m_max).exp() - f.amplitude,
            f.h0 + f.amplitude,
        ],
    ];

    let mut bounds = [[0.0; 2]; 6];
    for (i, [lo, hi]) in raw.into_iter().enumerate() {
        let mut lo_p = lo - 0.05 * lo.abs();
        let mut hi_p = hi + 0.05 * hi.abs();
        if !(hi_p - lo_p > 1e-9) {
            // degenerate feature (e.g. a single melt rate): center it on zero
            lo_p = lo - 1.0;
            hi_p = hi + 1.0;
        }
        bounds[i] = [lo_p, hi_p];
    }
    NormSpec { bounds }
}

/// One training example: normalized features at t-1, normalized absolute
/// state at t.
#[derive(Debug, Clone)]
pub struct TransitionSample {
    pub graph_id: usize,
    pub melt_rate: f64,
    /// Target time index; features describe t-1.
    pub t: usize,
    pub features: Matrix,
    pub targets: Matrix,
}

impl TransitionSample {
    /// The (v_x, v_y, h) slice of the features: the previous state.
    pub fn prev_state(&self) -> Matrix {
        self.features.columns(3, 6)
    }
}

pub struct AssembleSummary {
    pub meshes: Vec<Arc<MeshGraph>>,
    pub norm: NormSpec,
    pub counts: SplitCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

/// Streams every transition of the sweep, in deterministic order (meshes in
/// config order, melt rates ascending, time ascending), into `sink`. Memory
/// stays bounded by one scenario regardless of sweep size.
pub fn assemble(
    cfg: &ScenarioConfig,
    mut sink: impl FnMut(Split, TransitionSample) -> Result<()>,
) -> Result<AssembleSummary> {
    cfg.validate()?;
    let meshes = cfg.build_meshes()?;
    let norm = nominal_bounds(cfg);
    let mut counts = SplitCounts {
        train: 0,
        val: 0,
        test: 0,
    };

    for (graph_id, mesh) in meshes.iter().enumerate() {
        for &melt in &cfg.melt_rates {
            let split = cfg.split_of(melt);
            let frames = generate_truth(cfg, mesh, melt)?;
            for t in 1..=cfg.t_steps {
                let sample = TransitionSample {
                    graph_id,
                    melt_rate: melt,
                    t,
                    features: features_from_frame(&frames[t - 1], &norm)?,
                    targets: state_from_frame(&frames[t], &norm)?,
                };
                match split {
                    Split::Train => counts.train += 1,
                    Split::Val => counts.val += 1,
                    Split::Test => counts.test += 1,
                }
                sink(split, sample)?;
            }
        }
    }
    Ok(AssembleSummary {
        meshes,
        norm,
        counts,
    })
}

/// Fully materialized dataset. Fine at desk scale; the full default sweep is
/// around a gigabyte, so prefer [`assemble`] for streaming work.
pub struct Dataset {
    pub meshes: Vec<Arc<MeshGraph>>,
    pub norm: NormSpec,
    pub train: Vec<TransitionSample>,
    pub val: Vec<TransitionSample>,
    pub test: Vec<TransitionSample>,
}

impl Dataset {
    pub fn counts(&self) -> SplitCounts {
        SplitCounts {
            train: self.train.len(),
            val: self.val.len(),
            test: self.test.len(),
        }
    }
}

pub fn build_dataset(cfg: &ScenarioConfig) -> Result<Dataset> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    let summary = assemble(cfg, |split, sample| {
        match split {
            Split::Train => train.push(sample),
            Split::Val => val.push(sample),
            Split::Test => test.push(sample),
        }
        Ok(())
    })?;
    Ok(Dataset {
        meshes: summary.meshes,
        norm: summary.norm,
        train,
        val,
        test,
    })
}

// ---------------------------------------------------------------------------
// On-disk form: one JSON-lines file per (mesh, melt rate) plus a manifest.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SampleLine {
    t: usize,
    features: Vec<Vec<f64>>,
    targets: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetFileEntry {
    pub path: String,
    pub mesh_index: usize,
    pub resolution_m: f64,
    pub melt_rate: f64,
    pub split: Split,
    pub samples: usize,
}

#[derive(Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scenario: ScenarioConfig,
    pub norm_spec: NormSpec,
    pub counts: SplitCounts,
    pub total: usize,
    pub files: Vec<DatasetFileEntry>,
}

/// Generates the sweep to `dir`: `samples_r<res>_m<melt>.jsonl` files and a
/// `manifest.json`. Deterministic byte-for-byte given the config.
pub fn write_dataset(cfg: &ScenarioConfig, dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;

    let mut files: Vec<DatasetFileEntry> = Vec::new();
    let mut writer: Option<std::io::BufWriter<std::fs::File>> = None;
    let mut current: Option<(usize, f64)> = None;

    let summary = assemble(cfg, |split, sample| {
        if current != Some((sample.graph_id, sample.melt_rate)) {
            if let Some(mut w) = writer.take() {
                w.flush()?;
            }
            let res = cfg.resolutions_m[sample.graph_id];
            let name = format!("samples_r{}_m{}.jsonl", res, sample.melt_rate);
            writer = Some(std::io::BufWriter::new(std::fs::File::create(
                dir.join(&name),
            )?));
            files.push(DatasetFileEntry {
                path: name,
                mesh_index: sample.graph_id,
                resolution_m: res,
                melt_rate: sample.melt_rate,
                split,
                samples: 0,
            });
            current = Some((sample.graph_id, sample.melt_rate));
        }
        let line = SampleLine {
            t: sample.t,
            features: sample.features.to_rows(),
            targets: sample.targets.to_rows(),
        };
        let w = writer.as_mut().expect("writer opened above");
        serde_json::to_writer(&mut *w, &line)?;
        w.write_all(b"\n")?;
        files.last_mut().expect("entry pushed above").samples += 1;
        Ok(())
    })?;
    if let Some(mut w) = writer.take() {
        w.flush()?;
    }

    let manifest = DatasetManifest {
        scenario: cfg.clone(),
        norm_spec: summary.norm,
        counts: summary.counts,
        total: summary.counts.total(),
        files,
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(manifest)
}

/// Loads a dataset written by [`write_dataset`], rebuilding meshes from the
/// embedded scenario config and taking the stored normalization as-is.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(manifest_path)?)?;
    manifest.norm_spec.validate()?;
    let dir = manifest_path
        .parent()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."));
    let meshes = manifest.scenario.build_meshes()?;

    let mut dataset = Dataset {
        meshes,
        norm: manifest.norm_spec.clone(),
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for entry in &manifest.files {
        let text = std::fs::read_to_string(dir.join(&entry.path))?;
        let mut seen = 0usize;
        for line in text.lines() {
            let line: SampleLine = serde_json::from_str(line)?;
            let sample = TransitionSample {
                graph_id: entry.mesh_index,
                melt_rate: entry.melt_rate,
                t: line.t,
                features: Matrix::from_rows(&line.features)?,
                targets: Matrix::from_rows(&line.targets)?,
            };
            match entry.split {
                Split::Train => dataset.train.push(sample),
                Split::Val => dataset.val.push(sample),
                Split::Test => dataset.test.push(sample),
            }
            seen += 1;
        }
        if seen != entry.samples {
            return Err(Error::Config(format!(
                "{} declares {} samples but contains {seen}",
                entry.path, entry.samples
            )));
        }
    }
    Ok(dataset)
}

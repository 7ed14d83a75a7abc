//! RMSE evaluation, the scenario-sweep timing harness, and report emission.
//!
//! Errors are measured in physical units and pooled over all nodes,
//! timesteps, and test scenarios per mesh; velocity pools both components
//! into one number. Two modes: teacher-forced (one-step predictions from
//! true previous states) and rollout (full state feedback).

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::mesh::MeshGraph;
use crate::model::{
    features_from_frame, reconstruct, rollout, state_from_frame, DeltaPredictor, EmulatorModel,
};
use crate::scenario::{generate_truth, initial_frame, NormSpec, ScenarioConfig};
use crate::{Error, Result};

/// Root mean squared error over paired samples.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.is_empty() || truth.is_empty() {
        return Err(Error::Config("rmse of empty input".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "rmse: {} predictions vs {} truths",
            pred.len(),
            truth.len()
        )));
    }
    let sum: f64 = pred
        .iter()
        .zip(truth)
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok((sum / pred.len() as f64).sqrt())
}

/// Full-precision float for CSV cells: 17 significant digits round-trip f64.
pub fn sig17(x: f64) -> String {
    format!("{x:.16e}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    TeacherForced,
    Rollout,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::TeacherForced => "teacher_forced",
            EvalMode::Rollout => "rollout",
        }
    }
}

/// RMSE of one trajectory step, for plotting error growth over time.
#[derive(Debug, Clone, Serialize)]
pub struct SeriesPoint {
    pub melt_rate: f64,
    pub t: usize,
    pub rmse_h: f64,
    pub rmse_v: f64,
}

/// One row of the results table.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub architecture: String,
    pub mesh: String,
    pub mode: &'static str,
    pub param_count: usize,
    pub rmse_h: Option<f64>,
    pub rmse_v: Option<f64>,
    pub elapsed_seconds: Option<f64>,
    pub series: Vec<SeriesPoint>,
}

pub fn mesh_label(mesh: &MeshGraph) -> String {
    format!("mesh_{}", mesh.resolution_m)
}

struct ErrorPool {
    sum_h: f64,
    count_h: usize,
    sum_v: f64,
    count_v: usize,
}

impl ErrorPool {
    fn new() -> Self {
        ErrorPool {
            sum_h: 0.0,
            count_h: 0,
            sum_v: 0.0,
            count_v: 0,
        }
    }

    fn add(&mut self, other: &ErrorPool) {
        self.sum_h += other.sum_h;
        self.count_h += other.count_h;
        self.sum_v += other.sum_v;
        self.count_v += other.count_v;
    }

    fn push(&mut self, pred: (&[f64], &[f64], &[f64]), truth: (&[f64], &[f64], &[f64])) {
        for (a, b) in pred.0.iter().zip(truth.0) {
            self.sum_v += (a - b) * (a - b);
        }
        for (a, b) in pred.1.iter().zip(truth.1) {
            self.sum_v += (a - b) * (a - b);
        }
        for (a, b) in pred.2.iter().zip(truth.2) {
            self.sum_h += (a - b) * (a - b);
        }
        self.count_v += pred.0.len() + pred.1.len();
        self.count_h += pred.2.len();
    }

    fn rmse_h(&self) -> f64 {
        (self.sum_h / self.count_h as f64).sqrt()
    }

    fn rmse_v(&self) -> f64 {
        (self.sum_v / self.count_v as f64).sqrt()
    }
}

/// Evaluates any delta predictor against the closed-form truth of
/// `melt_rates` scenarios on one mesh.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_with_predictor(
    predictor: &dyn DeltaPredictor,
    architecture: &str,
    param_count: usize,
    cfg: &ScenarioConfig,
    mesh: &Arc<MeshGraph>,
    norm: &NormSpec,
    melt_rates: &[f64],
    mode: EvalMode,
) -> Result<RunReport> {
    if melt_rates.is_empty() {
        return Err(Error::Config("evaluation needs at least one melt rate".into()));
    }
    let mut pool = ErrorPool::new();
    let mut series = Vec::new();

    for &melt in melt_rates {
        let frames = generate_truth(cfg, mesh, melt)?;
        let predicted: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = match mode {
            EvalMode::Rollout => {
                let traj = rollout(predictor, &frames[0], norm, cfg.t_steps)?;
                traj[1..]
                    .iter()
                    .map(|f| (f.v_x.clone(), f.v_y.clone(), f.h.clone()))
                    .collect()
            }
            EvalMode::TeacherForced => {
                let mut out = Vec::with_capacity(cfg.t_steps);
                for t in 1..=cfg.t_steps {
                    let features = features_from_frame(&frames[t - 1], norm)?;
                    let deltas = predictor.predict_delta(&features)?;
                    let prev = state_from_frame(&frames[t - 1], norm)?;
                    let pred = reconstruct(&prev, &deltas)?;
                    let n = pred.rows();
                    out.push((
                        (0..n).map(|r| norm.denormalize_target(0, pred.get(r, 0))).collect(),
                        (0..n).map(|r| norm.denormalize_target(1, pred.get(r, 1))).collect(),
                        (0..n).map(|r| norm.denormalize_target(2, pred.get(r, 2))).collect(),
                    ));
                }
                out
            }
        };

        for (t, pred) in predicted.iter().enumerate() {
            let truth = &frames[t + 1];
            let mut step = ErrorPool::new();
            step.push(
                (&pred.0, &pred.1, &pred.2),
                (&truth.v_x, &truth.v_y, &truth.h),
            );
            series.push(SeriesPoint {
                melt_rate: melt,
                t: t + 1,
                rmse_h: step.rmse_h(),
                rmse_v: step.rmse_v(),
            });
            pool.add(&step);
        }
    }

    Ok(RunReport {
        architecture: architecture.to_string(),
        mesh: mesh_label(mesh),
        mode: mode.as_str(),
        param_count,
        rmse_h: Some(pool.rmse_h()),
        rmse_v: Some(pool.rmse_v()),
        elapsed_seconds: None,
        series,
    })
}

/// Evaluates a trained emulator, rebinding it to `mesh` first.
pub fn evaluate(
    model: &mut EmulatorModel,
    cfg: &ScenarioConfig,
    mesh: &Arc<MeshGraph>,
    norm: &NormSpec,
    melt_rates: &[f64],
    mode: EvalMode,
) -> Result<RunReport> {
    model.bind_graph(mesh);
    let label = model.spec().label();
    let params = model.parameter_count();
    evaluate_with_predictor(&*model, &label, params, cfg, mesh, norm, melt_rates, mode)
}

/// RMSE of the predict-no-change baseline, directly from the truth fields.
/// Every trained model must beat this floor.
pub fn persistence_rmse(
    cfg: &ScenarioConfig,
    mesh: &Arc<MeshGraph>,
    melt_rates: &[f64],
) -> Result<(f64, f64)> {
    if melt_rates.is_empty() {
        return Err(Error::Config("persistence baseline needs melt rates".into()));
    }
    let mut pool = ErrorPool::new();
    for &melt in melt_rates {
        let frames = generate_truth(cfg, mesh, melt)?;
        for t in 1..=cfg.t_steps {
            let prev = &frames[t - 1];
            let truth = &frames[t];
            pool.push(
                (&prev.v_x, &prev.v_y, &prev.h),
                (&truth.v_x, &truth.v_y, &truth.h),
            );
        }
    }
    Ok((pool.rmse_h(), pool.rmse_v()))
}

/// Times full rollouts over a melt-rate sweep on a frozen model: one untimed
/// warm-up rollout, then five timed sweep repetitions; returns the median
/// wall-clock seconds. Run it alone; concurrent load skews the numbers.
pub fn sweep_bench(
    model: &mut EmulatorModel,
    cfg: &ScenarioConfig,
    mesh: &Arc<MeshGraph>,
    norm: &NormSpec,
    melt_rates: &[f64],
    t_steps: usize,
) -> Result<f64> {
    if melt_rates.is_empty() {
        return Err(Error::Config("bench needs at least one melt rate".into()));
    }
    model.bind_graph(mesh);
    let initials: Vec<_> = melt_rates
        .iter()
        .map(|&m| initial_frame(cfg, mesh, m))
        .collect::<Result<_>>()?;

    rollout(&*model, &initials[0], norm, t_steps)?; // warm start

    let mut times = Vec::with_capacity(5);
    for _ in 0..5 {
        let start = Instant::now();
        for init in &initials {
            rollout(&*model, init, norm, t_steps)?;
        }
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(times[2])
}

fn opt_cell(x: Option<f64>) -> String {
    x.map(sig17).unwrap_or_default()
}

pub struct EmittedFiles {
    pub reports_csv: PathBuf,
    pub reports_json: PathBuf,
    pub series_csv: PathBuf,
}

/// Writes the results table as CSV and JSON plus the per-trajectory
/// RMSE-vs-time series CSV. All floats carry 17 significant digits.
pub fn emit_report(reports: &[RunReport], dir: &Path) -> Result<EmittedFiles> {
    if reports.is_empty() {
        return Err(Error::Config("no reports to emit".into()));
    }
    std::fs::create_dir_all(dir)?;

    let mut csv = String::from("architecture,mesh,mode,param_count,rmse_h,rmse_v,elapsed_seconds\n");
    for r in reports {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.architecture,
            r.mesh,
            r.mode,
            r.param_count,
            opt_cell(r.rmse_h),
            opt_cell(r.rmse_v),
            opt_cell(r.elapsed_seconds),
        ));
    }
    let reports_csv = dir.join("reports.csv");
    std::fs::write(&reports_csv, csv)?;

    let mut series = String::from("architecture,mesh,mode,melt_rate,t,rmse_h,rmse_v\n");
    for r in reports {
        for p in &r.series {
            series.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.architecture,
                r.mesh,
                r.mode,
                sig17(p.melt_rate),
                p.t,
                sig17(p.rmse_h),
                sig17(p.rmse_v),
            ));
        }
    }
    let series_csv = dir.join("rmse_series.csv");
    std::fs::write(&series_csv, series)?;

    let mut json = serde_json::to_string_pretty(reports)?;
    json.push('\n');
    let reports_json = dir.join("reports.json");
    std::fs::write(&reports_json, json)?;

    Ok(EmittedFiles {
        reports_csv,
        reports_json,
        series_csv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::mesh::build_rect_mesh;
    use crate::model::{build, EmulatorSpec, FrontEnd, NodeFieldFrame};
    use crate::scenario::nominal_bounds;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rmse_basics() {
        assert_eq!(rmse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        // constant offset c gives |c|
        let pred = [3.5, -1.5, 0.5];
        let truth = [1.5, -3.5, -1.5];
        assert!((rmse(&pred, &truth).unwrap() - 2.0).abs() < 1e-15);
        assert!((rmse(&[1.0, 1.0], &[0.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(rmse(&[], &[]).is_err());
        assert!(rmse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn rmse_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for &n in &[1usize, 10, 1000, 100_000] {
            let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-100.0..100.0)).collect();
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-100.0..100.0)).collect();
            // two-pass oracle: collect squared diffs, then average
            let sq: Vec<f64> = a.iter().zip(&b).map(|(&x, &y)| (x - y) * (x - y)).collect();
            let oracle = (sq.iter().sum::<f64>() / n as f64).sqrt();
            assert!((rmse(&a, &b).unwrap() - oracle).abs() < 1e-12);
        }
    }

    struct PerfectOracle {
        states: Vec<Matrix>,
        norm: NormSpec,
    }

    impl DeltaPredictor for PerfectOracle {
        fn predict_delta(&self, features: &Matrix) -> crate::Result<Matrix> {
            let t = self
                .norm
                .denormalize(crate::scenario::FEATURE_TIME, features.get(0, 1))
                .round() as usize;
            // teacher-forced features always carry the true previous state,
            // so returning the true delta is exact in both modes
            self.states[t + 1].sub(&features.columns(3, 6))
        }
    }

    struct ZeroDeltas;
    impl DeltaPredictor for ZeroDeltas {
        fn predict_delta(&self, features: &Matrix) -> crate::Result<Matrix> {
            Ok(Matrix::zeros(features.rows(), 3))
        }
    }

    fn desk_setup() -> (ScenarioConfig, Arc<MeshGraph>, NormSpec) {
        let cfg = ScenarioConfig::desk_scale();
        let mesh = Arc::new(
            build_rect_mesh(cfg.length_m, cfg.width_m, cfg.resolutions_m[0]).unwrap(),
        );
        let norm = nominal_bounds(&cfg);
        (cfg, mesh, norm)
    }

    #[test]
    fn perfect_oracle_scores_zero() {
        let (cfg, mesh, norm) = desk_setup();
        let melt = 50.0;
        let frames = generate_truth(&cfg, &mesh, melt).unwrap();
        let states = frames
            .iter()
            .map(|f| state_from_frame(f, &norm).unwrap())
            .collect();
        let oracle = PerfectOracle {
            states,
            norm: norm.clone(),
        };
        for mode in [EvalMode::TeacherForced, EvalMode::Rollout] {
            let report =
                evaluate_with_predictor(&oracle, "oracle", 0, &cfg, &mesh, &norm, &[melt], mode)
                    .unwrap();
            assert!(report.rmse_h.unwrap() < 1e-9, "{mode:?}");
            assert!(report.rmse_v.unwrap() < 1e-9, "{mode:?}");
        }
    }

    #[test]
    fn zero_delta_teacher_forced_equals_persistence() {
        let (cfg, mesh, norm) = desk_setup();
        let melts = cfg.test_melt_rates.clone();
        let report = evaluate_with_predictor(
            &ZeroDeltas,
            "persistence",
            0,
            &cfg,
            &mesh,
            &norm,
            &melts,
            EvalMode::TeacherForced,
        )
        .unwrap();
        let (base_h, base_v) = persistence_rmse(&cfg, &mesh, &melts).unwrap();
        assert!((report.rmse_h.unwrap() - base_h).abs() < 1e-9);
        assert!((report.rmse_v.unwrap() - base_v).abs() < 1e-9);
    }

    #[test]
    fn pooled_velocity_rmse_is_mean_of_component_mses() {
        let (cfg, mesh, norm) = desk_setup();
        let melt = 10.0;
        let frames = generate_truth(&cfg, &mesh, melt).unwrap();
        let report = evaluate_with_predictor(
            &ZeroDeltas,
            "persistence",
            0,
            &cfg,
            &mesh,
            &norm,
            &[melt],
            EvalMode::TeacherForced,
        )
        .unwrap();
        // component MSEs from the raw trajectory
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for t in 1..=cfg.t_steps {
            for i in 0..mesh.num_nodes {
                let dx = frames[t - 1].v_x[i] - frames[t].v_x[i];
                let dy = frames[t - 1].v_y[i] - frames[t].v_y[i];
                sx += dx * dx;
                sy += dy * dy;
                n += 1;
            }
        }
        let pooled = ((sx / n as f64 + sy / n as f64) / 2.0).sqrt();
        assert!((report.rmse_v.unwrap() - pooled).abs() < 1e-9);
    }

    #[test]
    fn evaluation_is_invariant_to_scenario_order() {
        let (cfg, mesh, norm) = desk_setup();
        let mut model = build(
            &EmulatorSpec {
                hidden_width: 8,
                ..EmulatorSpec::new(FrontEnd::Mlp, 2, 3)
            },
            Arc::clone(&mesh),
        )
        .unwrap();
        let melts = vec![10.0, 30.0, 50.0];
        let reversed: Vec<f64> = melts.iter().rev().copied().collect();
        let a = evaluate(&mut model, &cfg, &mesh, &norm, &melts, EvalMode::TeacherForced).unwrap();
        let b = evaluate(&mut model, &cfg, &mesh, &norm, &reversed, EvalMode::TeacherForced).unwrap();
        assert_eq!(a.rmse_h.unwrap().to_bits(), b.rmse_h.unwrap().to_bits());
        assert_eq!(a.rmse_v.unwrap().to_bits(), b.rmse_v.unwrap().to_bits());
    }

    #[test]
    fn bench_is_positive_deterministic_and_scales_with_steps() {
        let (cfg, mesh, norm) = desk_setup();
        let spec = EmulatorSpec {
            hidden_width: 32,
            ..EmulatorSpec::new(FrontEnd::Gcn, 2, 9)
        };
        let mut model = build(&spec, Arc::clone(&mesh)).unwrap();
        let melts: Vec<f64> = (0..6).map(|i| 10.0 * i as f64).collect();

        let short = sweep_bench(&mut model, &cfg, &mesh, &norm, &melts, 60).unwrap();
        let long = sweep_bench(&mut model, &cfg, &mesh, &norm, &melts, 120).unwrap();
        assert!(short > 0.0);
        assert!(
            long / short >= 1.8,
            "doubling steps scaled time by only {:.2}",
            long / short
        );

        // identical trajectories across repeated rollouts
        let init = initial_frame(&cfg, &mesh, 20.0).unwrap();
        let a = rollout(&model, &init, &norm, 40).unwrap();
        let b = rollout(&model, &init, &norm, 40).unwrap();
        for (fa, fb) in a.iter().zip(&b) {
            assert_eq!(fa, fb);
        }
    }

    #[test]
    fn emit_report_writes_expected_rows() {
        let dir = tempfile::tempdir().unwrap();
        let report = RunReport {
            architecture: "2gcn".into(),
            mesh: "mesh_10000".into(),
            mode: "rollout",
            param_count: 17795,
            rmse_h: Some(0.5),
            rmse_v: Some(2.5),
            elapsed_seconds: Some(1.25),
            series: vec![SeriesPoint {
                melt_rate: 10.0,
                t: 1,
                rmse_h: 0.1,
                rmse_v: 0.2,
            }],
        };
        let files = emit_report(&[report.clone()], dir.path()).unwrap();
        let csv = std::fs::read_to_string(&files.reports_csv).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[1].starts_with("2gcn,mesh_10000,rollout,17795,"));
        // 17 significant digits
        assert!(lines[1].contains("5.0000000000000000e-1"));

        assert!(emit_report(&[], dir.path()).is_err());

        // 12 architectures x 3 meshes -> 36 rows
        let many: Vec<RunReport> = (0..36)
            .map(|i| RunReport {
                architecture: format!("arch{i}"),
                series: vec![],
                ..report.clone()
            })
            .collect();
        let files = emit_report(&many, dir.path()).unwrap();
        let csv = std::fs::read_to_string(&files.reports_csv).unwrap();
        assert_eq!(csv.lines().count(), 37);
    }

    #[test]
    fn rollout_stays_finite_for_untrained_model() {
        let (cfg, mesh, norm) = desk_setup();
        let model = build(
            &EmulatorSpec::new(FrontEnd::Kan, 3, 5),
            Arc::clone(&mesh),
        )
        .unwrap();
        let init = initial_frame(&cfg, &mesh, 30.0).unwrap();
        let frames = rollout(&model, &init, &norm, cfg.t_steps).unwrap();
        assert_eq!(frames.len(), cfg.t_steps + 1);
        let _ = NodeFieldFrame::num_nodes(&frames[0]);
    }
}

//! Re-weighted reconstruction loss, Adam, learning-rate schedules, and the
//! epoch loop with best-validation checkpointing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Layer, ParamTensor};
use crate::linalg::Matrix;
use crate::model::{reconstruct, EmulatorModel};
use crate::scenario::{Dataset, TransitionSample};
use crate::{Error, Result};

fn one() -> f64 {
    1.0
}

fn default_scale() -> f64 {
    10.0
}

/// Velocity/thickness weights and the global residual scale.
///
/// Block norms are per-entry means rather than raw sums so the weights mean
/// the same thing across mesh resolutions; a constant factor does not move
/// the minimizer. The scale multiplies residuals before squaring, so the
/// objective carries a factor of `scale^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_v: f64,
    pub lambda_h: f64,
    pub scale: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_v: one(),
            lambda_h: one(),
            scale: default_scale(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_v < 0.0 || self.lambda_h < 0.0 || !(self.lambda_v + self.lambda_h > 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative with a positive sum, got lambda_v={} lambda_h={}",
                self.lambda_v, self.lambda_h
            )));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config(format!(
                "loss scale must be positive, got {}",
                self.scale
            )));
        }
        Ok(())
    }
}

/// `scale^2 * [lambda_v * mean((v_hat - v)^2) + lambda_h * mean((h_hat - h)^2)]`
/// over nodes x 3 states; the velocity block pools both components. Because
/// the loss depends only on entrywise differences, it is exactly
/// translation-invariant: evaluating it on reconstructed states or on raw
/// deltas gives identical results whenever the difference bits agree.
pub fn weighted_loss(pred_state: &Matrix, true_state: &Matrix, cfg: &LossConfig) -> Result<f64> {
    if (pred_state.rows(), pred_state.cols()) != (true_state.rows(), true_state.cols()) {
        return Err(Error::Shape(format!(
            "loss: pred {}x{} vs truth {}x{}",
            pred_state.rows(),
            pred_state.cols(),
            true_state.rows(),
            true_state.cols()
        )));
    }
    if pred_state.cols() != 3 {
        return Err(Error::Shape(format!(
            "loss expects 3 state columns, got {}",
            pred_state.cols()
        )));
    }
    let n = pred_state.rows();
    let mut sum_v = 0.0;
    let mut sum_h = 0.0;
    for r in 0..n {
        let dvx = pred_state.get(r, 0) - true_state.get(r, 0);
        let dvy = pred_state.get(r, 1) - true_state.get(r, 1);
        let dh = pred_state.get(r, 2) - true_state.get(r, 2);
        sum_v += dvx * dvx + dvy * dvy;
        sum_h += dh * dh;
    }
    let mse_v = sum_v / (2 * n) as f64;
    let mse_h = sum_h / n as f64;
    Ok(cfg.scale * cfg.scale * (cfg.lambda_v * mse_v + cfg.lambda_h * mse_h))
}

/// Loss plus its gradient with respect to the predicted state.
pub fn loss_and_grad(
    pred_state: &Matrix,
    true_state: &Matrix,
    cfg: &LossConfig,
) -> Result<(f64, Matrix)> {
    let loss = weighted_loss(pred_state, true_state, cfg)?;
    let n = pred_state.rows();
    let s2 = cfg.scale * cfg.scale;
    let cv = s2 * cfg.lambda_v / n as f64;
    let ch = s2 * cfg.lambda_h * 2.0 / n as f64;
    let grad = Matrix::from_fn(n, 3, |r, c| {
        let d = pred_state.get(r, c) - true_state.get(r, c);
        if c < 2 {
            cv * d
        } else {
            ch * d
        }
    });
    Ok((loss, grad))
}

/// Adam moment accumulators, one pair per parameter tensor.
pub struct AdamState {
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
}

impl AdamState {
    pub fn new(params: &[&ParamTensor]) -> Self {
        AdamState {
            step: 0,
            first: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update from the gradients currently accumulated in
    /// `params`.
    pub fn step(&mut self, params: &mut [&mut ParamTensor], lr: f64) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} tensors, got {}",
                self.first.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            if p.len() != self.first[i].len() {
                return Err(Error::Shape(format!(
                    "optimizer moment {i} has {} entries, parameter {} has {}",
                    self.first[i].len(),
                    p.name(),
                    p.len()
                )));
            }
            let grads = p.grad().data().to_vec();
            let values = p.values_mut().data_mut();
            for (j, &g) in grads.iter().enumerate() {
                let m = &mut self.first[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                let v = &mut self.second[i][j];
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                values[j] -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// Learning-rate schedule over epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScheduleSpec {
    /// `base_lr * gamma^epoch`.
    Exponential { base_lr: f64, gamma: f64 },
    /// `eta_min + (base_lr - eta_min) (1 + cos(pi epoch / t_max)) / 2`.
    Cosine {
        base_lr: f64,
        t_max: usize,
        #[serde(default)]
        eta_min: f64,
    },
}

impl ScheduleSpec {
    /// Baseline regime: lr 0.01 with exponential decay, gamma 0.99.
    pub fn baseline() -> Self {
        ScheduleSpec::Exponential {
            base_lr: 0.01,
            gamma: 0.99,
        }
    }

    /// Re-weighted-loss regime: lr 0.0005 with cosine annealing.
    pub fn reweighted(t_max: usize) -> Self {
        ScheduleSpec::Cosine {
            base_lr: 0.0005,
            t_max,
            eta_min: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ScheduleSpec::Exponential { base_lr, gamma } => {
                if !(base_lr > 0.0) {
                    return Err(Error::Config(format!("base_lr must be positive, got {base_lr}")));
                }
                if !(gamma > 0.0 && gamma <= 1.0) {
                    return Err(Error::Config(format!("gamma must be in (0, 1], got {gamma}")));
                }
            }
            ScheduleSpec::Cosine { base_lr, t_max, eta_min } => {
                if !(base_lr > 0.0) {
                    return Err(Error::Config(format!("base_lr must be positive, got {base_lr}")));
                }
                if t_max == 0 {
                    return Err(Error::Config("t_max must be positive".into()));
                }
                if eta_min < 0.0 || eta_min > base_lr {
                    return Err(Error::Config(format!(
                        "eta_min must be in [0, base_lr], got {eta_min}"
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn lr_at(schedule: &ScheduleSpec, epoch: usize) -> Result<f64> {
    schedule.validate()?;
    match *schedule {
        ScheduleSpec::Exponential { base_lr, gamma } => Ok(base_lr * gamma.powi(epoch as i32)),
        ScheduleSpec::Cosine { base_lr, t_max, eta_min } => {
            if epoch > t_max {
                return Err(Error::Config(format!(
                    "cosine schedule evaluated at epoch {epoch} past t_max {t_max}"
                )));
            }
            let phase = std::f64::consts::PI * epoch as f64 / t_max as f64;
            Ok(eta_min + 0.5 * (base_lr - eta_min) * (1.0 + phase.cos()))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    /// Row 0 is the untrained model's evaluation; rows 1..=epochs follow.
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    /// Parameter snapshot at the best validation epoch, checkpoint order.
    pub best_params: Vec<f64>,
}

impl TrainReport {
    pub fn final_val_loss(&self) -> f64 {
        self.history.last().map(|r| r.val_loss).unwrap_or(f64::NAN)
    }

    /// `epoch,lr,train_loss,val_loss` CSV with full-precision floats.
    pub fn history_csv(&self) -> String {
        let mut out = String::from("epoch,lr,train_loss,val_loss\n");
        for r in &self.history {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch,
                crate::eval::sig17(r.lr),
                crate::eval::sig17(r.train_loss),
                crate::eval::sig17(r.val_loss)
            ));
        }
        out
    }
}

fn sample_loss(
    model: &mut EmulatorModel,
    data: &Dataset,
    sample: &TransitionSample,
    cfg: &LossConfig,
) -> Result<f64> {
    model.bind_graph(&data.meshes[sample.graph_id]);
    let deltas = model.forward_inference(&sample.features)?;
    let pred = reconstruct(&sample.prev_state(), &deltas)?;
    weighted_loss(&pred, &sample.targets, cfg)
}

fn mean_loss(
    model: &mut EmulatorModel,
    data: &Dataset,
    samples: &[TransitionSample],
    cfg: &LossConfig,
) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for s in samples {
        total += sample_loss(model, data, s, cfg)?;
    }
    Ok(total / samples.len() as f64)
}

/// Epoch loop: seeded shuffle, one optimizer step per graph sample
/// (full-graph batches), per-epoch validation, best-checkpoint retention.
/// Non-finite losses abort with the offending epoch and sample.
pub fn train(
    model: &mut EmulatorModel,
    data: &Dataset,
    epochs: usize,
    loss_cfg: &LossConfig,
    schedule: &ScheduleSpec,
    seed: u64,
) -> Result<TrainReport> {
    loss_cfg.validate()?;
    schedule.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if let ScheduleSpec::Cosine { t_max, .. } = *schedule {
        if epochs > 0 && epochs - 1 > t_max {
            return Err(Error::Config(format!(
                "cosine t_max {t_max} is shorter than {epochs} epochs"
            )));
        }
    }

    let mut adam = AdamState::new(&model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    let mut history = Vec::with_capacity(epochs + 1);
    history.push(EpochRecord {
        epoch: 0,
        lr: lr_at(schedule, 0)?,
        train_loss: mean_loss(model, data, &data.train, loss_cfg)?,
        val_loss: mean_loss(model, data, &data.val, loss_cfg)?,
    });

    let mut best_epoch = 0usize;
    let mut best_val_loss = history[0].val_loss;
    let mut best_params = model.param_values();

    for epoch in 1..=epochs {
        let lr = lr_at(schedule, epoch - 1)?;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for &idx in &order {
            let sample = &data.train[idx];
            model.bind_graph(&data.meshes[sample.graph_id]);
            model.zero_grads();
            let deltas = model.forward(&sample.features)?;
            let pred = reconstruct(&sample.prev_state(), &deltas)?;
            let (loss, grad) = loss_and_grad(&pred, &sample.targets, loss_cfg)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss at epoch {epoch}, sample (mesh {}, melt {}, t {})",
                    sample.graph_id, sample.melt_rate, sample.t
                )));
            }
            model.backward(&grad)?;
            adam.step(&mut model.params_mut(), lr)?;
            epoch_loss += loss;
        }
        let val_loss = mean_loss(model, data, &data.val, loss_cfg)?;
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: epoch_loss / order.len() as f64,
            val_loss,
        });
        if val_loss.is_finite() && (!best_val_loss.is_finite() || val_loss < best_val_loss) {
            best_epoch = epoch;
            best_val_loss = val_loss;
            best_params = model.param_values();
        }
    }

    Ok(TrainReport {
        history,
        best_epoch,
        best_val_loss,
        best_params,
    })
}

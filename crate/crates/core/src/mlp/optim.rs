//! Local optimizers and the client-side training loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{distilled_loss_and_gradient, Distillation, MlpParams};
use crate::data::EvaluationRecord;
use crate::error::{Error, Result};
use crate::numeric::{derive_seed, seeded_rng, CompensatedSum};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Plain gradient descent, `p -= lr * (g + wd * p)` with decoupled decay.
    Sgd,
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global L2 clipping threshold; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            learning_rate: 1e-3,
            weight_decay: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            learning_rate,
            weight_decay: 0.0,
            clip_norm: None,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("optimizer.learning_rate", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("optimizer.weight_decay", "must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::config("optimizer.beta1", "must lie in [0,1)"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("optimizer.beta2", "must lie in [0,1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("optimizer.epsilon", "must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("optimizer.clip_norm", "must be positive"));
            }
        }
        Ok(())
    }
}

/// Moment accumulators, one flat buffer per parameter tensor. Buffers are
/// allocated on the first step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

fn global_norm(tensors: &[&[f64]]) -> f64 {
    tensors
        .iter()
        .flat_map(|t| t.iter().map(|g| g * g))
        .collect::<CompensatedSum>()
        .value()
        .sqrt()
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    /// One update on arbitrary flat tensors. The gradient is rescaled to
    /// `clip_norm` when its global norm exceeds it.
    pub fn step_tensors(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::Shape("gradient does not match parameter shapes".into()));
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite { what: "gradient".into() });
        }
        let c = &self.config;
        let norm = global_norm(grads);
        let scale = match c.clip_norm {
            Some(clip) if norm > clip => clip / norm,
            _ => 1.0,
        };
        self.step += 1;
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (p, &g) in p.iter_mut().zip(g.iter()) {
                        *p -= c.learning_rate * (scale * g + c.weight_decay * *p);
                    }
                }
            }
            OptimizerKind::AdamW => {
                if self.first_moment.is_empty() {
                    self.first_moment = grads.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.second_moment = self.first_moment.clone();
                } else if self.first_moment.len() != grads.len()
                    || self.first_moment.iter().zip(grads).any(|(m, g)| m.len() != g.len())
                {
                    return Err(Error::Shape("optimizer state does not match parameters".into()));
                }
                let t = self.step as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let g = scale * g;
                        *p -= c.learning_rate * c.weight_decay * *p;
                        *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                        *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *p -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn step(&mut self, params: &mut MlpParams, gradient: &MlpParams) -> Result<()> {
        if !params.same_shape(gradient) {
            return Err(Error::Shape("gradient does not match parameter shapes".into()));
        }
        let grads = gradient.tensors();
        self.step_tensors(&mut params.tensors_mut(), &grads)
    }
}

/// Functional form of one optimizer step. `clip_norm` overrides the
/// threshold stored in the state's config.
pub fn adamw_step(
    params: &MlpParams,
    state: &OptimizerState,
    gradient: &MlpParams,
    clip_norm: Option<f64>,
) -> Result<(MlpParams, OptimizerState)> {
    let mut p = params.clone();
    let mut s = state.clone();
    s.config.clip_norm = clip_norm;
    s.step(&mut p, gradient)?;
    s.config.clip_norm = state.config.clip_norm;
    Ok((p, s))
}

/// How much local work a client performs per round.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalWork {
    /// Full passes over the shuffled local data.
    Epochs(usize),
    /// A fixed number of mini-batch steps, cycling through reshuffled epochs.
    Steps(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalTraining {
    pub work: LocalWork,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for LocalTraining {
    fn default() -> Self {
        Self {
            work: LocalWork::Epochs(1),
            batch_size: 128,
            optimizer: OptimizerConfig::default(),
        }
    }
}

impl LocalTraining {
    pub fn validate(&self) -> Result<()> {
        match self.work {
            LocalWork::Epochs(0) => return Err(Error::config("training.local_epochs", "must be at least 1")),
            LocalWork::Steps(0) => return Err(Error::config("training.local_steps", "must be at least 1")),
            _ => {}
        }
        if self.batch_size == 0 {
            return Err(Error::config("training.batch_size", "must be at least 1"));
        }
        self.optimizer.validate()
    }
}

/// Trains a copy of `params` on one client's records with a fresh
/// optimizer state. Shuffling and dropout masks derive from `seed`.
pub fn local_train(
    params: &MlpParams,
    train: &[EvaluationRecord],
    config: &LocalTraining,
    cost_normalizer: f64,
    seed: u64,
    distill: Option<&Distillation>,
) -> Result<MlpParams> {
    config.validate()?;
    let mut p = params.clone();
    if train.is_empty() {
        return Ok(p);
    }
    let mut state = OptimizerState::new(config.optimizer.clone());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batches_per_epoch = train.len().div_ceil(config.batch_size);
    let total_steps = match config.work {
        LocalWork::Epochs(e) => e * batches_per_epoch,
        LocalWork::Steps(s) => s,
    };
    let mut batch = Vec::with_capacity(config.batch_size.min(train.len()));
    for step in 0..total_steps {
        let (epoch, b) = (step / batches_per_epoch, step % batches_per_epoch);
        if b == 0 {
            order.sort_unstable();
            order.shuffle(&mut seeded_rng(derive_seed(seed, &[epoch as u64])));
        }
        let lo = b * config.batch_size;
        let hi = (lo + config.batch_size).min(train.len());
        batch.clear();
        batch.extend(order[lo..hi].iter().map(|&i| train[i].clone()));
        let dropout_seed = derive_seed(seed, &[epoch as u64, b as u64, 1]);
        let (_, grad) = distilled_loss_and_gradient(&p, &batch, cost_normalizer, Some(dropout_seed), distill)?;
        state.step(&mut p, &grad)?;
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{dataset_loss, MlpArchitecture};

    fn one_param(v: f64) -> (Vec<f64>, OptimizerState) {
        (vec![v], OptimizerState::new(OptimizerConfig::default()))
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let (mut p, mut s) = one_param(0.7);
        s.config.weight_decay = 0.0;
        s.step_tensors(&mut [&mut p], &[&[0.0]]).unwrap();
        assert_eq!(p, vec![0.7]);
    }

    #[test]
    fn clipping_rescales_to_threshold() {
        // gradient (3,4) has norm 5; with SGD lr 1 the update is the effective gradient
        let mut cfg = OptimizerConfig::sgd(1.0);
        cfg.clip_norm = Some(1.0);
        let mut s = OptimizerState::new(cfg);
        let mut p = vec![0.0, 0.0];
        s.step_tensors(&mut [&mut p], &[&[3.0, 4.0]]).unwrap();
        let n = (p[0] * p[0] + p[1] * p[1]).sqrt();
        assert!((n - 1.0).abs() < 1e-15);
    }

    #[test]
    fn single_adamw_step_on_quadratic_matches_closed_form() {
        // loss (p - 3)^2 at p = 1: g = -4
        let (mut p, mut s) = one_param(1.0);
        s.config.clip_norm = None;
        let g = 2.0 * (p[0] - 3.0);
        s.step_tensors(&mut [&mut p], &[&[g]]).unwrap();
        let (lr, wd, b1, b2, eps) = (1e-3, 3e-4, 0.9, 0.999, 1e-8);
        let decayed = 1.0 - lr * wd * 1.0;
        let m_hat = (1.0 - b1) * g / (1.0 - b1);
        let v_hat = (1.0 - b2) * g * g / (1.0 - b2);
        let expected = decayed - lr * m_hat / (f64::sqrt(v_hat) + eps);
        assert!((p[0] - expected).abs() < 1e-15, "{} vs {expected}", p[0]);
    }

    #[test]
    fn non_finite_gradient_is_rejected_without_update() {
        let (mut p, mut s) = one_param(0.5);
        assert!(s.step_tensors(&mut [&mut p], &[&[f64::NAN]]).is_err());
        assert_eq!(p, vec![0.5]);
        assert_eq!(s.step, 0);
    }

    fn toy_records(n: usize) -> Vec<EvaluationRecord> {
        (0..n)
            .map(|i| {
                let x = i as f64 / n as f64 - 0.5;
                let positive = x > 0.0;
                EvaluationRecord {
                    embedding: vec![x, -x, 1.0],
                    model: i % 2,
                    accuracy: if positive { 1.0 } else { 0.0 },
                    cost: if i % 2 == 0 { 0.2 } else { 0.8 },
                    task: None,
                }
            })
            .collect()
    }

    fn arch() -> MlpArchitecture {
        MlpArchitecture {
            d_emb: 3,
            hidden_widths: vec![8],
            dropout: 0.0,
            n_models: 2,
        }
    }

    #[test]
    fn full_batch_epoch_is_exactly_one_step() {
        let p = MlpParams::init(&arch(), 1).unwrap();
        let data = toy_records(10);
        let cfg = LocalTraining {
            batch_size: 64,
            ..LocalTraining::default()
        };
        let trained = local_train(&p, &data, &cfg, 1.0, 5, None).unwrap();
        let (_, grad) = super::super::loss_and_gradient(&p, &data, 1.0, Some(0)).unwrap();
        let mut manual = p.clone();
        OptimizerState::new(cfg.optimizer.clone()).step(&mut manual, &grad).unwrap();
        // batch order is shuffled, so sums agree only to rounding
        assert!(trained.max_abs_diff(&manual) < 1e-14);
    }

    #[test]
    fn training_is_deterministic_and_empty_data_is_identity() {
        let mut a = arch();
        a.dropout = 0.2;
        let p = MlpParams::init(&a, 1).unwrap();
        let data = toy_records(40);
        let cfg = LocalTraining {
            batch_size: 8,
            work: LocalWork::Epochs(2),
            ..LocalTraining::default()
        };
        let x = local_train(&p, &data, &cfg, 1.0, 9, None).unwrap();
        let y = local_train(&p, &data, &cfg, 1.0, 9, None).unwrap();
        assert_eq!(x, y);
        assert_eq!(local_train(&p, &[], &cfg, 1.0, 9, None).unwrap(), p);
    }

    #[test]
    fn separable_task_loss_drops_tenfold() {
        let p = MlpParams::init(&arch(), 2).unwrap();
        let data = toy_records(64);
        let cfg = LocalTraining {
            batch_size: 16,
            work: LocalWork::Epochs(50),
            optimizer: OptimizerConfig {
                learning_rate: 1e-2,
                ..OptimizerConfig::default()
            },
        };
        let before = dataset_loss(&p, &data, 1.0).unwrap();
        let trained = local_train(&p, &data, &cfg, 1.0, 3, None).unwrap();
        let after = dataset_loss(&trained, &data, 1.0).unwrap();
        assert!(after * 10.0 <= before, "loss {before} -> {after}");
    }

    #[test]
    fn step_mode_counts_steps() {
        let p = MlpParams::init(&arch(), 1).unwrap();
        let data = toy_records(10);
        let cfg = LocalTraining {
            batch_size: 10,
            work: LocalWork::Steps(1),
            optimizer: OptimizerConfig::sgd(0.1),
        };
        let trained = local_train(&p, &data, &cfg, 1.0, 0, None).unwrap();
        let (_, g) = super::super::loss_and_gradient(&p, &data, 1.0, None).unwrap();
        let mut manual = p.clone();
        OptimizerState::new(cfg.optimizer.clone()).step(&mut manual, &g).unwrap();
        assert!(trained.max_abs_diff(&manual) < 1e-14);
    }
}

//! Federated averaging: partial participation, broadcast, local training
//! and data-size-weighted parameter averaging.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, EvaluationRecord};
use crate::error::{Error, Result};
use crate::mlp::{dataset_loss, local_train, Distillation, LocalTraining, MlpArchitecture, MlpParams};
use crate::numeric::{derive_seed, round_half_up, seeded_rng, CompensatedSum};

const INIT_STREAM: u64 = 0x696e6974;
const SAMPLE_STREAM: u64 = 0x73616d70;
const TRAIN_STREAM: u64 = 0x7472616e;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FederationConfig {
    pub n_rounds: usize,
    pub participation_fraction: f64,
    pub local: LocalTraining,
    pub seed: u64,
    /// Also evaluate the loss over every client's data after each round.
    pub trace_all_clients: bool,
    /// Train the participants of a round concurrently.
    pub parallel: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            n_rounds: 50,
            participation_fraction: 0.6,
            local: LocalTraining::default(),
            seed: 0,
            trace_all_clients: true,
            parallel: true,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return Err(Error::config(
                "federation.participation_fraction",
                format!("must lie in (0,1], got {}", self.participation_fraction),
            ));
        }
        self.local.validate()
    }
}

/// `round(fraction * n)` rounding halves up, at least 1 and at most `n`.
pub fn participant_count(n_clients: usize, fraction: f64) -> usize {
    round_half_up(fraction * n_clients as f64).clamp(1, n_clients.max(1))
}

/// Uniform sample without replacement, sorted ascending. Depends only on
/// `(seed, round)`.
pub fn sample_participants(n_clients: usize, fraction: f64, round: usize, seed: u64) -> Vec<usize> {
    if n_clients == 0 {
        return Vec::new();
    }
    let k = participant_count(n_clients, fraction);
    if k == n_clients {
        return (0..n_clients).collect();
    }
    let mut rng = seeded_rng(derive_seed(seed, &[SAMPLE_STREAM, round as u64]));
    let mut ids = index::sample(&mut rng, n_clients, k).into_vec();
    ids.sort_unstable();
    ids
}

/// Normalizes nonnegative weights to sum to one.
pub fn normalize_weights(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::InvalidInput("aggregation weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().copied().collect::<CompensatedSum>().value();
    if total <= 0.0 {
        return Err(Error::InvalidInput("aggregation weights are all zero".into()));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// Coordinatewise convex combination of `params` with weights proportional
/// to `weights`, covering every tensor including layer-norm parameters.
///
/// The combination is computed as an offset from the first entry, so
/// averaging identical inputs or a single input reproduces it exactly.
pub fn aggregate(params: &[&MlpParams], weights: &[f64]) -> Result<MlpParams> {
    if params.is_empty() || params.len() != weights.len() {
        return Err(Error::InvalidInput(format!(
            "{} parameter sets with {} weights",
            params.len(),
            weights.len()
        )));
    }
    let base = params[0];
    if let Some(i) = params.iter().position(|p| !p.same_shape(base) || p.architecture != base.architecture) {
        return Err(Error::Shape(format!("parameter set {i} differs in shape from set 0")));
    }
    let w = normalize_weights(weights)?;
    let mut out = base.clone();
    let sources: Vec<Vec<&[f64]>> = params.iter().map(|p| p.tensors()).collect();
    for (t, dst) in out.tensors_mut().into_iter().enumerate() {
        for (j, v) in dst.iter_mut().enumerate() {
            let anchor = *v;
            let mut acc = CompensatedSum::new();
            for (src, &wi) in sources.iter().zip(&w).skip(1) {
                acc.add(wi * (src[t][j] - anchor));
            }
            *v = anchor + acc.value();
        }
    }
    Ok(out)
}

/// One communication round as recorded in the trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub participants: Vec<usize>,
    /// Normalized aggregation weights, aligned with `participants`.
    pub weights: Vec<f64>,
    /// Loss after aggregation on the participants' pooled training data.
    pub participant_loss: f64,
    /// Loss after aggregation on every client's training data.
    pub global_loss: Option<f64>,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    /// Loss of the starting parameters over all clients.
    pub initial_loss: f64,
    pub rounds: Vec<RoundRecord>,
}

impl RoundTrace {
    pub fn final_global_loss(&self) -> Option<f64> {
        self.rounds.last().map_or(Some(self.initial_loss), |r| r.global_loss)
    }

    /// Delimited trace. Wall-clock times are written only on request so that
    /// default artifacts stay reproducible byte for byte.
    pub fn write_csv<W: Write>(&self, mut w: W, with_wall_time: bool) -> Result<()> {
        let io = |e| Error::io(Path::new("<round trace>"), e);
        write!(w, "round,participants,weights,participant_loss,global_loss").map_err(io)?;
        if with_wall_time {
            write!(w, ",wall_ms").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
        for r in &self.rounds {
            let ids: Vec<String> = r.participants.iter().map(|i| i.to_string()).collect();
            let ws: Vec<String> = r.weights.iter().map(|x| x.to_string()).collect();
            let global = r.global_loss.map_or(String::new(), |g| g.to_string());
            write!(w, "{},{},{},{},{}", r.round, ids.join(";"), ws.join(";"), r.participant_loss, global).map_err(io)?;
            if with_wall_time {
                write!(w, ",{}", r.wall_ms).map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, with_wall_time: bool) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, with_wall_time)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

fn pooled_loss(params: &MlpParams, clients: &[&ClientDataset], cost_normalizer: f64) -> Result<f64> {
    let mut total = CompensatedSum::new();
    let mut n = 0usize;
    for c in clients {
        if !c.train.is_empty() {
            total.add(dataset_loss(params, &c.train, cost_normalizer)? * c.train.len() as f64);
            n += c.train.len();
        }
    }
    Ok(if n == 0 { 0.0 } else { total.value() / n as f64 })
}

/// Initial parameters for a run seeded by `seed`.
pub fn initial_params(architecture: &MlpArchitecture, seed: u64) -> Result<MlpParams> {
    MlpParams::init(architecture, derive_seed(seed, &[INIT_STREAM]))
}

/// FedAvg from freshly initialized parameters.
pub fn run_federated_training(
    clients: &[ClientDataset],
    architecture: &MlpArchitecture,
    config: &FederationConfig,
    cost_normalizer: f64,
) -> Result<(MlpParams, RoundTrace)> {
    let init = initial_params(architecture, config.seed)?;
    continue_federated_training(&init, clients, config, cost_normalizer, None)
}

/// FedAvg starting from `initial`, optionally regularized towards a frozen
/// teacher on each client's prompts.
pub fn continue_federated_training(
    initial: &MlpParams,
    clients: &[ClientDataset],
    config: &FederationConfig,
    cost_normalizer: f64,
    distill: Option<&Distillation>,
) -> Result<(MlpParams, RoundTrace)> {
    config.validate()?;
    if !clients.iter().any(|c| !c.train.is_empty()) {
        return Err(Error::InvalidInput("no client has training data".into()));
    }
    let all: Vec<&ClientDataset> = clients.iter().collect();
    let mut params = initial.clone();
    let mut trace = RoundTrace {
        initial_loss: pooled_loss(&params, &all, cost_normalizer)?,
        rounds: Vec::with_capacity(config.n_rounds),
    };
    for round in 0..config.n_rounds {
        let start = Instant::now();
        let ids = sample_participants(clients.len(), config.participation_fraction, round, config.seed);
        let train_one = |&i: &usize| -> Result<MlpParams> {
            let seed = derive_seed(config.seed, &[TRAIN_STREAM, round as u64, i as u64]);
            local_train(&params, &clients[i].train, &config.local, cost_normalizer, seed, distill)
        };
        let updates: Vec<MlpParams> = if config.parallel {
            ids.par_iter().map(train_one).collect::<Result<_>>()?
        } else {
            ids.iter().map(train_one).collect::<Result<_>>()?
        };
        let sizes: Vec<f64> = ids.iter().map(|&i| clients[i].train.len() as f64).collect();
        let weights = if sizes.iter().any(|&s| s > 0.0) {
            let refs: Vec<&MlpParams> = updates.iter().collect();
            params = aggregate(&refs, &sizes)?;
            normalize_weights(&sizes)?
        } else {
            log::warn!("round {round}: every participant is empty, parameters unchanged");
            vec![0.0; ids.len()]
        };
        let members: Vec<&ClientDataset> = ids.iter().map(|&i| &clients[i]).collect();
        let participant_loss = pooled_loss(&params, &members, cost_normalizer)?;
        let global_loss = if config.trace_all_clients {
            Some(pooled_loss(&params, &all, cost_normalizer)?)
        } else {
            None
        };
        log::debug!("round {round}: participants {ids:?}, loss {participant_loss}");
        trace.rounds.push(RoundRecord {
            round,
            participants: ids,
            weights,
            participant_loss,
            global_loss,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok((params, trace))
}

/// Trains on one client's data alone with the same per-round schedule,
/// which is the client-local baseline.
pub fn run_local_training(
    train: &[EvaluationRecord],
    architecture: &MlpArchitecture,
    config: &FederationConfig,
    cost_normalizer: f64,
) -> Result<MlpParams> {
    let client = ClientDataset {
        client_id: 0,
        train: train.to_vec(),
        test: Vec::new(),
    };
    let cfg = FederationConfig {
        participation_fraction: 1.0,
        trace_all_clients: false,
        parallel: false,
        ..config.clone()
    };
    Ok(run_federated_training(std::slice::from_ref(&client), architecture, &cfg, cost_normalizer)?.0)
}

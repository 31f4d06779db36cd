//! Adaptive personalization and router expansion.
//!
//! A client blends the federated estimator with its own local one, per model
//! and per target, weighting each by the other's calibration error. Routers
//! grow to new models (a new MLP head trained alone, or new K-means cell
//! statistics) and to new clients (distillation-regularized FedAvg, or a
//! count-weighted statistics merge).

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, EvaluationRecord};
use crate::error::{Error, Result};
use crate::eval::{utilities, Estimate, Estimator};
use crate::fedavg::{continue_federated_training, FederationConfig, RoundTrace};
use crate::kmeans::{client_cell_stats, merge_tables, KmeansRouterState};
use crate::mlp::{embedding_matrix, trunk_features, Distillation, HeadParams, MlpParams, OptimizerConfig, OptimizerState};
use crate::numeric::{derive_seed, seeded_rng, sigmoid, CompensatedSum};

/// Mean absolute errors of one estimator on one model's logged records.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMae {
    pub accuracy: f64,
    /// On the raw cost scale.
    pub cost: f64,
    pub count: usize,
}

/// Per-model MAE of `estimator` over `records`, grouped by logged model.
/// Models with no scored records are `None`.
pub fn calibration_errors<E: Estimator + ?Sized>(estimator: &E, records: &[EvaluationRecord]) -> Result<Vec<Option<ModelMae>>> {
    let m = estimator.n_models();
    let xs: Vec<&[f64]> = records.iter().map(|r| r.embedding.as_slice()).collect();
    let est = estimator.estimate_many(&xs)?;
    let mut sums = vec![(CompensatedSum::new(), CompensatedSum::new(), 0usize); m];
    for (r, e) in records.iter().zip(&est) {
        if r.model >= m {
            return Err(Error::MissingGroundTruth { model: r.model });
        }
        if let Some(e) = e[r.model] {
            let s = &mut sums[r.model];
            s.0.add((e.accuracy - r.accuracy).abs());
            s.1.add((e.cost - r.cost).abs());
            s.2 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(a, c, n)| {
            (n > 0).then(|| ModelMae {
                accuracy: a.value() / n as f64,
                cost: c.value() / n as f64,
                count: n,
            })
        })
        .collect())
}

/// Weight on the local estimator for one model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlendWeight {
    pub accuracy: f64,
    pub cost: f64,
    pub federated_mae: Option<ModelMae>,
    pub local_mae: Option<ModelMae>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersonalizationWeights {
    pub models: Vec<BlendWeight>,
}

fn local_share(fed: f64, local: f64) -> f64 {
    let total = fed + local;
    if total > 0.0 {
        (fed / total).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// `w = e_fed / (e_fed + e_local)` per model and target. A model missing
/// from the local data gets 0; a model missing from the federated estimator
/// gets 1; two zero errors give 0.
pub fn blend_weights(federated: &[Option<ModelMae>], local: &[Option<ModelMae>]) -> Result<PersonalizationWeights> {
    if federated.len() != local.len() {
        return Err(Error::Shape(format!("{} vs {} models", federated.len(), local.len())));
    }
    let models = federated
        .iter()
        .zip(local)
        .map(|(f, l)| {
            let (a, c) = match (f, l) {
                (_, None) => (0.0, 0.0),
                (None, Some(_)) => (1.0, 1.0),
                (Some(f), Some(l)) => (local_share(f.accuracy, l.accuracy), local_share(f.cost, l.cost)),
            };
            BlendWeight {
                accuracy: a,
                cost: c,
                federated_mae: *f,
                local_mae: *l,
            }
        })
        .collect();
    Ok(PersonalizationWeights { models })
}

impl PersonalizationWeights {
    /// Per-client audit table. Absent errors are empty fields.
    pub fn write_csv_rows(&self, client: usize, names: &[String], out: &mut String) {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        for (m, w) in self.models.iter().enumerate() {
            let name = names.get(m).map_or_else(|| m.to_string(), Clone::clone);
            let _ = writeln!(
                out,
                "{client},{name},{},{},{},{},{},{}",
                opt(w.federated_mae.map(|e| e.accuracy)),
                opt(w.local_mae.map(|e| e.accuracy)),
                opt(w.federated_mae.map(|e| e.cost)),
                opt(w.local_mae.map(|e| e.cost)),
                w.accuracy,
                w.cost
            );
        }
    }
}

pub const PERSONALIZATION_HEADER: &str =
    "client,model,fed_mae_accuracy,local_mae_accuracy,fed_mae_cost,local_mae_cost,w_accuracy,w_cost";

/// Convex per-model blend of a federated and a local estimator.
pub struct PersonalizedEstimator<F, L> {
    pub federated: F,
    pub local: L,
    pub weights: PersonalizationWeights,
}

impl<F: Estimator, L: Estimator> PersonalizedEstimator<F, L> {
    /// Calibrates the blend on `records` (typically the client's own
    /// training data).
    pub fn calibrate(federated: F, local: L, records: &[EvaluationRecord]) -> Result<Self> {
        let fe = calibration_errors(&federated, records)?;
        let le = calibration_errors(&local, records)?;
        let weights = blend_weights(&fe, &le)?;
        Ok(Self {
            federated,
            local,
            weights,
        })
    }

    fn blend(&self, fed: Vec<Option<Estimate>>, local: Vec<Option<Estimate>>) -> Vec<Option<Estimate>> {
        fed.into_iter()
            .zip(local)
            .zip(&self.weights.models)
            .map(|((f, l), w)| match (f, l) {
                (Some(f), Some(l)) => Some(Estimate {
                    accuracy: w.accuracy * l.accuracy + (1.0 - w.accuracy) * f.accuracy,
                    cost: w.cost * l.cost + (1.0 - w.cost) * f.cost,
                }),
                (f, l) => f.or(l),
            })
            .collect()
    }
}

impl<F: Estimator, L: Estimator> Estimator for PersonalizedEstimator<F, L> {
    fn n_models(&self) -> usize {
        self.weights.models.len()
    }

    fn estimate(&self, x: &[f64]) -> Result<Vec<Option<Estimate>>> {
        Ok(self.blend(self.federated.estimate(x)?, self.local.estimate(x)?))
    }

    fn estimate_many(&self, xs: &[&[f64]]) -> Result<Vec<Vec<Option<Estimate>>>> {
        let f = self.federated.estimate_many(xs)?;
        let l = self.local.estimate_many(xs)?;
        Ok(f.into_iter().zip(l).map(|(f, l)| self.blend(f, l)).collect())
    }
}

/// Blended utilities `a_blend - lambda * c_blend`.
pub fn personalized_utilities<F: Estimator, L: Estimator>(
    estimator: &PersonalizedEstimator<F, L>,
    x: &[f64],
    lambda: f64,
) -> Result<Vec<Option<f64>>> {
    Ok(utilities(&estimator.estimate(x)?, lambda))
}

/// Settings for training a single new head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for HeadTraining {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 128,
            optimizer: OptimizerConfig {
                learning_rate: 1e-2,
                ..OptimizerConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadExpansion {
    pub params: MlpParams,
    /// `false` when there was no calibration data and the head kept its
    /// initial values.
    pub trained: bool,
    pub final_loss: Option<f64>,
}

fn head_loss_and_gradient(head: &HeadParams, features: &Array2<f64>, acc: &Array1<f64>, cost: &Array1<f64>) -> (f64, [Vec<f64>; 4]) {
    let b = features.nrows() as f64;
    let a_hat = (features.dot(&head.accuracy_weight) + head.accuracy_bias).mapv(sigmoid);
    let c_hat = features.dot(&head.cost_weight) + head.cost_bias;
    let ea = &a_hat - acc;
    let ec = &c_hat - cost;
    let loss = ea
        .iter()
        .zip(ec.iter())
        .map(|(x, y)| (x * x + y * y) / b)
        .collect::<CompensatedSum>()
        .value();
    let d_logit = &ea * &a_hat.mapv(|a| a * (1.0 - a)) * (2.0 / b);
    let d_cost = ec * (2.0 / b);
    let grads = [
        features.t().dot(&d_logit).to_vec(),
        vec![d_logit.sum()],
        features.t().dot(&d_cost).to_vec(),
        vec![d_cost.sum()],
    ];
    (loss, grads)
}

/// Appends a head for a new model and fits it on `calibration` (records of
/// the new model only) with the trunk and old heads frozen. The trunk
/// features are computed once in inference mode.
pub fn add_model_mlp(
    params: &MlpParams,
    calibration: &[EvaluationRecord],
    training: &HeadTraining,
    cost_normalizer: f64,
    seed: u64,
) -> Result<HeadExpansion> {
    training.optimizer.validate()?;
    let width = *params.architecture.hidden_widths.last().expect("validated");
    let mut head = HeadParams::init(width, derive_seed(seed, &[0]));
    if calibration.is_empty() {
        log::warn!("no calibration records: new head left untrained");
        return Ok(HeadExpansion {
            params: params.with_new_head(&head)?,
            trained: false,
            final_loss: None,
        });
    }
    let xs = embedding_matrix(calibration.iter().map(|r| r.embedding.as_slice()), params.architecture.d_emb)?;
    let features = trunk_features(params, xs.view())?;
    let acc = Array1::from_iter(calibration.iter().map(|r| r.accuracy));
    let cost = Array1::from_iter(calibration.iter().map(|r| r.cost / cost_normalizer));
    let mut state = OptimizerState::new(training.optimizer.clone());
    let mut order: Vec<usize> = (0..calibration.len()).collect();
    let bs = training.batch_size.max(1);
    for epoch in 0..training.epochs {
        order.sort_unstable();
        order.shuffle(&mut seeded_rng(derive_seed(seed, &[1, epoch as u64])));
        for chunk in order.chunks(bs) {
            let f = features.select(Axis(0), chunk);
            let a = acc.select(Axis(0), chunk);
            let c = cost.select(Axis(0), chunk);
            let (_, grads) = head_loss_and_gradient(&head, &f, &a, &c);
            let mut ab = [head.accuracy_bias];
            let mut cb = [head.cost_bias];
            {
                let mut tensors: [&mut [f64]; 4] = [
                    head.accuracy_weight.as_slice_mut().expect("contiguous"),
                    &mut ab,
                    head.cost_weight.as_slice_mut().expect("contiguous"),
                    &mut cb,
                ];
                let g: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
                state.step_tensors(&mut tensors, &g)?;
            }
            head.accuracy_bias = ab[0];
            head.cost_bias = cb[0];
        }
    }
    let (loss, _) = head_loss_and_gradient(&head, &features, &acc, &cost);
    Ok(HeadExpansion {
        params: params.with_new_head(&head)?,
        trained: true,
        final_loss: Some(loss),
    })
}

/// Adds statistics for a new model over the existing clusters. Every
/// calibration record is treated as an evaluation of the new model.
pub fn add_model_kmeans(state: &KmeansRouterState, calibration: &[EvaluationRecord]) -> Result<KmeansRouterState> {
    let new_m = state.stats.n_models;
    let recs: Vec<EvaluationRecord> = calibration
        .iter()
        .map(|r| EvaluationRecord {
            model: new_m,
            ..r.clone()
        })
        .collect();
    let extra = client_cell_stats(&state.centroids, &recs, new_m + 1)?;
    KmeansRouterState::new(state.centroids.clone(), state.stats.with_extra_model().merge(&extra)?)
}

/// Continued FedAvg over the new clients only, pulled towards the frozen
/// base router's predictions on their prompts.
pub fn add_clients_mlp(
    base: &MlpParams,
    new_clients: &[ClientDataset],
    distillation_weight: f64,
    config: &FederationConfig,
    cost_normalizer: f64,
) -> Result<(MlpParams, RoundTrace)> {
    if !(distillation_weight >= 0.0 && distillation_weight.is_finite()) {
        return Err(Error::config("expansion.distillation_weight", "must be a nonnegative number"));
    }
    let teacher = base.clone();
    let distill = Distillation {
        teacher: &teacher,
        weight: distillation_weight,
    };
    continue_federated_training(base, new_clients, config, cost_normalizer, Some(&distill))
}

/// Merges the new clients' per-(cluster, model) statistics, computed
/// against the existing centers.
pub fn add_clients_kmeans(state: &KmeansRouterState, new_clients: &[ClientDataset]) -> Result<KmeansRouterState> {
    let tables: Vec<_> = new_clients
        .iter()
        .map(|c| client_cell_stats(&state.centroids, &c.train, state.stats.n_models))
        .collect::<Result<_>>()?;
    let extra = merge_tables(&tables, state.n_clusters(), state.stats.n_models)?;
    state.merged_with(&extra)
}

/// Writes the personalization report for several clients.
pub fn save_personalization_report(path: &Path, rows: &[(usize, PersonalizationWeights)], names: &[String]) -> Result<()> {
    let mut out = format!("{PERSONALIZATION_HEADER}\n");
    for (client, w) in rows {
        w.write_csv_rows(*client, names, &mut out);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

//! Routing and accuracy/cost frontier evaluation.
//!
//! Any [`Estimator`] (per-model accuracy and cost predictions for a query)
//! induces a router: for a trade-off `lambda >= 0`, pick the model maximizing
//! `accuracy - lambda * cost`. Sweeping `lambda` over a log grid and scoring
//! the routed choices on fully evaluated test queries gives a
//! [`FrontierCurve`], summarized by its cost-range-normalized AUC.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EvaluationRecord, FullEvaluation};
use crate::error::{Error, Result};
use crate::ingestion::{oracle_best_model, SyntheticOracle};
use crate::numeric::{compensated_mean, CompensatedSum};

impl AsRef<[f64]> for FullEvaluation {
    fn as_ref(&self) -> &[f64] {
        &self.embedding
    }
}

impl AsRef<[f64]> for EvaluationRecord {
    fn as_ref(&self) -> &[f64] {
        &self.embedding
    }
}

/// Estimated accuracy and cost (currency units) of one model on one query.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub accuracy: f64,
    pub cost: f64,
}

/// Per-model accuracy/cost predictor. `None` means the estimator has no
/// information about that model and the router must skip it.
pub trait Estimator: Sync {
    fn n_models(&self) -> usize;

    fn estimate(&self, x: &[f64]) -> Result<Vec<Option<Estimate>>>;

    fn estimate_many(&self, xs: &[&[f64]]) -> Result<Vec<Vec<Option<Estimate>>>> {
        xs.iter().map(|x| self.estimate(x)).collect()
    }
}

impl<E: Estimator + ?Sized> Estimator for &E {
    fn n_models(&self) -> usize {
        (**self).n_models()
    }

    fn estimate(&self, x: &[f64]) -> Result<Vec<Option<Estimate>>> {
        (**self).estimate(x)
    }

    fn estimate_many(&self, xs: &[&[f64]]) -> Result<Vec<Vec<Option<Estimate>>>> {
        (**self).estimate_many(xs)
    }
}

/// Estimated utilities `accuracy - lambda * cost`, absent where the estimate is.
pub fn utilities(estimates: &[Option<Estimate>], lambda: f64) -> Vec<Option<f64>> {
    estimates
        .iter()
        .map(|e| e.map(|e| e.accuracy - lambda * e.cost))
        .collect()
}

/// Argmax over present utilities. Exact ties go to the lower estimated cost,
/// then to the lower model index.
pub fn route(utilities: &[Option<f64>], costs: &[Option<f64>]) -> Result<usize> {
    let mut best: Option<(usize, f64, f64)> = None;
    for (m, u) in utilities.iter().enumerate() {
        let Some(u) = *u else { continue };
        let c = costs.get(m).copied().flatten().unwrap_or(f64::INFINITY);
        best = match best {
            None => Some((m, u, c)),
            Some((bm, bu, bc)) => match u.total_cmp(&bu) {
                Ordering::Greater => Some((m, u, c)),
                Ordering::Equal if c < bc => Some((m, u, c)),
                _ => Some((bm, bu, bc)),
            },
        };
    }
    best.map(|(m, _, _)| m).ok_or(Error::UntrainedRouter)
}

/// Routes one query given its estimates.
pub fn route_estimates(estimates: &[Option<Estimate>], lambda: f64) -> Result<usize> {
    let costs: Vec<Option<f64>> = estimates.iter().map(|e| e.map(|e| e.cost)).collect();
    route(&utilities(estimates, lambda), &costs)
}

/// A routing policy: picks a model for a query at a given trade-off.
pub trait Policy: Sync {
    fn select(&self, x: &[f64], lambda: f64) -> Result<usize>;
}

impl<F> Policy for F
where
    F: Fn(&[f64], f64) -> Result<usize> + Sync,
{
    fn select(&self, x: &[f64], lambda: f64) -> Result<usize> {
        self(x, lambda)
    }
}

/// The router induced by an estimator.
pub struct EstimatorPolicy<E>(pub E);

impl<E: Estimator> Policy for EstimatorPolicy<E> {
    fn select(&self, x: &[f64], lambda: f64) -> Result<usize> {
        route_estimates(&self.0.estimate(x)?, lambda)
    }
}

/// The optimal router under a synthetic oracle's true utilities.
pub struct OraclePolicy<'a>(pub &'a SyntheticOracle);

impl Policy for OraclePolicy<'_> {
    fn select(&self, x: &[f64], lambda: f64) -> Result<usize> {
        Ok(oracle_best_model(self.0, x, lambda))
    }
}

/// Oracle true values as an estimator, for reference frontiers.
impl Estimator for SyntheticOracle {
    fn n_models(&self) -> usize {
        SyntheticOracle::n_models(self)
    }

    fn estimate(&self, x: &[f64]) -> Result<Vec<Option<Estimate>>> {
        Ok((0..SyntheticOracle::n_models(self))
            .map(|m| {
                Some(Estimate {
                    accuracy: self.true_accuracy(x, m),
                    cost: self.true_cost(m),
                })
            })
            .collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutcome {
    pub mean_accuracy: f64,
    pub mean_cost: f64,
}

fn score_choices(test: &[FullEvaluation], choices: &[usize]) -> Result<PolicyOutcome> {
    if test.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    let mut acc = CompensatedSum::new();
    let mut cost = CompensatedSum::new();
    for (q, &m) in test.iter().zip(choices) {
        match (q.accuracy.get(m), q.cost.get(m)) {
            (Some(&a), Some(&c)) if a.is_finite() && c.is_finite() => {
                acc.add(a);
                cost.add(c);
            }
            _ => return Err(Error::MissingGroundTruth { model: m }),
        }
    }
    let n = test.len() as f64;
    Ok(PolicyOutcome {
        mean_accuracy: acc.value() / n,
        mean_cost: cost.value() / n,
    })
}

/// Routes every test query and averages the realized accuracy and cost of
/// the chosen models.
pub fn evaluate_policy<P: Policy + ?Sized>(policy: &P, test: &[FullEvaluation], lambda: f64) -> Result<PolicyOutcome> {
    let choices = test
        .iter()
        .map(|q| policy.select(&q.embedding, lambda))
        .collect::<Result<Vec<_>>>()?;
    score_choices(test, &choices)
}

/// Log-spaced trade-off grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LambdaGrid {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Default for LambdaGrid {
    fn default() -> Self {
        Self {
            min: 1e-2,
            max: 1e7,
            count: 100,
        }
    }
}

impl LambdaGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0 && self.max >= self.min && self.max.is_finite()) {
            return Err(Error::config("lambda_grid", "endpoints must satisfy 0 < min <= max"));
        }
        if self.count < 2 {
            return Err(Error::config("lambda_grid.count", "must be at least 2"));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        let (lo, hi) = (self.min.log10(), self.max.log10());
        let last = self.count - 1;
        (0..self.count)
            .map(|i| match i {
                0 => self.min,
                i if i == last => self.max,
                i => 10f64.powf(lo + (hi - lo) * i as f64 / last as f64),
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub lambda: f64,
    pub mean_cost: f64,
    pub mean_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierCurve {
    /// In sweep order (increasing lambda).
    pub points: Vec<FrontierPoint>,
    pub auc: f64,
}

impl FrontierCurve {
    pub fn from_points(points: Vec<FrontierPoint>) -> Self {
        let auc = normalized_auc(&points);
        Self { points, auc }
    }

    pub fn write_csv(&self) -> String {
        let mut out = String::from("lambda,mean_cost,mean_accuracy\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.lambda, p.mean_cost, p.mean_accuracy);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.write_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "lambda,mean_cost,mean_accuracy")) => {}
            _ => {
                return Err(Error::Parse {
                    row: 1,
                    column: "lambda".into(),
                    message: "missing curve header".into(),
                })
            }
        }
        let mut points = Vec::new();
        for (i, line) in lines {
            let row = i + 1;
            let parse = |s: &str, col: &str| {
                s.trim().parse::<f64>().map_err(|e| Error::Parse {
                    row,
                    column: col.into(),
                    message: e.to_string(),
                })
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    row,
                    column: "lambda".into(),
                    message: "expected 3 fields".into(),
                });
            }
            points.push(FrontierPoint {
                lambda: parse(fields[0], "lambda")?,
                mean_cost: parse(fields[1], "mean_cost")?,
                mean_accuracy: parse(fields[2], "mean_accuracy")?,
            });
        }
        Ok(Self::from_points(points))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }
}

/// Estimates of every test query, computed once and reused across the sweep.
pub fn estimate_table<E: Estimator + ?Sized>(estimator: &E, test: &[FullEvaluation]) -> Result<Vec<Vec<Option<Estimate>>>> {
    let xs: Vec<&[f64]> = test.iter().map(|q| q.embedding.as_slice()).collect();
    estimator.estimate_many(&xs)
}

/// Scores precomputed estimates at one trade-off value.
pub fn evaluate_table(table: &[Vec<Option<Estimate>>], test: &[FullEvaluation], lambda: f64) -> Result<PolicyOutcome> {
    let choices = table
        .iter()
        .map(|e| route_estimates(e, lambda))
        .collect::<Result<Vec<_>>>()?;
    score_choices(test, &choices)
}

pub fn sweep_table(table: &[Vec<Option<Estimate>>], test: &[FullEvaluation], grid: &LambdaGrid) -> Result<FrontierCurve> {
    grid.validate()?;
    let points = grid
        .values()
        .into_par_iter()
        .map(|lambda| {
            evaluate_table(table, test, lambda).map(|o| FrontierPoint {
                lambda,
                mean_cost: o.mean_cost,
                mean_accuracy: o.mean_accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FrontierCurve::from_points(points))
}

/// Sweeps the trade-off grid and returns the accuracy/cost frontier of the
/// router induced by `estimator` on `test`.
pub fn sweep_lambda<E: Estimator + ?Sized>(estimator: &E, test: &[FullEvaluation], grid: &LambdaGrid) -> Result<FrontierCurve> {
    let table = estimate_table(estimator, test)?;
    sweep_table(&table, test, grid)
}

/// Trapezoidal area under accuracy-versus-cost divided by the cost range.
///
/// Points are sorted by cost and points sharing a cost keep the highest
/// accuracy. With a single distinct cost the AUC is that accuracy. An empty
/// input gives 0.
pub fn normalized_auc(points: &[FrontierPoint]) -> f64 {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.mean_cost, p.mean_accuracy)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.total_cmp(&a.1)));
    pts.dedup_by(|later, earlier| later.0 == earlier.0);
    match pts.as_slice() {
        [] => 0.0,
        [(_, acc)] => *acc,
        [first, .., last] => {
            let range = last.0 - first.0;
            let area: CompensatedSum = pts
                .windows(2)
                .map(|w| 0.5 * (w[1].0 - w[0].0) * (w[0].1 + w[1].1))
                .collect();
            area.value() / range
        }
    }
}

/// Mean utility gap `U(x, pi*(x)) - U(x, pi(x))` under the oracle's true
/// utilities.
pub fn suboptimality<P, Q>(policy: &P, oracle: &SyntheticOracle, queries: &[Q], lambda: f64) -> Result<f64>
where
    P: Policy + ?Sized,
    Q: AsRef<[f64]>,
{
    let gaps = queries
        .iter()
        .map(|q| {
            let x = q.as_ref();
            let best = oracle_best_model(oracle, x, lambda);
            let chosen = policy.select(x, lambda)?;
            if chosen >= oracle.n_models() {
                return Err(Error::MissingGroundTruth { model: chosen });
            }
            Ok(oracle.utility(x, best, lambda) - oracle.utility(x, chosen, lambda))
        })
        .collect::<Result<Vec<_>>>()?;
    compensated_mean(gaps).ok_or_else(|| Error::InvalidInput("no queries".into()))
}

/// [`suboptimality`] of the router behind precomputed estimates.
pub fn suboptimality_table<Q: AsRef<[f64]>>(
    table: &[Vec<Option<Estimate>>],
    oracle: &SyntheticOracle,
    queries: &[Q],
    lambda: f64,
) -> Result<f64> {
    let gaps = table
        .iter()
        .zip(queries)
        .map(|(est, q)| {
            let x = q.as_ref();
            let best = oracle_best_model(oracle, x, lambda);
            let chosen = route_estimates(est, lambda)?;
            if chosen >= oracle.n_models() {
                return Err(Error::MissingGroundTruth { model: chosen });
            }
            Ok(oracle.utility(x, best, lambda) - oracle.utility(x, chosen, lambda))
        })
        .collect::<Result<Vec<_>>>()?;
    compensated_mean(gaps).ok_or_else(|| Error::InvalidInput("no queries".into()))
}

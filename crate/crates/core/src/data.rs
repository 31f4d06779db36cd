//! Domain types shared by every module: model pools, logged evaluation
//! records, fully evaluated test queries and dataset manifests.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered pool of candidate models. Identifiers map to dense indices by
/// position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelPool {
    models: Vec<String>,
    c_max: f64,
}

impl ModelPool {
    pub fn new(models: Vec<String>, c_max: f64) -> Result<Self> {
        if models.is_empty() {
            return Err(Error::InvalidInput("model pool must not be empty".into()));
        }
        let mut seen = HashSet::new();
        for m in &models {
            if !seen.insert(m.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate model identifier `{m}`")));
            }
        }
        if !(c_max > 0.0 && c_max.is_finite()) {
            return Err(Error::InvalidInput(format!("c_max must be positive, got {c_max}")));
        }
        Ok(Self { models, c_max })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn c_max(&self) -> f64 {
        self.c_max
    }

    pub fn names(&self) -> &[String] {
        &self.models
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.models.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.models.iter().position(|m| m == name)
    }

    /// Pool restricted to its first `n` models.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        Self::new(self.models[..n.min(self.len())].to_vec(), self.c_max)
    }

    /// Pool with one more model appended at index `len()`.
    pub fn with_model(&self, name: impl Into<String>) -> Result<Self> {
        let mut models = self.models.clone();
        models.push(name.into());
        Self::new(models, self.c_max)
    }
}

/// One logged evaluation: a query embedding, the single model it was sent
/// to and the observed accuracy and cost.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub embedding: Vec<f64>,
    pub model: usize,
    pub accuracy: f64,
    pub cost: f64,
    pub task: Option<String>,
}

/// A query evaluated on every model of the pool. Test sets keep these so
/// that whatever model a router picks can be scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullEvaluation {
    pub embedding: Vec<f64>,
    pub task: Option<String>,
    pub accuracy: Vec<f64>,
    pub cost: Vec<f64>,
}

impl FullEvaluation {
    pub fn n_models(&self) -> usize {
        self.accuracy.len()
    }

    /// The record a client would have logged had it sent this query to `model`.
    pub fn log(&self, model: usize) -> Result<EvaluationRecord> {
        match (self.accuracy.get(model), self.cost.get(model)) {
            (Some(&accuracy), Some(&cost)) => Ok(EvaluationRecord {
                embedding: self.embedding.clone(),
                model,
                accuracy,
                cost,
                task: self.task.clone(),
            }),
            _ => Err(Error::MissingGroundTruth { model }),
        }
    }

    /// All `M` single-model records of this query, in model order.
    pub fn records(&self) -> impl Iterator<Item = EvaluationRecord> + '_ {
        (0..self.n_models()).map(move |m| self.log(m).expect("index in range"))
    }
}

/// Anything that carries an optional task label used for partitioning.
pub trait TaskLabeled {
    fn task(&self) -> Option<&str>;
}

impl TaskLabeled for EvaluationRecord {
    fn task(&self) -> Option<&str> {
        self.task.as_deref()
    }
}

impl TaskLabeled for FullEvaluation {
    fn task(&self) -> Option<&str> {
        self.task.as_deref()
    }
}

/// One client's local data: logged training records and fully evaluated
/// test queries.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub train: Vec<EvaluationRecord>,
    pub test: Vec<FullEvaluation>,
}

impl ClientDataset {
    pub fn len(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub d_emb: usize,
    pub model_pool: ModelPool,
    pub n_records: usize,
    /// Divides raw costs to give the cost head's regression targets.
    pub cost_normalizer: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    Dimension { expected: usize, found: usize },
    NonFiniteEmbedding,
    ModelOutOfRange { model: usize, pool_size: usize },
    AccuracyOutOfRange(f64),
    CostOutOfRange { cost: f64, c_max: f64 },
    CostAboveNormalizer { cost: f64, normalizer: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::Dimension { expected, found } => {
                write!(f, "embedding dimension {found}, expected {expected}")
            }
            Violation::NonFiniteEmbedding => write!(f, "non-finite embedding entry"),
            Violation::ModelOutOfRange { model, pool_size } => {
                write!(f, "model index {model} outside pool of {pool_size}")
            }
            Violation::AccuracyOutOfRange(a) => write!(f, "accuracy out of [0,1]: {a}"),
            Violation::CostOutOfRange { cost, c_max } => {
                write!(f, "cost out of [0,{c_max}]: {cost}")
            }
            Violation::CostAboveNormalizer { cost, normalizer } => {
                write!(f, "cost {cost} exceeds cost normalizer {normalizer}")
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    /// `(record index, violation)`, sorted by index then by check order.
    pub violations: Vec<(usize, Violation)>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, v) in &self.violations {
            writeln!(f, "record {i}: {v}")?;
        }
        Ok(())
    }
}

fn check_record(r: &EvaluationRecord, manifest: &DatasetManifest, out: &mut Vec<Violation>) {
    if r.embedding.len() != manifest.d_emb {
        out.push(Violation::Dimension {
            expected: manifest.d_emb,
            found: r.embedding.len(),
        });
    }
    if r.embedding.iter().any(|v| !v.is_finite()) {
        out.push(Violation::NonFiniteEmbedding);
    }
    let pool_size = manifest.model_pool.len();
    if r.model >= pool_size {
        out.push(Violation::ModelOutOfRange {
            model: r.model,
            pool_size,
        });
    }
    if !(0.0..=1.0).contains(&r.accuracy) {
        out.push(Violation::AccuracyOutOfRange(r.accuracy));
    }
    let c_max = manifest.model_pool.c_max();
    if !(0.0..=c_max).contains(&r.cost) {
        out.push(Violation::CostOutOfRange { cost: r.cost, c_max });
    }
    if r.cost > manifest.cost_normalizer {
        out.push(Violation::CostAboveNormalizer {
            cost: r.cost,
            normalizer: manifest.cost_normalizer,
        });
    }
}

/// Checks every record against the manifest and reports each violated
/// invariant with its record index. An empty report means the dataset is
/// valid.
pub fn validate_dataset(records: &[EvaluationRecord], manifest: &DatasetManifest) -> ValidationReport {
    let mut violations = Vec::new();
    let mut buf = Vec::new();
    for (i, r) in records.iter().enumerate() {
        check_record(r, manifest, &mut buf);
        violations.extend(buf.drain(..).map(|v| (i, v)));
    }
    ValidationReport { violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(d: usize) -> DatasetManifest {
        DatasetManifest {
            d_emb: d,
            model_pool: ModelPool::new(vec!["a".into(), "b".into()], 1.0).unwrap(),
            n_records: 0,
            cost_normalizer: 1.0,
        }
    }

    fn record(acc: f64, dim: usize) -> EvaluationRecord {
        EvaluationRecord {
            embedding: vec![0.5; dim],
            model: 1,
            accuracy: acc,
            cost: 0.2,
            task: None,
        }
    }

    #[test]
    fn accuracy_above_one_is_reported_at_its_index() {
        let recs = vec![record(0.3, 4), record(1.2, 4)];
        let report = validate_dataset(&recs, &manifest(4));
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].0, 1);
        assert!(report.violations[0].1.to_string().contains("accuracy out of [0,1]"));
    }

    #[test]
    fn empty_dataset_is_valid() {
        assert!(validate_dataset(&[], &manifest(4)).is_valid());
    }

    #[test]
    fn wrong_embedding_width_is_a_dimension_violation() {
        let report = validate_dataset(&[record(0.5, 3)], &manifest(4));
        assert_eq!(
            report.violations,
            vec![(0, Violation::Dimension { expected: 4, found: 3 })]
        );
    }

    #[test]
    fn pool_rejects_duplicates_and_bad_cmax() {
        assert!(ModelPool::new(vec!["a".into(), "a".into()], 1.0).is_err());
        assert!(ModelPool::new(vec!["a".into()], 0.0).is_err());
        let p = ModelPool::new(vec!["a".into()], 1.0).unwrap().with_model("b").unwrap();
        assert_eq!(p.index_of("b"), Some(1));
    }

    #[test]
    fn validation_is_idempotent() {
        let recs = vec![record(-0.1, 2), record(0.5, 4), record(2.0, 4)];
        let m = manifest(4);
        assert_eq!(validate_dataset(&recs, &m), validate_dataset(&recs, &m));
    }
}

//! Heterogeneous client partitioning.
//!
//! Query heterogeneity: for every task label, a Dirichlet(`alpha_query`) draw
//! over clients gives that task's per-client proportions and each query of
//! the task goes to a client sampled from them.
//!
//! Logging heterogeneity: every client draws its own Dirichlet(`alpha_model`)
//! distribution over models and each of its training queries is logged on a
//! single model sampled from it. Test queries keep their full evaluations.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, FullEvaluation, TaskLabeled};
use crate::error::{Error, Result};
use crate::numeric::{derive_seed, round_half_up, seeded_rng};

const STREAM_QUERIES: u64 = 1;
const STREAM_MODELS: u64 = 2;
const STREAM_SPLIT: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartitionConfig {
    pub n_clients: usize,
    pub alpha_query: f64,
    pub alpha_model: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for PartitionConfig {
    fn default() -> Self {
        Self {
            n_clients: 10,
            alpha_query: 0.6,
            alpha_model: 0.45,
            train_fraction: 0.75,
            seed: 0,
        }
    }
}

impl PartitionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(Error::config("partition.n_clients", "must be at least 1"));
        }
        if !(self.alpha_query > 0.0 && self.alpha_query.is_finite()) {
            return Err(Error::config("partition.alpha_query", "must be positive"));
        }
        if !(self.alpha_model > 0.0 && self.alpha_model.is_finite()) {
            return Err(Error::config("partition.alpha_model", "must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("partition.train_fraction", "must lie in (0,1)"));
        }
        Ok(())
    }
}

/// Symmetric Dirichlet draw via normalized Gamma variates.
///
/// Works in log space so that very small concentrations, whose Gamma draws
/// underflow to zero, still give a proper point on the simplex: for
/// `alpha < 1`, `Gamma(alpha) = Gamma(alpha + 1) * U^(1/alpha)`.
pub fn sample_dirichlet<R: Rng>(alpha: f64, k: usize, rng: &mut R) -> Vec<f64> {
    assert!(alpha > 0.0, "Dirichlet concentration must be positive");
    if k == 1 {
        return vec![1.0];
    }
    let shape = if alpha < 1.0 { alpha + 1.0 } else { alpha };
    let gamma = Gamma::new(shape, 1.0).expect("valid gamma shape");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            if alpha < 1.0 {
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                g.ln() + u.ln() / alpha
            } else {
                g.ln()
            }
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Samples an index from a probability vector.
pub fn sample_categorical<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        cum += p;
        if u < cum {
            return i;
        }
    }
    last_positive
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryPartition {
    /// Corpus indices per client, ascending.
    pub clients: Vec<Vec<usize>>,
    /// `(task label, per-client proportions)` in order of first appearance.
    pub task_proportions: Vec<(String, Vec<f64>)>,
}

impl QueryPartition {
    pub fn empty_clients(&self) -> Vec<usize> {
        self.clients
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_empty())
            .map(|(i, _)| i)
            .collect()
    }
}

/// Splits items across clients with a per-task Dirichlet draw.
pub fn partition_queries<T: TaskLabeled>(items: &[T], n_clients: usize, alpha_query: f64, seed: u64) -> Result<QueryPartition> {
    if n_clients == 0 {
        return Err(Error::config("n_clients", "must be at least 1"));
    }
    if !(alpha_query > 0.0) {
        return Err(Error::config("alpha_query", "must be positive"));
    }
    if items.len() < n_clients {
        return Err(Error::InvalidInput(format!(
            "{} records cannot cover {} clients",
            items.len(),
            n_clients
        )));
    }
    let mut task_ids: HashMap<&str, usize> = HashMap::new();
    let mut task_names: Vec<String> = Vec::new();
    let labels: Vec<usize> = items
        .iter()
        .map(|it| {
            let name = it.task().unwrap_or("");
            *task_ids.entry(name).or_insert_with(|| {
                task_names.push(name.to_string());
                task_names.len() - 1
            })
        })
        .collect();

    let mut rng = seeded_rng(derive_seed(seed, &[STREAM_QUERIES]));
    let proportions: Vec<Vec<f64>> = task_names
        .iter()
        .map(|_| sample_dirichlet(alpha_query, n_clients, &mut rng))
        .collect();
    let mut clients = vec![Vec::new(); n_clients];
    for (i, &t) in labels.iter().enumerate() {
        clients[sample_categorical(&proportions[t], &mut rng)].push(i);
    }
    let partition = QueryPartition {
        clients,
        task_proportions: task_names.into_iter().zip(proportions).collect(),
    };
    for c in partition.empty_clients() {
        log::warn!("client {c} received no records");
    }
    Ok(partition)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoggedModels {
    /// Logged model per input query, in input order.
    pub models: Vec<usize>,
    /// The client's model distribution.
    pub proportions: Vec<f64>,
}

/// Draws a client's distribution over the first `n_models` models and logs
/// each query on one model sampled from it.
pub fn assign_logged_models(queries: &[&FullEvaluation], n_models: usize, alpha_model: f64, seed: u64) -> Result<LoggedModels> {
    if n_models == 0 {
        return Err(Error::InvalidInput("model pool is empty".into()));
    }
    if let Some(q) = queries.iter().find(|q| q.n_models() < n_models) {
        return Err(Error::MissingGroundTruth { model: q.n_models() });
    }
    let mut rng = seeded_rng(seed);
    let proportions = sample_dirichlet(alpha_model, n_models, &mut rng);
    let models = queries
        .iter()
        .map(|_| sample_categorical(&proportions, &mut rng))
        .collect();
    Ok(LoggedModels { models, proportions })
}

/// Shuffles `0..n` and keeps the first `round(train_fraction * n)` indices
/// as the training split.
pub fn split_train_test(n: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config("train_fraction", "must lie in (0,1)"));
    }
    if n < 2 {
        log::warn!("split of {n} records leaves the test set empty");
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seeded_rng(seed);
    rand::seq::SliceRandom::shuffle(idx.as_mut_slice(), &mut rng);
    let n_train = round_half_up(train_fraction * n as f64).min(n);
    let test = idx.split_off(n_train);
    Ok((idx, test))
}

/// Replayable description of a partition in terms of corpus row indices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub clients: Vec<ClientAssignment>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientAssignment {
    /// `(corpus row, logged model)`.
    pub train: Vec<(usize, usize)>,
    pub test: Vec<usize>,
}

impl PartitionManifest {
    /// Materializes client datasets from a fully evaluated corpus.
    pub fn apply(&self, corpus: &[FullEvaluation]) -> Result<Vec<ClientDataset>> {
        let fetch = |row: usize| {
            corpus
                .get(row)
                .ok_or_else(|| Error::InvalidInput(format!("manifest row {row} outside corpus of {}", corpus.len())))
        };
        self.clients
            .iter()
            .enumerate()
            .map(|(client_id, a)| {
                let train = a
                    .train
                    .iter()
                    .map(|&(row, m)| fetch(row)?.log(m))
                    .collect::<Result<Vec<_>>>()?;
                let test = a
                    .test
                    .iter()
                    .map(|&row| fetch(row).cloned())
                    .collect::<Result<Vec<_>>>()?;
                Ok(ClientDataset { client_id, train, test })
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("client,row,split,model\n");
        for (c, a) in self.clients.iter().enumerate() {
            for &(row, m) in &a.train {
                let _ = writeln!(out, "{c},{row},train,{m}");
            }
            for &row in &a.test {
                let _ = writeln!(out, "{c},{row},test,");
            }
        }
        out
    }

    /// Parses the CSV form. `n_clients` keeps trailing empty clients that
    /// have no rows in the file.
    pub fn from_csv(text: &str, n_clients: usize) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let mut clients: Vec<ClientAssignment> = vec![ClientAssignment::default(); n_clients];
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row_no = i + 2;
            let num = |j: usize, col: &str| -> Result<usize> {
                rec.get(j).unwrap_or("").trim().parse::<usize>().map_err(|e| Error::Parse {
                    row: row_no,
                    column: col.into(),
                    message: e.to_string(),
                })
            };
            let client = num(0, "client")?;
            let row = num(1, "row")?;
            if client >= clients.len() {
                clients.resize(client + 1, ClientAssignment::default());
            }
            match rec.get(2).map(str::trim) {
                Some("train") => clients[client].train.push((row, num(3, "model")?)),
                Some("test") => clients[client].test.push(row),
                other => {
                    return Err(Error::Parse {
                        row: row_no,
                        column: "split".into(),
                        message: format!("unknown split {other:?}"),
                    })
                }
            }
        }
        Ok(Self { clients })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, n_clients: usize) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, n_clients)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientPartition {
    pub clients: Vec<ClientDataset>,
    pub config: PartitionConfig,
    pub manifest: PartitionManifest,
    /// Per-client model logging distributions.
    pub model_proportions: Vec<Vec<f64>>,
}

/// Full partition pipeline: Dirichlet query split, per-client train/test
/// split, then single-model logging of training queries over the first
/// `n_logged_models` models of the pool.
pub fn partition_corpus(corpus: &[FullEvaluation], n_logged_models: usize, config: &PartitionConfig) -> Result<ClientPartition> {
    config.validate()?;
    let queries = partition_queries(corpus, config.n_clients, config.alpha_query, config.seed)?;
    let mut assignments = Vec::with_capacity(config.n_clients);
    let mut model_proportions = Vec::with_capacity(config.n_clients);
    for (c, rows) in queries.clients.iter().enumerate() {
        let (train_pos, test_pos) =
            split_train_test(rows.len(), config.train_fraction, derive_seed(config.seed, &[STREAM_SPLIT, c as u64]))?;
        let train_rows: Vec<usize> = train_pos.iter().map(|&p| rows[p]).collect();
        let train_queries: Vec<&FullEvaluation> = train_rows.iter().map(|&r| &corpus[r]).collect();
        let logged = assign_logged_models(
            &train_queries,
            n_logged_models,
            config.alpha_model,
            derive_seed(config.seed, &[STREAM_MODELS, c as u64]),
        )?;
        assignments.push(ClientAssignment {
            train: train_rows.into_iter().zip(logged.models).collect(),
            test: test_pos.iter().map(|&p| rows[p]).collect(),
        });
        model_proportions.push(logged.proportions);
    }
    let manifest = PartitionManifest { clients: assignments };
    let clients = manifest.apply(corpus)?;
    Ok(ClientPartition {
        clients,
        config: config.clone(),
        manifest,
        model_proportions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(n: usize, tasks: usize) -> Vec<FullEvaluation> {
        (0..n)
            .map(|i| FullEvaluation {
                embedding: vec![i as f64],
                task: Some(format!("t{}", i % tasks)),
                accuracy: vec![1.0, 0.0, 0.5],
                cost: vec![0.1, 0.2, 0.3],
            })
            .collect()
    }

    #[test]
    fn dirichlet_sums_to_one_for_tiny_alpha() {
        let mut rng = seeded_rng(3);
        for alpha in [1e-3, 0.03, 0.45, 1.0, 5.0, 1e6] {
            let p = sample_dirichlet(alpha, 10, &mut rng);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }

    #[test]
    fn huge_alpha_splits_evenly() {
        let items = corpus(1000, 1);
        let part = partition_queries(&items, 2, 1e6, 11).unwrap();
        let n0 = part.clients[0].len() as f64;
        // binomial(1000, 0.5): sd = 15.8
        assert!((n0 - 500.0).abs() < 3.0 * 15.82);
    }

    #[test]
    fn one_client_takes_everything() {
        let items = corpus(37, 3);
        let part = partition_queries(&items, 1, 0.5, 1).unwrap();
        assert_eq!(part.clients[0], (0..37).collect::<Vec<_>>());
    }

    #[test]
    fn fewer_records_than_clients_is_rejected() {
        assert!(partition_queries(&corpus(3, 1), 5, 1.0, 0).is_err());
    }

    #[test]
    fn split_sizes() {
        let (tr, te) = split_train_test(100, 0.75, 4).unwrap();
        assert_eq!((tr.len(), te.len()), (75, 25));
        let (tr, te) = split_train_test(2, 0.5, 4).unwrap();
        assert_eq!((tr.len(), te.len()), (1, 1));
        assert_eq!(split_train_test(100, 0.75, 4).unwrap(), split_train_test(100, 0.75, 4).unwrap());
        assert!(split_train_test(10, 1.0, 0).is_err());
    }

    #[test]
    fn single_model_pool_logs_model_zero() {
        let items = corpus(20, 2);
        let refs: Vec<&FullEvaluation> = items.iter().collect();
        let logged = assign_logged_models(&refs, 1, 0.3, 9).unwrap();
        assert!(logged.models.iter().all(|&m| m == 0));
    }

    #[test]
    fn logging_beyond_evaluated_models_fails() {
        let items = corpus(4, 1);
        let refs: Vec<&FullEvaluation> = items.iter().collect();
        assert!(matches!(
            assign_logged_models(&refs, 5, 1.0, 0),
            Err(Error::MissingGroundTruth { .. })
        ));
    }

    #[test]
    fn manifest_csv_round_trip_replays_partition() {
        let items = corpus(200, 4);
        let cfg = PartitionConfig { n_clients: 4, seed: 5, ..Default::default() };
        let part = partition_corpus(&items, 3, &cfg).unwrap();
        let parsed = PartitionManifest::from_csv(&part.manifest.to_csv(), 4).unwrap();
        assert_eq!(parsed, part.manifest);
        assert_eq!(parsed.apply(&items).unwrap(), part.clients);
    }

    #[test]
    fn tiny_alpha_concentrates_tasks() {
        // With more tasks than about half the clients, clients collect several
        // dominant tasks and the share drops for reasons unrelated to alpha.
        let items = corpus(2000, 4);
        for seed in 0..20 {
            let part = partition_queries(&items, 10, 0.03, seed).unwrap();
            let shares: Vec<f64> = part
                .clients
                .iter()
                .filter(|c| !c.is_empty())
                .map(|c| {
                    let mut hist = [0usize; 4];
                    for &i in c {
                        hist[i % 4] += 1;
                    }
                    *hist.iter().max().unwrap() as f64 / c.len() as f64
                })
                .collect();
            let concentrated = shares.iter().filter(|&&s| s >= 0.8).count();
            assert!(2 * concentrated >= shares.len(), "seed {seed}: {shares:?}");
        }
    }

    #[test]
    fn huge_alpha_model_logging_is_uniform() {
        let items: Vec<FullEvaluation> = (0..5000)
            .map(|i| FullEvaluation {
                embedding: vec![i as f64],
                task: None,
                accuracy: vec![1.0; 5],
                cost: vec![0.1; 5],
            })
            .collect();
        let refs: Vec<&FullEvaluation> = items.iter().collect();
        let logged = assign_logged_models(&refs, 5, 1e6, 3).unwrap();
        let mut hist = [0.0f64; 5];
        for &m in &logged.models {
            hist[m] += 1.0;
        }
        let expected = 1000.0;
        let chi2: f64 = hist.iter().map(|o| (o - expected).powi(2) / expected).sum();
        // 1% critical value of chi-squared with 4 degrees of freedom
        assert!(chi2 < 13.277, "{chi2}");
    }

    #[test]
    fn moderate_alpha_leaves_near_zero_model_cells() {
        let items: Vec<FullEvaluation> = (0..4000)
            .map(|i| FullEvaluation {
                embedding: vec![i as f64],
                task: Some(format!("t{}", i % 5)),
                accuracy: vec![1.0; 11],
                cost: vec![0.1; 11],
            })
            .collect();
        let cfg = PartitionConfig { n_clients: 10, alpha_model: 0.45, seed: 2, ..Default::default() };
        let part = partition_corpus(&items, 11, &cfg).unwrap();
        let near_zero: Vec<usize> = part
            .model_proportions
            .iter()
            .map(|p| p.iter().filter(|&&v| v < 0.01).count())
            .collect();
        assert_eq!(near_zero.len(), 10);
        assert!(near_zero.iter().sum::<usize>() >= 20, "{near_zero:?}");
        assert!(near_zero.iter().filter(|&&n| n > 0).count() >= 8, "{near_zero:?}");
    }
}

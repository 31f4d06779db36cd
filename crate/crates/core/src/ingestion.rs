//! Corpus loading and synthetic corpus generation.
//!
//! Corpus files are delimited text with the header
//! `task,model,accuracy,cost,e0,e1,...,e{d-1}`, one logged evaluation per row.
//! A fully evaluated corpus stores the `M` evaluations of a query as `M`
//! consecutive rows sharing the same task and embedding.
//!
//! Synthetic corpora come from a [`SyntheticOracle`]: queries are drawn from
//! a Gaussian mixture (one component per task), true accuracy is
//! `logistic(w_m . x + b_m)` and cost is a per-model base cost plus Gaussian
//! noise clipped to `[0, c_max]`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, EvaluationRecord, FullEvaluation, ModelPool};
use crate::error::{Error, Result};
use crate::numeric::{normal_cdf, normal_pdf, seeded_rng, sigmoid};

const FIXED_COLUMNS: [&str; 4] = ["task", "model", "accuracy", "cost"];

/// Format descriptor for corpus files.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorpusFormat {
    pub delimiter: u8,
}

impl Default for CorpusFormat {
    fn default() -> Self {
        Self { delimiter: b',' }
    }
}

fn parse_f64(field: &str, row: usize, column: &str) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|e| Error::Parse {
        row,
        column: column.to_string(),
        message: format!("`{field}` is not a number ({e})"),
    })
}

fn manifest_for(records: &[EvaluationRecord], d_emb: usize, models: Vec<String>) -> Result<DatasetManifest> {
    let max_cost = records.iter().map(|r| r.cost).fold(0.0_f64, f64::max);
    // An all-zero-cost corpus keeps a unit normalizer so c_max stays positive.
    let cost_normalizer = if max_cost > 0.0 { max_cost } else { 1.0 };
    Ok(DatasetManifest {
        d_emb,
        model_pool: ModelPool::new(models, cost_normalizer)?,
        n_records: records.len(),
        cost_normalizer,
    })
}

/// Parses a corpus from any reader. Rows are numbered from 1 with the
/// header as row 1. Model indices follow the order of first appearance.
pub fn read_corpus<R: Read>(reader: R, format: CorpusFormat) -> Result<(Vec<EvaluationRecord>, DatasetManifest)> {
    read_corpus_inner(reader, format, None)
}

/// Like [`read_corpus`], but model names index into a known pool, so a
/// dataset written with that pool reads back with identical indices.
pub fn read_corpus_in_pool<R: Read>(reader: R, format: CorpusFormat, pool: &ModelPool) -> Result<(Vec<EvaluationRecord>, DatasetManifest)> {
    read_corpus_inner(reader, format, Some(pool))
}

fn read_corpus_inner<R: Read>(reader: R, format: CorpusFormat, pool: Option<&ModelPool>) -> Result<(Vec<EvaluationRecord>, DatasetManifest)> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(format.delimiter)
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    if names.len() < FIXED_COLUMNS.len() || names[..4] != FIXED_COLUMNS {
        return Err(Error::Parse {
            row: 1,
            column: names.first().unwrap_or(&"").to_string(),
            message: format!("header must start with {}", FIXED_COLUMNS.join(",")),
        });
    }
    let d_emb = names.len() - FIXED_COLUMNS.len();
    for (j, name) in names[4..].iter().enumerate() {
        if *name != format!("e{j}") {
            return Err(Error::Parse {
                row: 1,
                column: name.to_string(),
                message: format!("expected embedding column `e{j}`"),
            });
        }
    }

    let mut models: Vec<String> = pool.map(|p| p.names().to_vec()).unwrap_or_default();
    let mut records = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row_no = i + 2;
        let row = row?;
        if row.len() != names.len() {
            return Err(Error::Parse {
                row: row_no,
                column: "e*".into(),
                message: format!(
                    "inconsistent embedding width: {} fields, header has {}",
                    row.len(),
                    names.len()
                ),
            });
        }
        let task = row[0].trim();
        let model_name = row[1].trim();
        let model = match models.iter().position(|m| m == model_name) {
            Some(idx) => idx,
            None if pool.is_some() => {
                return Err(Error::Parse {
                    row: row_no,
                    column: "model".into(),
                    message: format!("`{model_name}` is not in the model pool"),
                })
            }
            None => {
                models.push(model_name.to_string());
                models.len() - 1
            }
        };
        let accuracy = parse_f64(&row[2], row_no, "accuracy")?;
        let cost = parse_f64(&row[3], row_no, "cost")?;
        let embedding = (0..d_emb)
            .map(|j| parse_f64(&row[4 + j], row_no, names[4 + j]))
            .collect::<Result<Vec<_>>>()?;
        records.push(EvaluationRecord {
            embedding,
            model,
            accuracy,
            cost,
            task: (!task.is_empty()).then(|| task.to_string()),
        });
    }
    if models.is_empty() {
        models.push("model-0".into());
    }
    let manifest = manifest_for(&records, d_emb, models)?;
    Ok((records, manifest))
}

/// Loads a corpus file. The manifest's `d_emb` comes from the header and its
/// cost normalizer is the largest observed cost.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<(Vec<EvaluationRecord>, DatasetManifest)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_corpus(file, format)
}

pub fn write_corpus<W: Write>(
    writer: W,
    records: &[EvaluationRecord],
    pool: &ModelPool,
    d_emb: usize,
    format: CorpusFormat,
) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new()
        .delimiter(format.delimiter)
        .from_writer(writer);
    let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.extend((0..d_emb).map(|j| format!("e{j}")));
    wtr.write_record(&header)?;
    let mut row = Vec::with_capacity(header.len());
    for r in records {
        row.clear();
        row.push(r.task.clone().unwrap_or_default());
        let name = pool
            .name(r.model)
            .ok_or(Error::MissingGroundTruth { model: r.model })?;
        row.push(name.to_string());
        row.push(r.accuracy.to_string());
        row.push(r.cost.to_string());
        row.extend(r.embedding.iter().map(f64::to_string));
        wtr.write_record(&row)?;
    }
    wtr.flush().map_err(|e| Error::io("<corpus writer>", e))?;
    Ok(())
}

pub fn save_corpus(path: &Path, records: &[EvaluationRecord], pool: &ModelPool, d_emb: usize) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_corpus(std::io::BufWriter::new(file), records, pool, d_emb, CorpusFormat::default())
}

/// Groups a fully evaluated corpus (every query logged on every model as
/// consecutive rows) into per-query evaluations.
pub fn group_full_evaluations(records: &[EvaluationRecord], n_models: usize) -> Result<Vec<FullEvaluation>> {
    let mut out = Vec::with_capacity(records.len() / n_models.max(1));
    let mut start = 0;
    while start < records.len() {
        let head = &records[start];
        let mut end = start + 1;
        while end < records.len()
            && records[end].embedding == head.embedding
            && records[end].task == head.task
        {
            end += 1;
        }
        let group = &records[start..end];
        let mut accuracy = vec![f64::NAN; n_models];
        let mut cost = vec![f64::NAN; n_models];
        for (offset, r) in group.iter().enumerate() {
            if r.model >= n_models || !accuracy[r.model].is_nan() {
                return Err(Error::Parse {
                    row: start + offset + 2,
                    column: "model".into(),
                    message: "query must be evaluated on each model exactly once".into(),
                });
            }
            accuracy[r.model] = r.accuracy;
            cost[r.model] = r.cost;
        }
        if let Some(missing) = accuracy.iter().position(|a| a.is_nan()) {
            return Err(Error::Parse {
                row: start + 2,
                column: "model".into(),
                message: format!("query is missing an evaluation for model {missing}"),
            });
        }
        out.push(FullEvaluation {
            embedding: head.embedding.clone(),
            task: head.task.clone(),
            accuracy,
            cost,
        });
        start = end;
    }
    Ok(out)
}

pub fn load_full_corpus(path: &Path, format: CorpusFormat) -> Result<(Vec<FullEvaluation>, DatasetManifest)> {
    let (records, manifest) = load_corpus(path, format)?;
    let full = group_full_evaluations(&records, manifest.model_pool.len())?;
    Ok((full, manifest))
}

/// Writes a fully evaluated corpus as `M` consecutive rows per query.
pub fn save_full_corpus(path: &Path, corpus: &[FullEvaluation], pool: &ModelPool, d_emb: usize) -> Result<()> {
    let records: Vec<EvaluationRecord> = corpus.iter().flat_map(FullEvaluation::records).collect();
    save_corpus(path, &records, pool, d_emb)
}

/// Manifest for an in-memory fully evaluated corpus.
pub fn full_corpus_manifest(corpus: &[FullEvaluation], model_names: Vec<String>) -> Result<DatasetManifest> {
    let d_emb = corpus.first().map_or(0, |q| q.embedding.len());
    let max_cost = corpus
        .iter()
        .flat_map(|q| q.cost.iter().copied())
        .fold(0.0_f64, f64::max);
    let cost_normalizer = if max_cost > 0.0 { max_cost } else { 1.0 };
    Ok(DatasetManifest {
        d_emb,
        model_pool: ModelPool::new(model_names, cost_normalizer)?,
        n_records: corpus.len() * corpus.first().map_or(0, FullEvaluation::n_models),
        cost_normalizer,
    })
}

/// Ground-truth generator for synthetic corpora.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOracle {
    pub model_names: Vec<String>,
    /// Gaussian mixture means, one per task.
    pub centers: Vec<Vec<f64>>,
    /// Isotropic standard deviation of queries around their center.
    pub query_std: f64,
    pub accuracy_weights: Vec<Vec<f64>>,
    pub accuracy_bias: Vec<f64>,
    pub base_costs: Vec<f64>,
    pub cost_noise: f64,
    pub c_max: f64,
}

/// Knobs for [`SyntheticOracle::random`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub d_emb: usize,
    pub n_models: usize,
    pub n_tasks: usize,
    pub c_max: f64,
    /// Per-coordinate standard deviation of the task centers.
    pub center_scale: f64,
    pub query_std: f64,
    /// Standard deviation of `w_m . x` over queries: how strongly a model's
    /// skill varies across the embedding space.
    pub skill_scale: f64,
    /// Mean logit of the cheapest and of the most expensive model.
    pub quality_range: (f64, f64),
    /// Cheapest and most expensive base cost as fractions of `c_max`.
    pub cost_range: (f64, f64),
    /// Cost noise standard deviation as a fraction of `c_max`.
    pub cost_noise: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            d_emb: 16,
            n_models: 6,
            n_tasks: 8,
            c_max: 1.0,
            center_scale: 1.0,
            query_std: 0.35,
            skill_scale: 1.5,
            quality_range: (-0.5, 1.5),
            cost_range: (0.02, 0.8),
            cost_noise: 0.005,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_emb == 0 {
            return Err(Error::config("d_emb", "must be at least 1"));
        }
        if self.n_models == 0 {
            return Err(Error::config("n_models", "must be at least 1"));
        }
        if self.n_tasks == 0 {
            return Err(Error::config("n_tasks", "must be at least 1"));
        }
        if !(self.c_max > 0.0) {
            return Err(Error::config("c_max", "must be positive"));
        }
        let (lo, hi) = self.cost_range;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return Err(Error::config("cost_range", "must satisfy 0 < lo <= hi <= 1"));
        }
        if self.query_std < 0.0 || self.cost_noise < 0.0 || self.center_scale < 0.0 {
            return Err(Error::config("query_std", "scales must be nonnegative"));
        }
        Ok(())
    }
}

impl SyntheticOracle {
    /// Builds a random oracle. Models are ordered by increasing base cost
    /// (geometrically spaced) and increasing mean accuracy; each model's
    /// accuracy additionally varies smoothly across the embedding space so
    /// that the best model differs between regions.
    pub fn random(config: &OracleConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let d = config.d_emb;
        let centers: Vec<Vec<f64>> = (0..config.n_tasks)
            .map(|_| {
                (0..d)
                    .map(|_| config.center_scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let spread = (config.center_scale.powi(2) + config.query_std.powi(2)) * d as f64;
        let w_std = if spread > 0.0 { config.skill_scale / spread.sqrt() } else { 0.0 };
        let m = config.n_models;
        let frac = |i: usize| if m == 1 { 1.0 } else { i as f64 / (m - 1) as f64 };
        let (q_lo, q_hi) = config.quality_range;
        let (c_lo, c_hi) = config.cost_range;
        let accuracy_weights = (0..m)
            .map(|_| (0..d).map(|_| w_std * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let accuracy_bias = (0..m).map(|i| q_lo + (q_hi - q_lo) * frac(i)).collect();
        let base_costs = (0..m)
            .map(|i| config.c_max * (c_lo.ln() + (c_hi.ln() - c_lo.ln()) * frac(i)).exp())
            .collect();
        Ok(Self {
            model_names: (0..m).map(|i| format!("model-{i}")).collect(),
            centers,
            query_std: config.query_std,
            accuracy_weights,
            accuracy_bias,
            base_costs,
            cost_noise: config.cost_noise * config.c_max,
            c_max: config.c_max,
        })
    }

    pub fn n_models(&self) -> usize {
        self.base_costs.len()
    }

    pub fn d_emb(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    pub fn model_pool(&self) -> Result<ModelPool> {
        ModelPool::new(self.model_names.clone(), self.c_max)
    }

    /// Appends a model and returns its index.
    pub fn push_model(&mut self, name: impl Into<String>, weights: Vec<f64>, bias: f64, base_cost: f64) -> usize {
        self.model_names.push(name.into());
        self.accuracy_weights.push(weights);
        self.accuracy_bias.push(bias);
        self.base_costs.push(base_cost);
        self.n_models() - 1
    }

    pub fn true_accuracy(&self, x: &[f64], model: usize) -> f64 {
        let z: f64 = self.accuracy_weights[model]
            .iter()
            .zip(x)
            .map(|(w, v)| w * v)
            .sum::<f64>()
            + self.accuracy_bias[model];
        sigmoid(z)
    }

    /// Exact mean of `clip(N(base, noise^2), 0, c_max)`.
    pub fn true_cost(&self, model: usize) -> f64 {
        let mu = self.base_costs[model];
        let sigma = self.cost_noise;
        let (lo, hi) = (0.0, self.c_max);
        if sigma <= 0.0 {
            return mu.clamp(lo, hi);
        }
        let a = (lo - mu) / sigma;
        let b = (hi - mu) / sigma;
        let (fa, fb) = (normal_cdf(a), normal_cdf(b));
        lo * fa + hi * (1.0 - fb) + mu * (fb - fa) + sigma * (normal_pdf(a) - normal_pdf(b))
    }

    pub fn utility(&self, x: &[f64], model: usize, lambda: f64) -> f64 {
        self.true_accuracy(x, model) - lambda * self.true_cost(model)
    }

    fn sample_query<R: Rng>(&self, task: usize, rng: &mut R) -> Vec<f64> {
        self.centers[task]
            .iter()
            .map(|c| c + self.query_std * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Evaluates `x` on every model: Bernoulli accuracy draws and clipped
    /// noisy costs.
    pub fn evaluate<R: Rng>(&self, x: Vec<f64>, task: Option<String>, rng: &mut R) -> FullEvaluation {
        let m = self.n_models();
        let mut accuracy = Vec::with_capacity(m);
        let mut cost = Vec::with_capacity(m);
        for model in 0..m {
            let p = self.true_accuracy(&x, model);
            accuracy.push(if rng.random::<f64>() < p { 1.0 } else { 0.0 });
            let noise = if self.cost_noise > 0.0 {
                Normal::new(0.0, self.cost_noise).expect("positive std").sample(rng)
            } else {
                0.0
            };
            cost.push((self.base_costs[model] + noise).clamp(0.0, self.c_max));
        }
        FullEvaluation {
            embedding: x,
            task,
            accuracy,
            cost,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Draws `n_queries` queries from the oracle's mixture and evaluates each on
/// every model. Queries come from the first `n_tasks` components, chosen
/// uniformly; a query's task label is the index of its component.
/// Single-model logging happens later, in [`crate::partition`].
pub fn generate_synthetic(
    oracle: &SyntheticOracle,
    n_queries: usize,
    n_tasks: usize,
    seed: u64,
) -> (Vec<FullEvaluation>, SyntheticOracle) {
    let n_tasks = n_tasks.clamp(1, oracle.centers.len().max(1));
    let mut rng = seeded_rng(seed);
    let corpus = (0..n_queries)
        .map(|_| {
            let task = rng.random_range(0..n_tasks);
            let x = oracle.sample_query(task, &mut rng);
            oracle.evaluate(x, Some(format!("task-{task}")), &mut rng)
        })
        .collect();
    (corpus, oracle.clone())
}

/// The optimal model under the oracle's true utilities. Ties go to the
/// cheaper model, then to the lower index.
pub fn oracle_best_model(oracle: &SyntheticOracle, x: &[f64], lambda: f64) -> usize {
    let utilities: Vec<Option<f64>> = (0..oracle.n_models())
        .map(|m| Some(oracle.utility(x, m, lambda)))
        .collect();
    let costs: Vec<Option<f64>> = (0..oracle.n_models()).map(|m| Some(oracle.true_cost(m))).collect();
    crate::eval::route(&utilities, &costs).expect("oracle covers every model")
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = "task,model,accuracy,cost,e0,e1,e2,e3\n\
        math,gpt,1,0.37,0.1,0.2,0.3,0.4\n\
        math,llama,0,0.02,0.1,0.2,0.3,0.4\n\
        code,gpt,0.5,0.3,1,2,3,4\n";

    #[test]
    fn three_rows_with_four_dims() {
        let (recs, manifest) = read_corpus(SAMPLE.as_bytes(), CorpusFormat::default()).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(manifest.d_emb, 4);
        assert_eq!(manifest.cost_normalizer, 0.37);
        assert_eq!(manifest.model_pool.names(), ["gpt", "llama"]);
        assert_eq!(recs[1].model, 1);
        assert_eq!(recs[2].task.as_deref(), Some("code"));
    }

    #[test]
    fn non_numeric_cost_names_row_and_column() {
        let bad = "task,model,accuracy,cost,e0\nt,m,1,abc,0.5\n";
        match read_corpus(bad.as_bytes(), CorpusFormat::default()) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "cost");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ragged_row_is_a_width_error() {
        let bad = "task,model,accuracy,cost,e0,e1\nt,m,1,0.1,0.5\n";
        assert!(matches!(
            read_corpus(bad.as_bytes(), CorpusFormat::default()),
            Err(Error::Parse { row: 2, .. })
        ));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let (recs, manifest) = read_corpus(SAMPLE.as_bytes(), CorpusFormat::default()).unwrap();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &recs, &manifest.model_pool, 4, CorpusFormat::default()).unwrap();
        let (again, _) = read_corpus(buf.as_slice(), CorpusFormat::default()).unwrap();
        assert_eq!(recs, again);
    }

    #[test]
    fn semicolon_delimiter() {
        let text = SAMPLE.replace(',', ";");
        let (recs, _) = read_corpus(text.as_bytes(), CorpusFormat { delimiter: b';' }).unwrap();
        assert_eq!(recs.len(), 3);
    }

    #[test]
    fn grouping_requires_every_model() {
        let (recs, manifest) = read_corpus(SAMPLE.as_bytes(), CorpusFormat::default()).unwrap();
        let err = group_full_evaluations(&recs, manifest.model_pool.len()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 4, .. }));
        let full = group_full_evaluations(&recs[..2], 2).unwrap();
        assert_eq!(full.len(), 1);
        assert_eq!(full[0].cost, vec![0.37, 0.02]);
    }

    #[test]
    fn clipped_cost_mean_matches_monte_carlo() {
        let mut oracle = SyntheticOracle::random(&OracleConfig::default(), 1).unwrap();
        oracle.base_costs[0] = 0.01;
        oracle.cost_noise = 0.02;
        let mut rng = seeded_rng(5);
        let n = 200_000;
        let mean: f64 = (0..n)
            .map(|_| oracle.evaluate(vec![0.0; 16], None, &mut rng).cost[0])
            .sum::<f64>()
            / n as f64;
        // clipped sample std is below 0.02
        assert!((mean - oracle.true_cost(0)).abs() < 5.0 * 0.02 / (n as f64).sqrt());
        assert!(oracle.true_cost(0) > 0.01);
    }

    fn small_oracle(n_models: usize, seed: u64) -> SyntheticOracle {
        let cfg = OracleConfig {
            d_emb: 4,
            n_models,
            n_tasks: 3,
            ..OracleConfig::default()
        };
        SyntheticOracle::random(&cfg, seed).unwrap()
    }

    #[test]
    fn same_seed_gives_bit_identical_corpora() {
        let oracle = small_oracle(3, 2);
        let a = generate_synthetic(&oracle, 300, 3, 17).0;
        let b = generate_synthetic(&oracle, 300, 3, 17).0;
        let bits = |c: &[FullEvaluation]| -> Vec<u64> {
            c.iter()
                .flat_map(|q| q.embedding.iter().chain(&q.accuracy).chain(&q.cost).map(|v| v.to_bits()))
                .collect()
        };
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&generate_synthetic(&oracle, 300, 3, 18).0));
    }

    #[test]
    fn always_correct_model_logs_only_ones() {
        let mut oracle = small_oracle(3, 4);
        oracle.accuracy_weights[0] = vec![0.0; 4];
        oracle.accuracy_bias[0] = 800.0;
        let (corpus, _) = generate_synthetic(&oracle, 600, 3, 1);
        let part = crate::partition::partition_corpus(&corpus, 3, &crate::partition::PartitionConfig::default()).unwrap();
        let logged: Vec<&EvaluationRecord> = part
            .clients
            .iter()
            .flat_map(|c| c.train.iter())
            .filter(|r| r.model == 0)
            .collect();
        assert!(!logged.is_empty());
        assert!(logged.iter().all(|r| r.accuracy == 1.0));
    }

    #[test]
    fn empirical_costs_sit_near_base_costs() {
        let mut oracle = small_oracle(2, 6);
        oracle.base_costs = vec![0.1, 0.9];
        oracle.cost_noise = 0.05;
        let n = 1000;
        let (corpus, _) = generate_synthetic(&oracle, n, 3, 8);
        for (m, base) in [0.1, 0.9].into_iter().enumerate() {
            let mean = corpus.iter().map(|q| q.cost[m]).sum::<f64>() / n as f64;
            assert!((mean - base).abs() < 3.0 * 0.05 / (n as f64).sqrt(), "model {m}: {mean}");
        }
    }

    #[test]
    fn oracle_best_model_limits_and_brute_force() {
        let oracle = small_oracle(3, 12);
        let mut rng = seeded_rng(3);
        for _ in 0..50 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let acc: Vec<f64> = (0..3).map(|m| oracle.true_accuracy(&x, m)).collect();
            let top = (0..3).max_by(|&a, &b| acc[a].total_cmp(&acc[b])).unwrap();
            assert_eq!(oracle_best_model(&oracle, &x, 0.0), top);
            assert_eq!(oracle_best_model(&oracle, &x, 1e9), 0);
            let lambda = rng.random_range(0.0..2.0);
            let u: Vec<f64> = (0..3).map(|m| acc[m] - lambda * oracle.true_cost(m)).collect();
            let brute = (0..3).max_by(|&a, &b| u[a].total_cmp(&u[b])).unwrap();
            assert_eq!(oracle_best_model(&oracle, &x, lambda), brute);
        }
    }
}

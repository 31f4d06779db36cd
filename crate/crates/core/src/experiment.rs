//! File-driven experiment pipelines.
//!
//! An [`ExperimentConfig`] (TOML) describes the corpus, the client
//! partition, both router families and which comparisons to run. Each stage
//! reads the artifacts of the previous ones from an output directory, so the
//! command-line subcommands compose; [`run_experiment`] runs them all.
//!
//! Every sub-seed is derived from the master seed, and parallel work is
//! collected in a fixed order, so artifact files are a pure function of the
//! configuration and corpus.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, EvaluationRecord, FullEvaluation};
use crate::error::{Error, Result};
use crate::eval::{estimate_table, suboptimality_table, sweep_table, Estimate, Estimator, FrontierCurve, LambdaGrid};
use crate::fedavg::{run_federated_training, run_local_training, FederationConfig, RoundTrace};
use crate::ingestion::{full_corpus_manifest, generate_synthetic, load_full_corpus, save_full_corpus, CorpusFormat, OracleConfig, SyntheticOracle};
use crate::kmeans::{build_federated_kmeans, build_pooled_kmeans, KmeansConfig, KmeansRouterState};
use crate::mlp::{MlpArchitecture, MlpCheckpoint, MlpRouter};
use crate::numeric::{derive_seed, round_half_up, seeded_rng};
use crate::partition::{partition_corpus, PartitionConfig, PartitionManifest};
use crate::personalization::{
    add_clients_kmeans, add_clients_mlp, add_model_kmeans, add_model_mlp, save_personalization_report, HeadTraining,
    PersonalizationWeights, PersonalizedEstimator,
};

const S_ORACLE: u64 = 1;
const S_DATA: u64 = 2;
const S_PARTITION: u64 = 3;
const S_FEDERATED: u64 = 4;
const S_LOCAL: u64 = 5;
const S_CENTRAL: u64 = 6;
const S_KMEANS: u64 = 7;
const S_CALIBRATION: u64 = 8;
const S_HEAD: u64 = 9;
const S_NEW_CLIENTS: u64 = 10;
const S_HOLDOUT: u64 = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouterFamily {
    Mlp,
    Kmeans,
    Both,
}

impl RouterFamily {
    pub fn mlp(self) -> bool {
        matches!(self, Self::Mlp | Self::Both)
    }

    pub fn kmeans(self) -> bool {
        matches!(self, Self::Kmeans | Self::Both)
    }
}

fn default_delimiter() -> char {
    ','
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic {
        n_queries: usize,
        #[serde(default)]
        oracle: OracleConfig,
    },
    /// Queries drawn from a saved oracle, e.g. a hand-built scenario.
    Oracle { path: PathBuf, n_queries: usize },
    /// A fully evaluated corpus: every query appears once per model.
    File {
        path: PathBuf,
        #[serde(default = "default_delimiter")]
        delimiter: char,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Synthetic {
            n_queries: 20_000,
            oracle: OracleConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModeFlags {
    pub local_baselines: bool,
    pub centralized: bool,
    pub personalization: bool,
    pub expand_models: bool,
    pub expand_clients: bool,
}

impl Default for ModeFlags {
    fn default() -> Self {
        Self {
            local_baselines: true,
            centralized: true,
            personalization: false,
            expand_models: false,
            expand_clients: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpansionConfig {
    /// The last `withheld_models` models of the pool are unseen during base
    /// training and added afterwards.
    pub withheld_models: usize,
    /// The last `new_clients` clients join after base training.
    pub new_clients: usize,
    /// Share of the pooled training prompts evaluated on each new model.
    pub calibration_fraction: f64,
    pub distillation_weight: f64,
    /// Rounds of continued training over the new clients.
    pub client_rounds: usize,
    pub head: HeadTraining,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            withheld_models: 1,
            new_clients: 3,
            calibration_fraction: 0.1,
            distillation_weight: 1.0,
            client_rounds: 20,
            head: HeadTraining::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PersonalizationConfig {
    /// Share of each client's training records held out for calibrating the
    /// blend, with the local router refitted on the rest. 0 calibrates on
    /// the very records both routers were trained on.
    pub calibration_holdout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub grid: LambdaGrid,
    /// Trade-off at which suboptimality is reported (synthetic data only).
    pub suboptimality_lambda: f64,
    /// Write a curve file for every (router, client) pair, not only the
    /// global ones.
    pub client_curves: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            grid: LambdaGrid::default(),
            suboptimality_lambda: 1.0,
            client_curves: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    /// Add wall-clock times to the round trace (makes it non-reproducible).
    pub wall_time: bool,
}

/// Complete description of an experiment. Seeds inside sub-configurations
/// are replaced by values derived from `seed`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub family: RouterFamily,
    pub data: DataSource,
    pub partition: PartitionConfig,
    pub federation: FederationConfig,
    /// `d_emb` and `n_models` are taken from the data.
    pub mlp: MlpArchitecture,
    pub kmeans: KmeansConfig,
    pub eval: EvalConfig,
    pub modes: ModeFlags,
    pub personalization: PersonalizationConfig,
    pub expansion: ExpansionConfig,
    pub output: OutputConfig,
}

impl Default for RouterFamily {
    fn default() -> Self {
        Self::Both
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// The frozen form with every default spelled out.
    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidInput(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        self.federation.validate()?;
        self.kmeans.validate()?;
        self.eval.grid.validate()?;
        let mut arch = self.mlp.clone();
        arch.d_emb = arch.d_emb.max(1);
        arch.n_models = arch.n_models.max(1);
        arch.validate()?;
        match &self.data {
            DataSource::Synthetic { n_queries, oracle } => {
                oracle.validate().map_err(|e| match e {
                    Error::InvalidConfig { field, message } => Error::config(format!("data.oracle.{field}"), message),
                    other => other,
                })?;
                if *n_queries < self.partition.n_clients {
                    return Err(Error::config("data.n_queries", "must be at least partition.n_clients"));
                }
            }
            DataSource::Oracle { path, n_queries } => {
                if path.as_os_str().is_empty() {
                    return Err(Error::config("data.path", "must not be empty"));
                }
                if *n_queries < self.partition.n_clients {
                    return Err(Error::config("data.n_queries", "must be at least partition.n_clients"));
                }
            }
            DataSource::File { path, delimiter } => {
                if !delimiter.is_ascii() {
                    return Err(Error::config("data.delimiter", "must be a single ASCII character"));
                }
                if path.as_os_str().is_empty() {
                    return Err(Error::config("data.path", "must not be empty"));
                }
            }
        }
        if !(self.eval.suboptimality_lambda >= 0.0) {
            return Err(Error::config("eval.suboptimality_lambda", "must be nonnegative"));
        }
        let x = &self.expansion;
        if self.modes.expand_models && x.withheld_models == 0 {
            return Err(Error::config("expansion.withheld_models", "must be at least 1 when expanding models"));
        }
        if self.modes.expand_clients && !(1..self.partition.n_clients).contains(&x.new_clients) {
            return Err(Error::config("expansion.new_clients", "must lie in [1, n_clients)"));
        }
        if !(x.calibration_fraction > 0.0 && x.calibration_fraction <= 1.0) {
            return Err(Error::config("expansion.calibration_fraction", "must lie in (0,1]"));
        }
        if !(x.distillation_weight >= 0.0 && x.distillation_weight.is_finite()) {
            return Err(Error::config("expansion.distillation_weight", "must be nonnegative"));
        }
        let h = self.personalization.calibration_holdout;
        if !(0.0..1.0).contains(&h) {
            return Err(Error::config("personalization.calibration_holdout", "must lie in [0,1)"));
        }
        if self.modes.personalization && !self.modes.local_baselines {
            return Err(Error::config("modes.personalization", "needs modes.local_baselines"));
        }
        Ok(())
    }

    fn partition_config(&self) -> PartitionConfig {
        PartitionConfig {
            seed: derive_seed(self.seed, &[S_PARTITION]),
            ..self.partition.clone()
        }
    }

    fn federation_config(&self, stream: u64) -> FederationConfig {
        FederationConfig {
            seed: derive_seed(self.seed, &[stream]),
            ..self.federation.clone()
        }
    }
}

/// Artifact file names inside an output directory.
pub mod files {
    pub const CONFIG: &str = "config.toml";
    pub const CORPUS: &str = "corpus.csv";
    pub const ORACLE: &str = "oracle.json";
    pub const PARTITION: &str = "partition.csv";
    pub const CHECKPOINTS: &str = "checkpoints";
    pub const CURVES: &str = "curves";
    pub const ROUND_TRACE: &str = "round_trace.csv";
    pub const AUC_SUMMARY: &str = "auc_summary.csv";
    pub const SUBOPTIMALITY: &str = "suboptimality.csv";
    pub const PERSONALIZATION_AUC: &str = "personalization_auc.csv";
    pub const EXPANSION_MODELS: &str = "expansion_models.csv";
    pub const EXPANSION_CLIENTS: &str = "expansion_clients.csv";
    pub const EXPANSION_TRACE: &str = "round_trace_expansion.csv";
}

/// Corpus, oracle and partition of an experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub corpus: Vec<FullEvaluation>,
    pub model_names: Vec<String>,
    pub cost_normalizer: f64,
    pub oracle: Option<SyntheticOracle>,
    pub manifest: PartitionManifest,
    pub clients: Vec<ClientDataset>,
    /// Models known during base training.
    pub n_base_models: usize,
    pub base_clients: Vec<usize>,
    pub new_clients: Vec<usize>,
}

impl PreparedData {
    pub fn d_emb(&self) -> usize {
        self.corpus.first().map_or(0, |q| q.embedding.len())
    }

    /// Every client's test queries, in client order.
    pub fn global_test(&self) -> Vec<FullEvaluation> {
        self.clients.iter().flat_map(|c| c.test.iter().cloned()).collect()
    }

    /// Start offset of each client's block inside [`Self::global_test`].
    fn test_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.clients
            .iter()
            .map(|c| {
                let o = acc;
                acc += c.test.len();
                o
            })
            .collect()
    }

    pub fn base(&self) -> Vec<ClientDataset> {
        self.base_clients.iter().map(|&i| self.clients[i].clone()).collect()
    }

    fn architecture(&self, cfg: &ExperimentConfig) -> MlpArchitecture {
        MlpArchitecture {
            d_emb: self.d_emb(),
            n_models: self.n_base_models,
            ..cfg.mlp.clone()
        }
    }
}

fn finish_prepared(
    cfg: &ExperimentConfig,
    corpus: Vec<FullEvaluation>,
    model_names: Vec<String>,
    oracle: Option<SyntheticOracle>,
    manifest: Option<PartitionManifest>,
) -> Result<PreparedData> {
    let m = model_names.len();
    let n_base_models = if cfg.modes.expand_models {
        if cfg.expansion.withheld_models >= m {
            return Err(Error::config("expansion.withheld_models", format!("must be below the pool size {m}")));
        }
        m - cfg.expansion.withheld_models
    } else {
        m
    };
    let manifest = match manifest {
        Some(man) => man,
        None => partition_corpus(&corpus, n_base_models, &cfg.partition_config())?.manifest,
    };
    let clients = manifest.apply(&corpus)?;
    let n = clients.len();
    let n_new = if cfg.modes.expand_clients { cfg.expansion.new_clients } else { 0 };
    let manifest_out = manifest;
    let cost_normalizer = full_corpus_manifest(&corpus, model_names.clone())?.cost_normalizer;
    Ok(PreparedData {
        corpus,
        model_names,
        cost_normalizer,
        oracle,
        manifest: manifest_out,
        clients,
        n_base_models,
        base_clients: (0..n - n_new).collect(),
        new_clients: (n - n_new..n).collect(),
    })
}

/// Generates or loads the corpus and partitions it across clients.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let (corpus, names, oracle) = match &cfg.data {
        DataSource::Synthetic { n_queries, oracle } => {
            let o = SyntheticOracle::random(oracle, derive_seed(cfg.seed, &[S_ORACLE]))?;
            let (corpus, o) = generate_synthetic(&o, *n_queries, oracle.n_tasks, derive_seed(cfg.seed, &[S_DATA]));
            (corpus, o.model_names.clone(), Some(o))
        }
        DataSource::Oracle { path, n_queries } => {
            let o = SyntheticOracle::load(path)?;
            let (corpus, o) = generate_synthetic(&o, *n_queries, o.centers.len(), derive_seed(cfg.seed, &[S_DATA]));
            (corpus, o.model_names.clone(), Some(o))
        }
        DataSource::File { path, delimiter } => {
            let (corpus, manifest) = load_full_corpus(path, CorpusFormat { delimiter: *delimiter as u8 })?;
            (corpus, manifest.model_pool.names().to_vec(), None)
        }
    };
    finish_prepared(cfg, corpus, names, oracle, None)
}

pub fn save_prepared(cfg: &ExperimentConfig, data: &PreparedData, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let cfg_path = out.join(files::CONFIG);
    std::fs::write(&cfg_path, cfg.to_toml_string()?).map_err(|e| Error::io(&cfg_path, e))?;
    let pool = crate::data::ModelPool::new(data.model_names.clone(), data.cost_normalizer)?;
    save_full_corpus(&out.join(files::CORPUS), &data.corpus, &pool, data.d_emb())?;
    if let Some(o) = &data.oracle {
        o.save(&out.join(files::ORACLE))?;
    }
    data.manifest.save(&out.join(files::PARTITION))
}

pub fn load_prepared(cfg: &ExperimentConfig, out: &Path) -> Result<PreparedData> {
    let (corpus, manifest) = load_full_corpus(&out.join(files::CORPUS), CorpusFormat::default()).map_err(|e| missing_as(e, out.join(files::CORPUS)))?;
    let oracle_path = out.join(files::ORACLE);
    let oracle = oracle_path.exists().then(|| SyntheticOracle::load(&oracle_path)).transpose()?;
    let partition = PartitionManifest::load(&out.join(files::PARTITION), cfg.partition.n_clients)?;
    finish_prepared(cfg, corpus, manifest.model_pool.names().to_vec(), oracle, Some(partition))
}

fn missing_as(e: Error, path: PathBuf) -> Error {
    match e {
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => Error::MissingArtifact(path),
        other => other,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpRouters {
    pub federated: MlpRouter,
    pub trace: RoundTrace,
    /// Indexed by client id; `None` for clients without a local router.
    pub local: Vec<Option<MlpRouter>>,
    pub centralized: Option<MlpRouter>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KmeansRouters {
    pub federated: KmeansRouterState,
    pub local: Vec<Option<KmeansRouterState>>,
    pub centralized: Option<KmeansRouterState>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainedRouters {
    pub mlp: Option<MlpRouters>,
    pub kmeans: Option<KmeansRouters>,
}

/// Trains the federated routers on the base clients, plus the client-local
/// and centralized baselines when enabled.
pub fn train_routers(cfg: &ExperimentConfig, data: &PreparedData) -> Result<TrainedRouters> {
    let base = data.base();
    let pooled: Vec<EvaluationRecord> = base.iter().flat_map(|c| c.train.iter().cloned()).collect();
    let has_local = |i: usize| cfg.modes.local_baselines && data.base_clients.contains(&i) && !data.clients[i].train.is_empty();
    let n = data.clients.len();
    let mut out = TrainedRouters::default();
    if cfg.family.mlp() {
        let arch = data.architecture(cfg);
        let norm = data.cost_normalizer;
        let (params, trace) = run_federated_training(&base, &arch, &cfg.federation_config(S_FEDERATED), norm)?;
        let local = (0..n)
            .into_par_iter()
            .map(|i| {
                if !has_local(i) {
                    return Ok(None);
                }
                let fc = cfg.federation_config(derive_seed(S_LOCAL, &[i as u64]));
                let p = run_local_training(&data.clients[i].train, &arch, &fc, norm)?;
                Ok(Some(MlpRouter::new(p, norm)))
            })
            .collect::<Result<Vec<_>>>()?;
        let centralized = if cfg.modes.centralized {
            let p = run_local_training(&pooled, &arch, &cfg.federation_config(S_CENTRAL), norm)?;
            Some(MlpRouter::new(p, norm))
        } else {
            None
        };
        out.mlp = Some(MlpRouters {
            federated: MlpRouter::new(params, norm),
            trace,
            local,
            centralized,
        });
    }
    if cfg.family.kmeans() {
        let m = data.n_base_models;
        let seed = derive_seed(cfg.seed, &[S_KMEANS]);
        let federated = build_federated_kmeans(&base, m, &cfg.kmeans, seed)?.state;
        let local = (0..n)
            .into_par_iter()
            .map(|i| {
                if !has_local(i) {
                    return Ok(None);
                }
                build_pooled_kmeans(&data.clients[i].train, m, &cfg.kmeans, derive_seed(seed, &[S_LOCAL, i as u64])).map(Some)
            })
            .collect::<Result<Vec<_>>>()?;
        let centralized = if cfg.modes.centralized {
            Some(build_pooled_kmeans(&pooled, m, &cfg.kmeans, derive_seed(seed, &[S_CENTRAL]))?)
        } else {
            None
        };
        out.kmeans = Some(KmeansRouters {
            federated,
            local,
            centralized,
        });
    }
    Ok(out)
}

fn ckpt_dir(out: &Path) -> PathBuf {
    out.join(files::CHECKPOINTS)
}

fn mlp_path(out: &Path, name: &str) -> PathBuf {
    ckpt_dir(out).join(format!("mlp_{name}.json"))
}

fn kmeans_path(out: &Path, name: &str) -> PathBuf {
    ckpt_dir(out).join(format!("kmeans_{name}.json"))
}

fn save_mlp(router: &MlpRouter, path: &Path, seed: u64) -> Result<()> {
    let mut ck = MlpCheckpoint::new(router.clone());
    ck.metadata.insert("seed".into(), seed.to_string());
    ck.save(path)
}

pub fn save_routers(cfg: &ExperimentConfig, routers: &TrainedRouters, out: &Path) -> Result<()> {
    let dir = ckpt_dir(out);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    if let Some(r) = &routers.mlp {
        save_mlp(&r.federated, &mlp_path(out, "federated"), cfg.seed)?;
        for (i, l) in r.local.iter().enumerate() {
            if let Some(l) = l {
                save_mlp(l, &mlp_path(out, &format!("local_{i}")), cfg.seed)?;
            }
        }
        if let Some(c) = &r.centralized {
            save_mlp(c, &mlp_path(out, "centralized"), cfg.seed)?;
        }
        r.trace.save(&out.join(files::ROUND_TRACE), cfg.output.wall_time)?;
    }
    if let Some(r) = &routers.kmeans {
        r.federated.save(&kmeans_path(out, "federated"))?;
        for (i, l) in r.local.iter().enumerate() {
            if let Some(l) = l {
                l.save(&kmeans_path(out, &format!("local_{i}")))?;
            }
        }
        if let Some(c) = &r.centralized {
            c.save(&kmeans_path(out, "centralized"))?;
        }
    }
    Ok(())
}

pub fn load_routers(cfg: &ExperimentConfig, data: &PreparedData, out: &Path) -> Result<TrainedRouters> {
    let expects_local = |i: usize| cfg.modes.local_baselines && data.base_clients.contains(&i) && !data.clients[i].train.is_empty();
    let n = data.clients.len();
    let mut routers = TrainedRouters::default();
    if cfg.family.mlp() {
        let load = |p: PathBuf| MlpCheckpoint::load(&p).map(|c| c.router);
        let federated = load(mlp_path(out, "federated"))?;
        let local = (0..n)
            .map(|i| expects_local(i).then(|| load(mlp_path(out, &format!("local_{i}")))).transpose())
            .collect::<Result<Vec<_>>>()?;
        routers.mlp = Some(MlpRouters {
            federated,
            trace: RoundTrace::default(),
            local,
            centralized: cfg.modes.centralized.then(|| load(mlp_path(out, "centralized"))).transpose()?,
        });
    }
    if cfg.family.kmeans() {
        let load = |p: PathBuf| KmeansRouterState::load(&p);
        let federated = load(kmeans_path(out, "federated"))?;
        let local = (0..n)
            .map(|i| expects_local(i).then(|| load(kmeans_path(out, &format!("local_{i}")))).transpose())
            .collect::<Result<Vec<_>>>()?;
        routers.kmeans = Some(KmeansRouters {
            federated,
            local,
            centralized: cfg.modes.centralized.then(|| load(kmeans_path(out, "centralized"))).transpose()?,
        });
    }
    Ok(routers)
}

/// One line of the AUC summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucRow {
    pub family: String,
    pub router: String,
    pub eval_set: String,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuboptimalityRow {
    pub family: String,
    pub router: String,
    pub eval_set: String,
    pub lambda: f64,
    pub suboptimality: f64,
}

/// Curves and scalar summaries of one evaluation stage.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub auc: Vec<AucRow>,
    pub suboptimality: Vec<SuboptimalityRow>,
    /// `(file stem, curve)`.
    pub curves: Vec<(String, FrontierCurve)>,
}

impl EvalReport {
    pub fn auc_of(&self, family: &str, router: &str, eval_set: &str) -> Option<f64> {
        self.auc
            .iter()
            .find(|r| r.family == family && r.router == router && r.eval_set == eval_set)
            .map(|r| r.auc)
    }

    pub fn suboptimality_of(&self, family: &str, router: &str, eval_set: &str) -> Option<f64> {
        self.suboptimality
            .iter()
            .find(|r| r.family == family && r.router == router && r.eval_set == eval_set)
            .map(|r| r.suboptimality)
    }

    fn extend(&mut self, other: EvalReport) {
        self.auc.extend(other.auc);
        self.suboptimality.extend(other.suboptimality);
        self.curves.extend(other.curves);
    }

    pub fn auc_csv(&self) -> String {
        let mut s = String::from("family,router,eval_set,auc\n");
        for r in &self.auc {
            let _ = writeln!(s, "{},{},{},{}", r.family, r.router, r.eval_set, r.auc);
        }
        s
    }

    pub fn suboptimality_csv(&self) -> String {
        let mut s = String::from("family,router,eval_set,lambda,suboptimality\n");
        for r in &self.suboptimality {
            let _ = writeln!(s, "{},{},{},{},{}", r.family, r.router, r.eval_set, r.lambda, r.suboptimality);
        }
        s
    }

    fn write_curves(&self, out: &Path) -> Result<()> {
        let dir = out.join(files::CURVES);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (stem, c) in &self.curves {
            c.save(&dir.join(format!("{stem}.csv")))?;
        }
        Ok(())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Scores one router on the global test set and on client test sets.
struct Scorer<'a> {
    cfg: &'a ExperimentConfig,
    data: &'a PreparedData,
    global: Vec<FullEvaluation>,
    offsets: Vec<usize>,
}

impl<'a> Scorer<'a> {
    fn new(cfg: &'a ExperimentConfig, data: &'a PreparedData) -> Self {
        Self {
            cfg,
            data,
            global: data.global_test(),
            offsets: data.test_offsets(),
        }
    }

    fn client_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i] + self.data.clients[i].test.len()
    }

    fn curve(&self, table: &[Vec<Option<Estimate>>], test: &[FullEvaluation]) -> Result<FrontierCurve> {
        sweep_table(table, test, &self.cfg.eval.grid)
    }

    /// `clients`: which client test sets to score on, from the same table.
    fn score<E: Estimator + ?Sized>(&self, est: &E, family: &str, router: &str, clients: &[usize], report: &mut EvalReport) -> Result<()> {
        let table = estimate_table(est, &self.global)?;
        let curve = self.curve(&table, &self.global)?;
        push_curve(report, family, router, "global", curve);
        if let Some(o) = &self.data.oracle {
            let lambda = self.cfg.eval.suboptimality_lambda;
            report.suboptimality.push(SuboptimalityRow {
                family: family.into(),
                router: router.into(),
                eval_set: "global".into(),
                lambda,
                suboptimality: suboptimality_table(&table, o, &self.global, lambda)?,
            });
        }
        let per_client = clients
            .par_iter()
            .filter(|&&i| !self.data.clients[i].test.is_empty())
            .map(|&i| {
                let r = self.client_range(i);
                Ok((i, self.curve(&table[r.clone()], &self.global[r])?))
            })
            .collect::<Result<Vec<_>>>()?;
        for (i, c) in per_client {
            let eval_set = format!("client-{i}");
            if self.cfg.eval.client_curves {
                push_curve(report, family, router, &eval_set, c);
            } else {
                push_auc(report, family, router, &eval_set, c.auc);
            }
        }
        Ok(())
    }
}

fn push_auc(report: &mut EvalReport, family: &str, router: &str, eval_set: &str, auc: f64) {
    report.auc.push(AucRow {
        family: family.into(),
        router: router.into(),
        eval_set: eval_set.into(),
        auc,
    });
}

fn push_curve(report: &mut EvalReport, family: &str, router: &str, eval_set: &str, curve: FrontierCurve) {
    push_auc(report, family, router, eval_set, curve.auc);
    report.curves.push((format!("{family}_{router}_{eval_set}"), curve));
}

fn evaluate_family<E: Estimator>(
    scorer: &Scorer,
    family: &str,
    federated: &E,
    local: &[Option<E>],
    centralized: Option<&E>,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let all: Vec<usize> = (0..scorer.data.clients.len()).collect();
    scorer.score(federated, family, "federated", &all, &mut report)?;
    if let Some(c) = centralized {
        scorer.score(c, family, "centralized", &[], &mut report)?;
    }
    for (i, l) in local.iter().enumerate() {
        if let Some(l) = l {
            scorer.score(l, family, &format!("local-{i}"), &[i], &mut report)?;
        }
    }
    Ok(report)
}

/// Frontier curves, AUCs and (with an oracle) suboptimality of every
/// trained router.
pub fn evaluate_routers(cfg: &ExperimentConfig, data: &PreparedData, routers: &TrainedRouters) -> Result<EvalReport> {
    let scorer = Scorer::new(cfg, data);
    let mut report = EvalReport::default();
    if let Some(r) = &routers.mlp {
        report.extend(evaluate_family(&scorer, "mlp", &r.federated, &r.local, r.centralized.as_ref())?);
    }
    if let Some(r) = &routers.kmeans {
        report.extend(evaluate_family(&scorer, "kmeans", &r.federated, &r.local, r.centralized.as_ref())?);
    }
    Ok(report)
}

/// Per-client blends of federated and local routers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PersonalizationReport {
    pub eval: EvalReport,
    /// `(family, client, weights)`.
    pub weights: Vec<(String, usize, PersonalizationWeights)>,
}

/// Seeded split of a client's training records into (fit, calibration).
/// `None` when the share leaves either side empty.
fn holdout_split(records: &[EvaluationRecord], share: f64, seed: u64) -> Option<(Vec<EvaluationRecord>, Vec<EvaluationRecord>)> {
    let n = records.len();
    let k = round_half_up(share * n as f64);
    if share <= 0.0 || k == 0 || k >= n {
        return None;
    }
    let mut held = index::sample(&mut seeded_rng(seed), n, k).into_vec();
    held.sort_unstable();
    let mut is_held = vec![false; n];
    for &j in &held {
        is_held[j] = true;
    }
    let (mut fit, mut calib) = (Vec::with_capacity(n - k), Vec::with_capacity(k));
    for (r, h) in records.iter().zip(is_held) {
        if h { calib.push(r.clone()) } else { fit.push(r.clone()) }
    }
    Some((fit, calib))
}

fn personalize_family<E: Estimator>(
    scorer: &Scorer,
    family: &str,
    federated: &E,
    local: &[Option<E>],
    refit: &dyn Fn(usize, &[EvaluationRecord]) -> Result<E>,
    out: &mut PersonalizationReport,
) -> Result<()> {
    let share = scorer.cfg.personalization.calibration_holdout;
    for (i, l) in local.iter().enumerate() {
        let (Some(l), client) = (l, &scorer.data.clients[i]) else { continue };
        if client.test.is_empty() {
            continue;
        }
        let split = holdout_split(&client.train, share, derive_seed(scorer.cfg.seed, &[S_HOLDOUT, i as u64]));
        let (blended_weights, table) = match split {
            None => {
                let b = PersonalizedEstimator::calibrate(federated, l, &client.train)?;
                let t = estimate_table(&b, &client.test)?;
                (b.weights, t)
            }
            Some((fit, calib)) => {
                let refitted = refit(i, &fit)?;
                let b = PersonalizedEstimator::calibrate(federated, &refitted, &calib)?;
                let t = estimate_table(&b, &client.test)?;
                (b.weights, t)
            }
        };
        let curve = scorer.curve(&table, &client.test)?;
        push_curve(&mut out.eval, family, "personalized", &format!("client-{i}"), curve);
        out.weights.push((family.into(), i, blended_weights));
    }
    Ok(())
}

pub fn personalize(cfg: &ExperimentConfig, data: &PreparedData, routers: &TrainedRouters) -> Result<PersonalizationReport> {
    let scorer = Scorer::new(cfg, data);
    let mut out = PersonalizationReport::default();
    if let Some(r) = &routers.mlp {
        let arch = data.architecture(cfg);
        let refit = |i: usize, fit: &[EvaluationRecord]| -> Result<MlpRouter> {
            let fc = cfg.federation_config(derive_seed(S_LOCAL, &[i as u64]));
            Ok(MlpRouter::new(run_local_training(fit, &arch, &fc, data.cost_normalizer)?, data.cost_normalizer))
        };
        personalize_family(&scorer, "mlp", &r.federated, &r.local, &refit, &mut out)?;
    }
    if let Some(r) = &routers.kmeans {
        let seed = derive_seed(cfg.seed, &[S_KMEANS]);
        let refit = |i: usize, fit: &[EvaluationRecord]| {
            build_pooled_kmeans(fit, data.n_base_models, &cfg.kmeans, derive_seed(seed, &[S_LOCAL, i as u64]))
        };
        personalize_family(&scorer, "kmeans", &r.federated, &r.local, &refit, &mut out)?;
    }
    Ok(out)
}

/// Calibration prompts for new model `model`: a seeded share of the base
/// clients' pooled training prompts, each evaluated on that model.
pub fn calibration_records(cfg: &ExperimentConfig, data: &PreparedData, model: usize) -> Result<Vec<EvaluationRecord>> {
    let rows: Vec<usize> = data
        .base_clients
        .iter()
        .flat_map(|&i| data.manifest.clients[i].train.iter().map(|&(row, _)| row))
        .collect();
    let k = round_half_up(cfg.expansion.calibration_fraction * rows.len() as f64).clamp(1, rows.len().max(1));
    if rows.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = seeded_rng(derive_seed(cfg.seed, &[S_CALIBRATION, model as u64]));
    let mut picked = index::sample(&mut rng, rows.len(), k).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|j| data.corpus[rows[j]].log(model)).collect()
}

/// Routers and global AUCs before and after adding the withheld models.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelExpansionReport {
    pub mlp: Option<MlpRouter>,
    pub kmeans: Option<KmeansRouterState>,
    /// `(family, stage, auc)` with stage `before` or `after`.
    pub auc: Vec<(String, String, f64)>,
    pub eval: EvalReport,
}

impl ModelExpansionReport {
    pub fn auc_of(&self, family: &str, stage: &str) -> Option<f64> {
        self.auc.iter().find(|r| r.0 == family && r.1 == stage).map(|r| r.2)
    }
}

pub fn expand_models(cfg: &ExperimentConfig, data: &PreparedData, routers: &TrainedRouters) -> Result<ModelExpansionReport> {
    let scorer = Scorer::new(cfg, data);
    let new_models: Vec<usize> = (data.n_base_models..data.model_names.len()).collect();
    let calibration: Vec<Vec<EvaluationRecord>> = new_models
        .iter()
        .map(|&m| calibration_records(cfg, data, m))
        .collect::<Result<_>>()?;
    let mut report = ModelExpansionReport {
        mlp: None,
        kmeans: None,
        auc: Vec::new(),
        eval: EvalReport::default(),
    };
    let record = |family: &str, before: &dyn Fn() -> Result<FrontierCurve>, after: FrontierCurve, rep: &mut ModelExpansionReport| -> Result<()> {
        let b = before()?;
        rep.auc.push((family.into(), "before".into(), b.auc));
        rep.auc.push((family.into(), "after".into(), after.auc));
        push_curve(&mut rep.eval, family, "before_model_expansion", "global", b);
        push_curve(&mut rep.eval, family, "after_model_expansion", "global", after);
        Ok(())
    };
    let sweep = |e: &dyn Estimator| -> Result<FrontierCurve> {
        let t = estimate_table(e, &scorer.global)?;
        scorer.curve(&t, &scorer.global)
    };
    if let Some(r) = &routers.mlp {
        let mut params = r.federated.params.clone();
        for (&m, calib) in new_models.iter().zip(&calibration) {
            let seed = derive_seed(cfg.seed, &[S_HEAD, m as u64]);
            params = add_model_mlp(&params, calib, &cfg.expansion.head, data.cost_normalizer, seed)?.params;
        }
        let expanded = MlpRouter::new(params, data.cost_normalizer);
        let after = sweep(&expanded)?;
        record("mlp", &|| sweep(&r.federated), after, &mut report)?;
        report.mlp = Some(expanded);
    }
    if let Some(r) = &routers.kmeans {
        let mut state = r.federated.clone();
        for calib in &calibration {
            state = add_model_kmeans(&state, calib)?;
        }
        let after = sweep(&state)?;
        record("kmeans", &|| sweep(&r.federated), after, &mut report)?;
        report.kmeans = Some(state);
    }
    Ok(report)
}

/// Routers and AUCs before and after onboarding the new clients.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientExpansionReport {
    pub mlp: Option<(MlpRouter, RoundTrace)>,
    pub kmeans: Option<KmeansRouterState>,
    /// `(family, stage, eval_set, auc)`; eval sets are `global` and
    /// `new-clients`.
    pub auc: Vec<(String, String, String, f64)>,
}

pub fn expand_clients(cfg: &ExperimentConfig, data: &PreparedData, routers: &TrainedRouters) -> Result<ClientExpansionReport> {
    let scorer = Scorer::new(cfg, data);
    let new: Vec<ClientDataset> = data.new_clients.iter().map(|&i| data.clients[i].clone()).collect();
    let new_test: Vec<FullEvaluation> = new.iter().flat_map(|c| c.test.iter().cloned()).collect();
    let mut report = ClientExpansionReport {
        mlp: None,
        kmeans: None,
        auc: Vec::new(),
    };
    let score = |family: &str, stage: &str, e: &dyn Estimator, rep: &mut ClientExpansionReport| -> Result<()> {
        for (set, test) in [("global", &scorer.global), ("new-clients", &new_test)] {
            if test.is_empty() {
                continue;
            }
            let t = estimate_table(e, test)?;
            rep.auc.push((family.into(), stage.into(), set.into(), scorer.curve(&t, test)?.auc));
        }
        Ok(())
    };
    if let Some(r) = &routers.mlp {
        let fc = FederationConfig {
            n_rounds: cfg.expansion.client_rounds,
            ..cfg.federation_config(S_NEW_CLIENTS)
        };
        let (params, trace) = add_clients_mlp(&r.federated.params, &new, cfg.expansion.distillation_weight, &fc, data.cost_normalizer)?;
        let expanded = MlpRouter::new(params, data.cost_normalizer);
        score("mlp", "before", &r.federated, &mut report)?;
        score("mlp", "after", &expanded, &mut report)?;
        report.mlp = Some((expanded, trace));
    }
    if let Some(r) = &routers.kmeans {
        let state = add_clients_kmeans(&r.federated, &new)?;
        score("kmeans", "before", &r.federated, &mut report)?;
        score("kmeans", "after", &state, &mut report)?;
        report.kmeans = Some(state);
    }
    Ok(report)
}

/// Everything an experiment produced.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentReport {
    pub data: PreparedData,
    pub routers: TrainedRouters,
    pub eval: EvalReport,
    pub personalization: Option<PersonalizationReport>,
    pub model_expansion: Option<ModelExpansionReport>,
    pub client_expansion: Option<ClientExpansionReport>,
}

/// Runs every enabled stage in memory and, when `out` is given, writes all
/// artifacts there.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<ExperimentReport> {
    let data = prepare_data(cfg)?;
    let routers = train_routers(cfg, &data)?;
    let eval = evaluate_routers(cfg, &data, &routers)?;
    let personalization = cfg.modes.personalization.then(|| personalize(cfg, &data, &routers)).transpose()?;
    let model_expansion = cfg.modes.expand_models.then(|| expand_models(cfg, &data, &routers)).transpose()?;
    let client_expansion = cfg.modes.expand_clients.then(|| expand_clients(cfg, &data, &routers)).transpose()?;
    if let Some(out) = out {
        save_prepared(cfg, &data, out)?;
        save_routers(cfg, &routers, out)?;
        write_eval(&eval, out)?;
        if let Some(p) = &personalization {
            write_personalization(p, &data, out)?;
        }
        if let Some(m) = &model_expansion {
            write_model_expansion(cfg, m, out)?;
        }
        if let Some(c) = &client_expansion {
            write_client_expansion(cfg, c, out)?;
        }
    }
    Ok(ExperimentReport {
        data,
        routers,
        eval,
        personalization,
        model_expansion,
        client_expansion,
    })
}

fn write_eval(eval: &EvalReport, out: &Path) -> Result<()> {
    eval.write_curves(out)?;
    write_text(&out.join(files::AUC_SUMMARY), &eval.auc_csv())?;
    write_text(&out.join(files::SUBOPTIMALITY), &eval.suboptimality_csv())
}

fn write_personalization(p: &PersonalizationReport, data: &PreparedData, out: &Path) -> Result<()> {
    p.eval.write_curves(out)?;
    write_text(&out.join(files::PERSONALIZATION_AUC), &p.eval.auc_csv())?;
    for family in ["mlp", "kmeans"] {
        let rows: Vec<(usize, PersonalizationWeights)> = p
            .weights
            .iter()
            .filter(|w| w.0 == family)
            .map(|w| (w.1, w.2.clone()))
            .collect();
        if !rows.is_empty() {
            save_personalization_report(&out.join(format!("personalization_{family}.csv")), &rows, &data.model_names)?;
        }
    }
    Ok(())
}

fn write_model_expansion(cfg: &ExperimentConfig, m: &ModelExpansionReport, out: &Path) -> Result<()> {
    std::fs::create_dir_all(ckpt_dir(out)).map_err(|e| Error::io(out, e))?;
    if let Some(r) = &m.mlp {
        save_mlp(r, &mlp_path(out, "expanded_models"), cfg.seed)?;
    }
    if let Some(s) = &m.kmeans {
        s.save(&kmeans_path(out, "expanded_models"))?;
    }
    m.eval.write_curves(out)?;
    let mut s = String::from("family,stage,auc\n");
    for (f, stage, auc) in &m.auc {
        let _ = writeln!(s, "{f},{stage},{auc}");
    }
    write_text(&out.join(files::EXPANSION_MODELS), &s)
}

fn write_client_expansion(cfg: &ExperimentConfig, c: &ClientExpansionReport, out: &Path) -> Result<()> {
    std::fs::create_dir_all(ckpt_dir(out)).map_err(|e| Error::io(out, e))?;
    if let Some((r, trace)) = &c.mlp {
        save_mlp(r, &mlp_path(out, "expanded_clients"), cfg.seed)?;
        trace.save(&out.join(files::EXPANSION_TRACE), cfg.output.wall_time)?;
    }
    if let Some(s) = &c.kmeans {
        s.save(&kmeans_path(out, "expanded_clients"))?;
    }
    let mut s = String::from("family,stage,eval_set,auc\n");
    for (f, stage, set, auc) in &c.auc {
        let _ = writeln!(s, "{f},{stage},{set},{auc}");
    }
    write_text(&out.join(files::EXPANSION_CLIENTS), &s)
}

/// `partition` subcommand: corpus, oracle, partition manifest and the
/// frozen config.
pub fn cmd_partition(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = prepare_data(cfg)?;
    save_prepared(cfg, &data, out)
}

/// `train` subcommand: router checkpoints and the round trace.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let data = load_prepared(cfg, out)?;
    let routers = train_routers(cfg, &data)?;
    save_routers(cfg, &routers, out)
}

/// `eval` subcommand: curves, AUC summary and suboptimality table.
pub fn cmd_eval(cfg: &ExperimentConfig, out: &Path) -> Result<EvalReport> {
    let data = load_prepared(cfg, out)?;
    let routers = load_routers(cfg, &data, out)?;
    let eval = evaluate_routers(cfg, &data, &routers)?;
    write_eval(&eval, out)?;
    Ok(eval)
}

pub fn cmd_personalize(cfg: &ExperimentConfig, out: &Path) -> Result<PersonalizationReport> {
    if !cfg.modes.local_baselines {
        return Err(Error::config("modes.local_baselines", "personalization needs local routers"));
    }
    let data = load_prepared(cfg, out)?;
    let routers = load_routers(cfg, &data, out)?;
    let p = personalize(cfg, &data, &routers)?;
    write_personalization(&p, &data, out)?;
    Ok(p)
}

pub fn cmd_expand_models(cfg: &ExperimentConfig, out: &Path) -> Result<ModelExpansionReport> {
    if !cfg.modes.expand_models {
        return Err(Error::config("modes.expand_models", "must be enabled before partitioning"));
    }
    let data = load_prepared(cfg, out)?;
    let routers = load_routers(cfg, &data, out)?;
    let m = expand_models(cfg, &data, &routers)?;
    write_model_expansion(cfg, &m, out)?;
    Ok(m)
}

pub fn cmd_expand_clients(cfg: &ExperimentConfig, out: &Path) -> Result<ClientExpansionReport> {
    if !cfg.modes.expand_clients {
        return Err(Error::config("modes.expand_clients", "must be enabled before partitioning"));
    }
    let data = load_prepared(cfg, out)?;
    let routers = load_routers(cfg, &data, out)?;
    let c = expand_clients(cfg, &data, &routers)?;
    write_client_expansion(cfg, &c, out)?;
    Ok(c)
}

/// Human-readable metadata of a checkpoint, router state, curve or
/// partition file.
pub fn inspect(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut s = String::new();
    if text.starts_with("lambda,") {
        let c = FrontierCurve::parse_csv(&text)?;
        let _ = writeln!(s, "frontier curve: {} points, auc {}", c.points.len(), c.auc);
        return Ok(s);
    }
    if text.starts_with("client,row,split") {
        let m = PartitionManifest::from_csv(&text, 0)?;
        let _ = writeln!(s, "partition: {} clients", m.clients.len());
        for (i, c) in m.clients.iter().enumerate() {
            let _ = writeln!(s, "  client {i}: {} train, {} test", c.train.len(), c.test.len());
        }
        return Ok(s);
    }
    let value: serde_json::Value = serde_json::from_str(&text)?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(crate::mlp::MLP_CHECKPOINT_FORMAT) => {
            let ck = MlpCheckpoint::load(path)?;
            let p = &ck.router.params;
            let a = &p.architecture;
            let _ = writeln!(s, "MLP router checkpoint v{}", ck.version);
            let _ = writeln!(s, "  d_emb {}, hidden {:?}, dropout {}, models {}", a.d_emb, a.hidden_widths, a.dropout, a.n_models);
            let _ = writeln!(s, "  parameters {}", p.n_params());
            for (i, l) in p.layers.iter().enumerate() {
                let _ = writeln!(s, "  layer {i}: weight {:?}", l.weight.dim());
            }
            let _ = writeln!(s, "  heads: {:?} accuracy, {:?} cost", p.heads.accuracy_weight.dim(), p.heads.cost_weight.dim());
            let _ = writeln!(s, "  cost normalizer {}, clamp {}", ck.router.cost_normalizer, ck.router.clamp_cost);
            for (k, v) in &ck.metadata {
                let _ = writeln!(s, "  {k}: {v}");
            }
        }
        Some(crate::kmeans::KMEANS_CHECKPOINT_FORMAT) => {
            let st = KmeansRouterState::load(path)?;
            let occupied = st.stats.occupied().count();
            let _ = writeln!(s, "K-means router state");
            let _ = writeln!(s, "  centroids {} x {}", st.n_clusters(), st.d_emb());
            let _ = writeln!(s, "  models {}", st.stats.n_models);
            let _ = writeln!(
                s,
                "  stat table occupancy {occupied}/{} cells, {} records",
                st.n_clusters() * st.stats.n_models,
                st.stats.total_count()
            );
        }
        _ => {
            let o: SyntheticOracle = serde_json::from_value(value)?;
            let _ = writeln!(s, "synthetic oracle: {} models, d_emb {}, {} tasks", o.n_models(), o.d_emb(), o.centers.len());
        }
    }
    Ok(s)
}

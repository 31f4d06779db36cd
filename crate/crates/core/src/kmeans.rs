//! Nonparametric router: federated two-stage K-means over query embeddings
//! plus count-weighted per-(cluster, model) accuracy and cost statistics.
//!
//! Clients cluster their own embeddings and upload `(centroid, size)` pairs.
//! The server clusters those centroids with sizes as weights and broadcasts
//! the global centers. Clients then send per-(cluster, model) counts and
//! means of their logged records, which the server merges.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ClientDataset, EvaluationRecord};
use crate::error::{Error, Result};
use crate::eval::{Estimate, Estimator};
use crate::numeric::{derive_seed, seeded_rng, CompensatedSum};

const LOCAL_STREAM: u64 = 0x6c6f63;
const SERVER_STREAM: u64 = 0x737276;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KmeansConfig {
    pub k_local: usize,
    pub k_global: usize,
    pub n_init: usize,
    pub max_iter: usize,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        Self {
            k_local: 15,
            k_global: 20,
            n_init: 3,
            max_iter: 30,
        }
    }
}

impl KmeansConfig {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("kmeans.k_local", self.k_local),
            ("kmeans.k_global", self.k_global),
            ("kmeans.n_init", self.n_init),
            ("kmeans.max_iter", self.max_iter),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        Ok(())
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center; ties go to the lowest index.
pub fn nearest(centers: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = squared_distance(c, x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct LloydResult {
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    /// Weighted sum of squared distances to the assigned centroid.
    pub inertia: f64,
    /// Inertia after the initial assignment and after every iteration.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    /// Seeding ran out of distinct points, so some centers coincide.
    pub empty_prone: bool,
}

fn check_points<P: AsRef<[f64]>>(points: &[P], weights: &[f64]) -> Result<usize> {
    let first = points
        .first()
        .ok_or_else(|| Error::InvalidInput("k-means needs at least one point".into()))?;
    let d = first.as_ref().len();
    if weights.len() != points.len() {
        return Err(Error::InvalidInput(format!("{} points with {} weights", points.len(), weights.len())));
    }
    if let Some(p) = points.iter().find(|p| p.as_ref().len() != d) {
        return Err(Error::Dimension {
            expected: d,
            found: p.as_ref().len(),
        });
    }
    if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidInput("k-means weights must be positive".into()));
    }
    Ok(d)
}

fn sample_weighted<R: Rng>(scores: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = scores.iter().copied().collect::<CompensatedSum>().value();
    if !(total > 0.0) {
        return None;
    }
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, &s) in scores.iter().enumerate() {
        if s > 0.0 {
            acc += s;
            last = Some(i);
            if target < acc {
                return Some(i);
            }
        }
    }
    last
}

/// Weighted k-means++ seeding: the first center is drawn proportionally to
/// weight, each further one proportionally to weight times squared distance
/// to the nearest chosen center. Returns the centers and whether seeding had
/// to reuse coincident points.
pub fn kmeans_pp_init<P: AsRef<[f64]>, R: Rng>(points: &[P], weights: &[f64], k: usize, rng: &mut R) -> (Vec<Vec<f64>>, bool) {
    let mut centers = Vec::with_capacity(k);
    let first = sample_weighted(weights, rng).expect("positive weights");
    centers.push(points[first].as_ref().to_vec());
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p.as_ref(), &centers[0])).collect();
    let mut duplicated = false;
    while centers.len() < k {
        let scores: Vec<f64> = d2.iter().zip(weights).map(|(d, w)| d * w).collect();
        let pick = match sample_weighted(&scores, rng) {
            Some(i) => i,
            None => {
                duplicated = true;
                sample_weighted(weights, rng).expect("positive weights")
            }
        };
        let c = points[pick].as_ref().to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p.as_ref(), &c));
        }
        centers.push(c);
    }
    (centers, duplicated)
}

fn assign<P: AsRef<[f64]> + Sync>(points: &[P], weights: &[f64], centers: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>, f64) {
    let (assignments, d2): (Vec<usize>, Vec<f64>) = points.iter().map(|p| nearest(centers, p.as_ref())).unzip();
    let inertia = d2.iter().zip(weights).map(|(d, w)| d * w).collect::<CompensatedSum>().value();
    (assignments, d2, inertia)
}

/// Lloyd iterations from given starting centers. Stops when assignments no
/// longer change or after `max_iter` updates. A cluster left empty by an
/// update is moved onto the point with the largest weighted squared distance.
pub fn lloyd_from_init<P: AsRef<[f64]> + Sync>(points: &[P], weights: &[f64], init: Vec<Vec<f64>>, max_iter: usize) -> Result<LloydResult> {
    let d = check_points(points, weights)?;
    if init.is_empty() || init.iter().any(|c| c.len() != d) {
        return Err(Error::InvalidInput("initial centers missing or of wrong width".into()));
    }
    let k = init.len();
    let mut centroids = init;
    let (mut assignments, mut d2, mut inertia) = assign(points, weights, &centroids);
    let mut history = vec![inertia];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![vec![CompensatedSum::new(); d]; k];
        let mut mass = vec![CompensatedSum::new(); k];
        for ((p, &a), &w) in points.iter().zip(&assignments).zip(weights) {
            for (s, &v) in sums[a].iter_mut().zip(p.as_ref()) {
                s.add(w * v);
            }
            mass[a].add(w);
        }
        let mut contribution: Vec<f64> = d2.iter().zip(weights).map(|(d, w)| d * w).collect();
        for c in 0..k {
            let m = mass[c].value();
            if m > 0.0 {
                centroids[c] = sums[c].iter().map(|s| s.value() / m).collect();
            } else {
                let far = (0..points.len())
                    .max_by(|&i, &j| contribution[i].total_cmp(&contribution[j]).then(j.cmp(&i)))
                    .expect("nonempty");
                log::debug!("k-means: cluster {c} empty, reseeding on point {far}");
                centroids[c] = points[far].as_ref().to_vec();
                contribution[far] = 0.0;
            }
        }
        let (next, next_d2, next_inertia) = assign(points, weights, &centroids);
        let converged = next == assignments;
        assignments = next;
        d2 = next_d2;
        inertia = next_inertia;
        history.push(inertia);
        if converged {
            break;
        }
    }
    Ok(LloydResult {
        centroids,
        assignments,
        inertia,
        inertia_history: history,
        iterations,
        empty_prone: false,
    })
}

/// Weighted Lloyd's algorithm, best of `n_init` seeded k-means++ starts by
/// weighted inertia.
pub fn lloyd_kmeans<P: AsRef<[f64]> + Sync>(
    points: &[P],
    weights: &[f64],
    k: usize,
    n_init: usize,
    max_iter: usize,
    seed: u64,
) -> Result<LloydResult> {
    check_points(points, weights)?;
    if k == 0 || k > points.len() {
        return Err(Error::InvalidInput(format!("k = {k} with {} points", points.len())));
    }
    let mut best: Option<LloydResult> = None;
    for restart in 0..n_init.max(1) {
        let mut rng = seeded_rng(derive_seed(seed, &[restart as u64]));
        let (init, dup) = kmeans_pp_init(points, weights, k, &mut rng);
        let mut r = lloyd_from_init(points, weights, init, max_iter)?;
        r.empty_prone = dup;
        if best.as_ref().is_none_or(|b| r.inertia < b.inertia) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// What a client uploads after local clustering.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalCentroidSummary {
    pub centroids: Vec<Vec<f64>>,
    pub sizes: Vec<usize>,
}

/// Local clustering of a client's training embeddings, with `k` reduced to
/// the point count when the client is small. `None` for an empty client.
pub fn local_summary(train: &[EvaluationRecord], k: usize, config: &KmeansConfig, seed: u64) -> Result<Option<LocalCentroidSummary>> {
    if train.is_empty() {
        return Ok(None);
    }
    let points: Vec<&[f64]> = train.iter().map(|r| r.embedding.as_slice()).collect();
    let weights = vec![1.0; points.len()];
    let r = lloyd_kmeans(&points, &weights, k.min(points.len()), config.n_init, config.max_iter, seed)?;
    let mut sizes = vec![0usize; r.centroids.len()];
    for &a in &r.assignments {
        sizes[a] += 1;
    }
    Ok(Some(LocalCentroidSummary {
        centroids: r.centroids,
        sizes,
    }))
}

/// Mean accuracy and cost of the records in one (cluster, model) cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStat {
    pub accuracy: f64,
    pub cost: f64,
    pub count: usize,
}

impl CellStat {
    /// Count-weighted mean of two cells.
    pub fn merge(self, other: CellStat) -> CellStat {
        let n = self.count + other.count;
        if n == 0 {
            return self;
        }
        let (a, b) = (self.count as f64, other.count as f64);
        let mean = |x: f64, y: f64| {
            let mut s = CompensatedSum::new();
            s.add(a * x);
            s.add(b * y);
            s.value() / n as f64
        };
        CellStat {
            accuracy: mean(self.accuracy, other.accuracy),
            cost: mean(self.cost, other.cost),
            count: n,
        }
    }
}

/// Dense `n_clusters x n_models` table; cells without observations are
/// `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct StatTable {
    pub n_clusters: usize,
    pub n_models: usize,
    cells: Vec<Option<CellStat>>,
}

impl StatTable {
    pub fn empty(n_clusters: usize, n_models: usize) -> Self {
        Self {
            n_clusters,
            n_models,
            cells: vec![None; n_clusters * n_models],
        }
    }

    pub fn get(&self, k: usize, m: usize) -> Option<CellStat> {
        self.cells.get(k * self.n_models + m).copied().flatten()
    }

    pub fn set(&mut self, k: usize, m: usize, cell: Option<CellStat>) {
        let n = self.n_models;
        self.cells[k * n + m] = cell.filter(|c| c.count > 0);
    }

    /// Observed cells as `(cluster, model, stat)`, cluster-major.
    pub fn occupied(&self) -> impl Iterator<Item = (usize, usize, CellStat)> + '_ {
        self.cells
            .iter()
            .enumerate()
            .filter_map(move |(i, c)| c.map(|c| (i / self.n_models, i % self.n_models, c)))
    }

    pub fn total_count(&self) -> usize {
        self.occupied().map(|(_, _, c)| c.count).sum()
    }

    /// Cell-wise count-weighted merge.
    pub fn merge(&self, other: &StatTable) -> Result<StatTable> {
        if (self.n_clusters, self.n_models) != (other.n_clusters, other.n_models) {
            return Err(Error::Shape(format!(
                "stat tables {}x{} and {}x{}",
                self.n_clusters, self.n_models, other.n_clusters, other.n_models
            )));
        }
        let cells = self
            .cells
            .iter()
            .zip(&other.cells)
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some(a.merge(*b)),
                (a, b) => a.or(*b),
            })
            .collect();
        Ok(StatTable { cells, ..*self })
    }

    /// Table with one more model column, empty for every cluster.
    pub fn with_extra_model(&self) -> StatTable {
        let mut out = StatTable::empty(self.n_clusters, self.n_models + 1);
        for (k, m, c) in self.occupied() {
            out.set(k, m, Some(c));
        }
        out
    }

    /// Per-model count-weighted mean over all clusters.
    pub fn model_means(&self) -> Vec<Option<CellStat>> {
        (0..self.n_models)
            .map(|m| {
                let mut acc = CompensatedSum::new();
                let mut cost = CompensatedSum::new();
                let mut n = 0usize;
                for k in 0..self.n_clusters {
                    if let Some(c) = self.get(k, m) {
                        acc.add(c.count as f64 * c.accuracy);
                        cost.add(c.count as f64 * c.cost);
                        n += c.count;
                    }
                }
                (n > 0).then(|| CellStat {
                    accuracy: acc.value() / n as f64,
                    cost: cost.value() / n as f64,
                    count: n,
                })
            })
            .collect()
    }
}

/// Per-(cluster, model) counts and means of one client's logged records
/// against fixed centers.
pub fn client_cell_stats(centroids: &[Vec<f64>], records: &[EvaluationRecord], n_models: usize) -> Result<StatTable> {
    let k = centroids.len();
    let mut sums = vec![(CompensatedSum::new(), CompensatedSum::new(), 0usize); k * n_models];
    for r in records {
        if r.model >= n_models {
            return Err(Error::MissingGroundTruth { model: r.model });
        }
        let (c, _) = nearest(centroids, &r.embedding);
        let cell = &mut sums[c * n_models + r.model];
        cell.0.add(r.accuracy);
        cell.1.add(r.cost);
        cell.2 += 1;
    }
    let cells = sums
        .into_iter()
        .map(|(a, c, n)| {
            (n > 0).then(|| CellStat {
                accuracy: a.value() / n as f64,
                cost: c.value() / n as f64,
                count: n,
            })
        })
        .collect();
    Ok(StatTable {
        n_clusters: k,
        n_models,
        cells,
    })
}

/// Server-side merge of client tables; client order does not matter beyond
/// rounding.
pub fn merge_tables<'a, I: IntoIterator<Item = &'a StatTable>>(tables: I, n_clusters: usize, n_models: usize) -> Result<StatTable> {
    let mut sums = vec![(CompensatedSum::new(), CompensatedSum::new(), 0usize); n_clusters * n_models];
    for t in tables {
        if (t.n_clusters, t.n_models) != (n_clusters, n_models) {
            return Err(Error::Shape("client stat table shape differs".into()));
        }
        for (k, m, c) in t.occupied() {
            let s = &mut sums[k * n_models + m];
            s.0.add(c.count as f64 * c.accuracy);
            s.1.add(c.count as f64 * c.cost);
            s.2 += c.count;
        }
    }
    let cells = sums
        .into_iter()
        .map(|(a, c, n)| {
            (n > 0).then(|| CellStat {
                accuracy: a.value() / n as f64,
                cost: c.value() / n as f64,
                count: n,
            })
        })
        .collect();
    Ok(StatTable {
        n_clusters,
        n_models,
        cells,
    })
}

/// A trained K-means router.
#[derive(Clone, Debug, PartialEq)]
pub struct KmeansRouterState {
    pub centroids: Vec<Vec<f64>>,
    pub stats: StatTable,
    /// Per-model means over every cluster, used for unobserved cells.
    pub fallback: Vec<Option<CellStat>>,
}

impl KmeansRouterState {
    pub fn new(centroids: Vec<Vec<f64>>, stats: StatTable) -> Result<Self> {
        if centroids.is_empty() || centroids.len() != stats.n_clusters {
            return Err(Error::Shape(format!(
                "{} centroids with a {}-cluster table",
                centroids.len(),
                stats.n_clusters
            )));
        }
        let fallback = stats.model_means();
        Ok(Self {
            centroids,
            stats,
            fallback,
        })
    }

    /// Builds statistics for `clients` against fixed centers.
    pub fn from_centroids(centroids: Vec<Vec<f64>>, clients: &[ClientDataset], n_models: usize) -> Result<Self> {
        let tables: Vec<StatTable> = clients
            .par_iter()
            .map(|c| client_cell_stats(&centroids, &c.train, n_models))
            .collect::<Result<_>>()?;
        let stats = merge_tables(&tables, centroids.len(), n_models)?;
        Self::new(centroids, stats)
    }

    pub fn n_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn d_emb(&self) -> usize {
        self.centroids[0].len()
    }

    /// Merges new statistics into the existing ones.
    pub fn merged_with(&self, extra: &StatTable) -> Result<Self> {
        Self::new(self.centroids.clone(), self.stats.merge(extra)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&KmeansCheckpoint::from(self))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: KmeansCheckpoint = serde_json::from_str(&text)?;
        ckpt.into_state()
    }
}

/// Nearest global center; ties go to the lowest index.
pub fn assign_cluster(state: &KmeansRouterState, x: &[f64]) -> usize {
    nearest(&state.centroids, x).0
}

impl Estimator for KmeansRouterState {
    fn n_models(&self) -> usize {
        self.stats.n_models
    }

    fn estimate(&self, x: &[f64]) -> Result<Vec<Option<Estimate>>> {
        if x.len() != self.d_emb() {
            return Err(Error::Dimension {
                expected: self.d_emb(),
                found: x.len(),
            });
        }
        let k = assign_cluster(self, x);
        let out: Vec<Option<Estimate>> = (0..self.stats.n_models)
            .map(|m| {
                self.stats.get(k, m).or(self.fallback[m]).map(|c| Estimate {
                    accuracy: c.accuracy,
                    cost: c.cost,
                })
            })
            .collect();
        if out.iter().all(Option::is_none) {
            return Err(Error::UntrainedRouter);
        }
        Ok(out)
    }
}

/// `accuracy - lambda * cost` from the query's cluster, falling back to the
/// model's global mean; absent for a model observed nowhere.
pub fn cluster_utilities(state: &KmeansRouterState, x: &[f64], lambda: f64) -> Result<Vec<Option<f64>>> {
    let est = state.estimate(x)?;
    Ok(crate::eval::utilities(&est, lambda))
}

pub const KMEANS_CHECKPOINT_FORMAT: &str = "fedroute-kmeans";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SparseCell {
    k: usize,
    m: usize,
    accuracy: f64,
    cost: f64,
    count: usize,
}

/// On-disk form: centers plus the sparse observed-cell table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct KmeansCheckpoint {
    format: String,
    version: u32,
    n_models: usize,
    centroids: Vec<Vec<f64>>,
    cells: Vec<SparseCell>,
}

impl From<&KmeansRouterState> for KmeansCheckpoint {
    fn from(s: &KmeansRouterState) -> Self {
        Self {
            format: KMEANS_CHECKPOINT_FORMAT.into(),
            version: crate::mlp::CHECKPOINT_VERSION,
            n_models: s.stats.n_models,
            centroids: s.centroids.clone(),
            cells: s
                .stats
                .occupied()
                .map(|(k, m, c)| SparseCell {
                    k,
                    m,
                    accuracy: c.accuracy,
                    cost: c.cost,
                    count: c.count,
                })
                .collect(),
        }
    }
}

impl KmeansCheckpoint {
    fn into_state(self) -> Result<KmeansRouterState> {
        if self.format != KMEANS_CHECKPOINT_FORMAT {
            return Err(Error::InvalidInput(format!("not a K-means router state: `{}`", self.format)));
        }
        let mut stats = StatTable::empty(self.centroids.len(), self.n_models);
        for c in self.cells {
            if c.k >= stats.n_clusters || c.m >= stats.n_models {
                return Err(Error::Shape(format!("cell ({}, {}) outside the table", c.k, c.m)));
            }
            stats.set(
                c.k,
                c.m,
                Some(CellStat {
                    accuracy: c.accuracy,
                    cost: c.cost,
                    count: c.count,
                }),
            );
        }
        KmeansRouterState::new(self.centroids, stats)
    }
}

/// Diagnostics of a federated build.
#[derive(Clone, Debug, PartialEq)]
pub struct KmeansBuild {
    pub state: KmeansRouterState,
    pub summaries: Vec<Option<LocalCentroidSummary>>,
    pub server_inertia: f64,
}

/// The full federated pipeline over `clients`' training records.
pub fn build_federated_kmeans(clients: &[ClientDataset], n_models: usize, config: &KmeansConfig, seed: u64) -> Result<KmeansBuild> {
    config.validate()?;
    if clients.iter().all(|c| c.train.is_empty()) {
        return Err(Error::InvalidInput("no client has training data".into()));
    }
    let summaries: Vec<Option<LocalCentroidSummary>> = clients
        .par_iter()
        .enumerate()
        .map(|(i, c)| local_summary(&c.train, config.k_local, config, derive_seed(seed, &[LOCAL_STREAM, i as u64])))
        .collect::<Result<_>>()?;
    let mut points: Vec<&[f64]> = Vec::new();
    let mut weights = Vec::new();
    for s in summaries.iter().flatten() {
        for (c, &n) in s.centroids.iter().zip(&s.sizes) {
            if n > 0 {
                points.push(c);
                weights.push(n as f64);
            }
        }
    }
    let k = config.k_global.min(points.len());
    let server = lloyd_kmeans(&points, &weights, k, config.n_init, config.max_iter, derive_seed(seed, &[SERVER_STREAM]))?;
    let state = KmeansRouterState::from_centroids(server.centroids, clients, n_models)?;
    Ok(KmeansBuild {
        state,
        summaries,
        server_inertia: server.inertia,
    })
}

/// Single-stage K-means on pooled records, the centralized and
/// client-local baseline.
pub fn build_pooled_kmeans(records: &[EvaluationRecord], n_models: usize, config: &KmeansConfig, seed: u64) -> Result<KmeansRouterState> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidInput("no training records".into()));
    }
    let points: Vec<&[f64]> = records.iter().map(|r| r.embedding.as_slice()).collect();
    let weights = vec![1.0; points.len()];
    let k = config.k_global.min(points.len());
    let r = lloyd_kmeans(&points, &weights, k, config.n_init, config.max_iter, derive_seed(seed, &[SERVER_STREAM]))?;
    let stats = client_cell_stats(&r.centroids, records, n_models)?;
    KmeansRouterState::new(r.centroids, stats)
}

//! Build the K-means router from per-client centroid summaries and compare
//! it with K-means run on the pooled data.

use fedroute::eval::{sweep_lambda, LambdaGrid};
use fedroute::ingestion::{generate_synthetic, OracleConfig, SyntheticOracle};
use fedroute::kmeans::{assign_cluster, build_federated_kmeans, build_pooled_kmeans, KmeansConfig};
use fedroute::partition::{partition_corpus, PartitionConfig};
use fedroute::Result;

fn main() -> Result<()> {
    let oracle_cfg = OracleConfig::default();
    let oracle = SyntheticOracle::random(&oracle_cfg, 21)?;
    let (corpus, _) = generate_synthetic(&oracle, 4_000, oracle_cfg.n_tasks, 22);
    let part = partition_corpus(&corpus, oracle.n_models(), &PartitionConfig { n_clients: 8, seed: 23, ..PartitionConfig::default() })?;

    let cfg = KmeansConfig::default();
    let build = build_federated_kmeans(&part.clients, oracle.n_models(), &cfg, 24)?;
    let sent: usize = build.summaries.iter().flatten().map(|s| s.centroids.len()).sum();
    println!("{sent} local centroids merged into {} global ones (server inertia {:.2})", build.state.n_clusters(), build.server_inertia);
    println!("{} occupied (cluster, model) cells", build.state.stats.occupied().count());

    let pooled_records: Vec<_> = part.clients.iter().flat_map(|c| c.train.iter().cloned()).collect();
    let pooled = build_pooled_kmeans(&pooled_records, oracle.n_models(), &cfg, 24)?;

    let test: Vec<_> = part.clients.iter().flat_map(|c| c.test.iter().cloned()).collect();
    let q = &test[0];
    println!("first test query falls in cluster {}", assign_cluster(&build.state, &q.embedding));
    let grid = LambdaGrid::default();
    println!("federated AUC {:.4}", sweep_lambda(&build.state, &test, &grid)?.auc);
    println!("pooled AUC    {:.4}", sweep_lambda(&pooled, &test, &grid)?.auc);
    Ok(())
}

//! Split a corpus across clients with Dirichlet task skew and per-client
//! model logging, then print how skewed each client ended up.

use fedroute::ingestion::{generate_synthetic, OracleConfig, SyntheticOracle};
use fedroute::partition::{partition_corpus, PartitionConfig};
use fedroute::Result;

fn main() -> Result<()> {
    let oracle_cfg = OracleConfig::default();
    let oracle = SyntheticOracle::random(&oracle_cfg, 1)?;
    let (corpus, _) = generate_synthetic(&oracle, 3_000, oracle_cfg.n_tasks, 2);

    for alpha in [0.1, 1.0, 100.0] {
        let cfg = PartitionConfig {
            n_clients: 6,
            alpha_query: alpha,
            seed: 3,
            ..PartitionConfig::default()
        };
        let part = partition_corpus(&corpus, oracle.n_models(), &cfg)?;
        println!("alpha_query {alpha}");
        for (c, client) in part.clients.iter().enumerate() {
            let mut tasks = std::collections::BTreeMap::new();
            for r in &client.train {
                *tasks.entry(r.task.clone().unwrap_or_default()).or_insert(0usize) += 1;
            }
            let top = tasks.values().max().copied().unwrap_or(0);
            let share = if client.train.is_empty() { 0.0 } else { top as f64 / client.train.len() as f64 };
            let props: Vec<String> = part.model_proportions[c].iter().map(|p| format!("{p:.2}")).collect();
            println!(
                "  client {c}: {:>4} train {:>4} test, top task share {share:.2}, model mix [{}]",
                client.train.len(),
                client.test.len(),
                props.join(" ")
            );
        }
    }
    Ok(())
}

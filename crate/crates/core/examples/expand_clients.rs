//! Let new clients join after base training. The MLP continues FedAvg on
//! them with a distillation pull towards the frozen base router; K-means
//! just merges their statistics.

use fedroute::experiment::{expand_clients, prepare_data, train_routers, DataSource, ExperimentConfig};
use fedroute::ingestion::OracleConfig;
use fedroute::Result;

fn main() -> Result<()> {
    let mut cfg = ExperimentConfig {
        seed: 61,
        data: DataSource::Synthetic { n_queries: 4_000, oracle: OracleConfig::default() },
        ..ExperimentConfig::default()
    };
    cfg.federation.n_rounds = 20;
    cfg.mlp.hidden_widths = vec![64];
    cfg.modes.local_baselines = false;
    cfg.modes.centralized = false;
    cfg.modes.expand_clients = true;
    cfg.expansion.new_clients = 3;
    cfg.expansion.client_rounds = 10;
    let data = prepare_data(&cfg)?;
    println!("base clients {:?}, joining later {:?}", data.base_clients, data.new_clients);
    let routers = train_routers(&cfg, &data)?;

    for weight in [0.0, 1.0, 10.0] {
        cfg.expansion.distillation_weight = weight;
        let report = expand_clients(&cfg, &data, &routers)?;
        println!("distillation weight {weight}");
        for (family, stage, set, auc) in &report.auc {
            println!("  {family:>6} {stage:>6} {set:>11}  AUC {auc:.4}");
        }
    }
    Ok(())
}

//! Save both router kinds to versioned checkpoints, load them back, and
//! print the same summary the `inspect` subcommand shows.

use fedroute::experiment::{inspect, prepare_data, train_routers, DataSource, ExperimentConfig};
use fedroute::ingestion::OracleConfig;
use fedroute::kmeans::KmeansRouterState;
use fedroute::mlp::MlpCheckpoint;


fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = ExperimentConfig {
        seed: 71,
        data: DataSource::Synthetic { n_queries: 2_000, oracle: OracleConfig::default() },
        ..ExperimentConfig::default()
    };
    cfg.federation.n_rounds = 5;
    cfg.mlp.hidden_widths = vec![32];
    cfg.modes.local_baselines = false;
    cfg.modes.centralized = false;
    let data = prepare_data(&cfg)?;
    let routers = train_routers(&cfg, &data)?;

    let dir = std::env::temp_dir().join("fedroute-checkpoints");
    std::fs::create_dir_all(&dir)?;
    let mlp_path = dir.join("mlp.json");
    let kmeans_path = dir.join("kmeans.json");
    let mlp = routers.mlp.expect("mlp").federated;
    let kmeans = routers.kmeans.expect("kmeans").federated;
    MlpCheckpoint::new(mlp.clone()).save(&mlp_path)?;
    kmeans.save(&kmeans_path)?;

    assert_eq!(MlpCheckpoint::load(&mlp_path)?.router, mlp);
    assert_eq!(KmeansRouterState::load(&kmeans_path)?, kmeans);
    println!("{}", inspect(&mlp_path)?);
    println!("{}", inspect(&kmeans_path)?);
    Ok(())
}

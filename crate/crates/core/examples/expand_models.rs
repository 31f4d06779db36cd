//! Add a model to trained routers without retraining them: a new head on
//! the frozen MLP trunk, and new per-cluster statistics for K-means.

use fedroute::experiment::{expand_models, prepare_data, train_routers, DataSource, ExperimentConfig};
use fedroute::ingestion::OracleConfig;
use fedroute::Result;

fn main() -> Result<()> {
    let mut cfg = ExperimentConfig {
        seed: 51,
        data: DataSource::Synthetic { n_queries: 4_000, oracle: OracleConfig::default() },
        ..ExperimentConfig::default()
    };
    cfg.federation.n_rounds = 30;
    cfg.mlp.hidden_widths = vec![64];
    cfg.modes.local_baselines = false;
    cfg.modes.centralized = false;
    cfg.modes.expand_models = true;
    cfg.expansion.withheld_models = 1;
    let data = prepare_data(&cfg)?;
    println!(
        "base routers know {} of {} models; {} is added later",
        data.n_base_models,
        data.model_names.len(),
        data.model_names[data.n_base_models]
    );
    let routers = train_routers(&cfg, &data)?;
    let report = expand_models(&cfg, &data, &routers)?;
    for family in ["mlp", "kmeans"] {
        println!(
            "{family}: AUC before {:.4}, after {:.4}",
            report.auc_of(family, "before").unwrap_or(f64::NAN),
            report.auc_of(family, "after").unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

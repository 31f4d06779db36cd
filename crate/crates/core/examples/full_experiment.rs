//! Run every stage from one config and write all artifacts to a directory.
//! Pass a TOML config path as the first argument, or run the built-in one.

use std::path::PathBuf;

use fedroute::experiment::{run_experiment, DataSource, ExperimentConfig};
use fedroute::ingestion::OracleConfig;
use fedroute::Result;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let cfg = match args.next() {
        Some(path) => ExperimentConfig::load(&PathBuf::from(path))?,
        None => {
            let mut cfg = ExperimentConfig {
                seed: 81,
                data: DataSource::Synthetic { n_queries: 3_000, oracle: OracleConfig::default() },
                ..ExperimentConfig::default()
            };
            cfg.federation.n_rounds = 15;
            cfg.mlp.hidden_widths = vec![64];
            cfg.modes.personalization = true;
            cfg.modes.expand_models = true;
            cfg.modes.expand_clients = true;
            cfg
        }
    };
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("fedroute-experiment"));
    let report = run_experiment(&cfg, Some(&out))?;
    println!("{}", report.eval.auc_csv());
    println!("artifacts in {}", out.display());
    Ok(())
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedroute::experiment::{self, files, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fedroute", version, about = "Federated accuracy/cost LLM routers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Every enabled stage in one go.
    Run(Common),
    /// Build or load the corpus and split it across clients.
    Partition(Common),
    /// Train federated routers and baselines.
    Train(Common),
    /// Frontier curves, AUC and suboptimality.
    Eval(Common),
    /// Blend federated and local routers per client.
    Personalize(Common),
    /// Add the withheld models to trained routers.
    ExpandModels(Common),
    /// Onboard the held-back clients.
    ExpandClients(Common),
    /// Print metadata of an artifact.
    Inspect {
        path: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults to the frozen copy in --out, if any.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn config(&self) -> fedroute::Result<ExperimentConfig> {
        let frozen = self.out.join(files::CONFIG);
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None if frozen.exists() => ExperimentConfig::load(&frozen)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn setup(&self) -> fedroute::Result<ExperimentConfig> {
        if let Some(t) = self.threads {
            rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build_global()
                .map_err(|e| fedroute::Error::InvalidInput(format!("thread pool: {e}")))?;
        }
        self.config()
    }
}

fn report(out: &Path, what: &str) {
    log::info!("{what} written to {}", out.display());
}

fn dispatch(cmd: Command) -> fedroute::Result<()> {
    match cmd {
        Command::Run(c) => {
            let cfg = c.setup()?;
            let r = experiment::run_experiment(&cfg, Some(&c.out))?;
            print!("{}", r.eval.auc_csv());
            report(&c.out, "all artifacts");
        }
        Command::Partition(c) => {
            experiment::cmd_partition(&c.setup()?, &c.out)?;
            report(&c.out, "corpus and partition");
        }
        Command::Train(c) => {
            experiment::cmd_train(&c.setup()?, &c.out)?;
            report(&c.out, "checkpoints");
        }
        Command::Eval(c) => {
            let r = experiment::cmd_eval(&c.setup()?, &c.out)?;
            print!("{}", r.auc_csv());
        }
        Command::Personalize(c) => {
            let r = experiment::cmd_personalize(&c.setup()?, &c.out)?;
            print!("{}", r.eval.auc_csv());
        }
        Command::ExpandModels(c) => {
            let r = experiment::cmd_expand_models(&c.setup()?, &c.out)?;
            for (family, stage, auc) in r.auc {
                println!("{family},{stage},{auc}");
            }
        }
        Command::ExpandClients(c) => {
            let r = experiment::cmd_expand_clients(&c.setup()?, &c.out)?;
            for (family, stage, set, auc) in r.auc {
                println!("{family},{stage},{set},{auc}");
            }
        }
        Command::Inspect { path } => print!("{}", experiment::inspect(&path)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

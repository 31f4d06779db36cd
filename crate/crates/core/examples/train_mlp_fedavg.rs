//! Train the MLP router with FedAvg and compare with a client trained alone.

use fedroute::eval::{sweep_lambda, LambdaGrid};
use fedroute::fedavg::{run_federated_training, run_local_training, FederationConfig};
use fedroute::ingestion::{generate_synthetic, OracleConfig, SyntheticOracle};
use fedroute::mlp::{MlpArchitecture, MlpRouter};
use fedroute::partition::{partition_corpus, PartitionConfig};
use fedroute::Result;

fn main() -> Result<()> {
    let oracle_cfg = OracleConfig::default();
    let oracle = SyntheticOracle::random(&oracle_cfg, 11)?;
    let (corpus, _) = generate_synthetic(&oracle, 4_000, oracle_cfg.n_tasks, 12);
    let part = partition_corpus(&corpus, oracle.n_models(), &PartitionConfig { n_clients: 5, seed: 13, ..PartitionConfig::default() })?;

    let arch = MlpArchitecture {
        d_emb: oracle.d_emb(),
        n_models: oracle.n_models(),
        hidden_widths: vec![64, 64],
        dropout: 0.1,
    };
    let fed = FederationConfig { n_rounds: 30, seed: 14, ..FederationConfig::default() };
    let (params, trace) = run_federated_training(&part.clients, &arch, &fed, oracle.c_max)?;
    println!("initial loss {:.4}", trace.initial_loss);
    for r in trace.rounds.iter().step_by(5) {
        let global = r.global_loss.unwrap_or(f64::NAN);
        println!("round {:>2}  participants {:?}  participant loss {:.4}  global loss {global:.4}", r.round, r.participants, r.participant_loss);
    }

    let test: Vec<_> = part.clients.iter().flat_map(|c| c.test.iter().cloned()).collect();
    let grid = LambdaGrid::default();
    let federated = MlpRouter::new(params, oracle.c_max);
    let alone = MlpRouter::new(run_local_training(&part.clients[0].train, &arch, &fed, oracle.c_max)?, oracle.c_max);
    println!("federated AUC {:.4}", sweep_lambda(&federated, &test, &grid)?.auc);
    println!("client-0 alone AUC {:.4}", sweep_lambda(&alone, &test, &grid)?.auc);
    Ok(())
}

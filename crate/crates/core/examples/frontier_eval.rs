//! Sweep the accuracy/cost trade-off for a few policies and report the
//! normalized area under each frontier plus suboptimality against the oracle.

use fedroute::eval::{evaluate_policy, suboptimality, sweep_lambda, EstimatorPolicy, LambdaGrid, OraclePolicy};
use fedroute::ingestion::{generate_synthetic, OracleConfig, SyntheticOracle};
use fedroute::kmeans::{build_pooled_kmeans, KmeansConfig};
use fedroute::Result;

fn main() -> Result<()> {
    let oracle_cfg = OracleConfig::default();
    let oracle = SyntheticOracle::random(&oracle_cfg, 31)?;
    let (train, _) = generate_synthetic(&oracle, 3_000, oracle_cfg.n_tasks, 32);
    let (test, _) = generate_synthetic(&oracle, 1_000, oracle_cfg.n_tasks, 33);

    // Log each training query on one model, round robin.
    let logged: Vec<_> = train.iter().enumerate().map(|(i, q)| q.log(i % oracle.n_models())).collect::<Result<_>>()?;
    let router = build_pooled_kmeans(&logged, oracle.n_models(), &KmeansConfig::default(), 34)?;

    let grid = LambdaGrid::default();
    let curve = sweep_lambda(&router, &test, &grid)?;
    let truth = sweep_lambda(&oracle, &test, &grid)?;
    println!("kmeans AUC {:.4}, true-utility AUC {:.4}", curve.auc, truth.auc);
    for p in curve.points.iter().step_by(20) {
        println!("  lambda {:>10.3e}  accuracy {:.3}  cost {:.3}", p.lambda, p.mean_accuracy, p.mean_cost);
    }

    let queries: Vec<&[f64]> = test.iter().map(|q| q.embedding.as_slice()).collect();
    for lambda in [0.1, 1.0, 10.0] {
        let out = evaluate_policy(&EstimatorPolicy(&router), &test, lambda)?;
        let best = evaluate_policy(&OraclePolicy(&oracle), &test, lambda)?;
        let gap = suboptimality(&EstimatorPolicy(&router), &oracle, &queries, lambda)?;
        println!(
            "lambda {lambda:>4}: router acc {:.3} cost {:.3} | oracle acc {:.3} cost {:.3} | suboptimality {gap:.4}",
            out.mean_accuracy, out.mean_cost, best.mean_accuracy, best.mean_cost
        );
    }
    Ok(())
}

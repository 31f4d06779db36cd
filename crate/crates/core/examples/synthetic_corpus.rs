//! Generate a synthetic corpus, write it as CSV, read it back and validate it.

use fedroute::ingestion::{generate_synthetic, oracle_best_model, save_full_corpus, load_full_corpus, CorpusFormat, OracleConfig, SyntheticOracle};


fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = OracleConfig::default();
    let oracle = SyntheticOracle::random(&config, 7)?;
    let (corpus, _) = generate_synthetic(&oracle, 500, config.n_tasks, 8);
    let pool = oracle.model_pool()?;

    let dir = std::env::temp_dir().join("fedroute-synthetic-corpus");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("corpus.csv");
    save_full_corpus(&path, &corpus, &pool, oracle.d_emb())?;
    let (back, manifest) = load_full_corpus(&path, CorpusFormat::default())?;
    println!("wrote {} queries x {} models to {}", back.len(), manifest.model_pool.len(), path.display());

    for (m, name) in pool.names().iter().enumerate() {
        let mean_acc = corpus.iter().map(|q| q.accuracy[m]).sum::<f64>() / corpus.len() as f64;
        println!("{name:>10}  base cost {:.3}  mean accuracy {mean_acc:.3}", oracle.true_cost(m));
    }
    for lambda in [0.0, 1.0, 10.0] {
        let picks: Vec<usize> = corpus.iter().map(|q| oracle_best_model(&oracle, &q.embedding, lambda)).collect();
        let mut counts = vec![0usize; pool.len()];
        for p in picks {
            counts[p] += 1;
        }
        println!("oracle choices at lambda {lambda}: {counts:?}");
    }
    Ok(())
}

//! Run every stage on MovieLens-100k fold 0 with the mock model and embedder, twice.
//! The second run reuses every cached artifact.
//!
//! Run from the repository root: `cargo run --release --example run_pipeline -- [config.toml]`

use std::time::Instant;

use hybrec::pipeline::{run_pipeline, RunConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(path.as_ref())?,
        None => {
            let mut cfg = RunConfig { run_folds: vec![0], ..RunConfig::default() };
            cfg.gat.max_epochs = 5;
            cfg.rerank.max_users = 100;
            cfg
        }
    };
    cfg.artifacts_dir = tempfile::tempdir()?.keep();
    for attempt in 1..=2 {
        let t = Instant::now();
        let outcome = run_pipeline(&cfg, false)?;
        let reused = outcome.stages.iter().filter(|s| s.skipped).count();
        println!("run {attempt}: {} built, {reused} reused in {:.1?}", outcome.stages.len() - reused, t.elapsed());
        if attempt == 2 {
            print!("{}", outcome.report.expect("evaluate ran").to_markdown());
        }
    }
    println!("artifacts in {}", cfg.artifacts_dir.display());
    Ok(())
}

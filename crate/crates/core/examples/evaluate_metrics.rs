//! Score rankings at k and render a cross-fold report.
//!
//! Run with `cargo run --example evaluate_metrics`

use std::collections::{BTreeMap, BTreeSet};

use hybrec::eval::{evaluate_run, metrics_at_k, MetricsReport};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let relevant: BTreeSet<u32> = [3, 7, 9].into();
    let m = metrics_at_k(&[3, 1, 7, 2, 5], &relevant, 5)?;
    println!("P@5 {:.3}  R@5 {:.3}  NDCG@5 {:.3}  MAP@5 {:.3}", m.precision, m.recall, m.ndcg, m.map);

    let relevance: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::from([(1, [10, 11].into()), (2, [20].into()), (3, [30, 31].into())]);
    let cold: BTreeSet<u32> = [3].into();
    let mut report = MetricsReport::default();
    for fold in 0..3u32 {
        let good: BTreeMap<u32, Vec<u32>> = BTreeMap::from([
            (1, vec![10, 99, 11]),
            (2, vec![98, 20 + fold % 2 * 77]),
            (3, vec![30, 97]),
        ]);
        let weak: BTreeMap<u32, Vec<u32>> = BTreeMap::from([(1, vec![99, 98, 10]), (2, vec![97]), (3, vec![96, 31])]);
        report.add_run(fold as usize, "graph", &evaluate_run(&good, &relevance, 3, &cold)?);
        report.add_run(fold as usize, "popularity", &evaluate_run(&weak, &relevance, 3, &cold)?);
    }
    print!("{}", report.to_markdown());
    println!();
    print!("{}", report.to_csv());
    Ok(())
}

//! Ranking metrics at k and report aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::BipartiteGraph;
use crate::ingest::{RatingRecord, UserId};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("relevant set is empty")]
    EmptyRelevant,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("malformed report line {line}: {reason}")]
    BadReport { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub ndcg: f64,
    pub map: f64,
}

impl Metrics {
    fn add(&mut self, o: &Metrics) {
        self.precision += o.precision;
        self.recall += o.recall;
        self.ndcg += o.ndcg;
        self.map += o.map;
    }

    fn scale(&self, s: f64) -> Metrics {
        Metrics { precision: self.precision * s, recall: self.recall * s, ndcg: self.ndcg * s, map: self.map * s }
    }

    pub fn values(&self) -> [f64; 4] {
        [self.precision, self.recall, self.ndcg, self.map]
    }
}

/// Precision, recall, binary-gain NDCG and AP (normalized by `min(k, |rel|)`) of the first `k` items.
pub fn metrics_at_k(ranking: &[u32], relevant: &BTreeSet<u32>, k: usize) -> Result<Metrics, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if relevant.is_empty() {
        return Err(EvalError::EmptyRelevant);
    }
    let mut hits = 0usize;
    let mut dcg = 0.0;
    let mut ap = 0.0;
    for (r, item) in ranking.iter().take(k).enumerate() {
        if relevant.contains(item) {
            hits += 1;
            dcg += 1.0 / ((r + 2) as f64).log2();
            ap += hits as f64 / (r + 1) as f64;
        }
    }
    let ideal = k.min(relevant.len());
    let idcg: f64 = (0..ideal).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
    Ok(Metrics {
        precision: hits as f64 / k as f64,
        recall: hits as f64 / relevant.len() as f64,
        ndcg: dcg / idcg,
        map: ap / ideal as f64,
    })
}

/// Test items rated at least 4, minus anything the user already has as a train positive.
pub fn relevance_sets(test: &[RatingRecord], train: &[RatingRecord]) -> BTreeMap<UserId, BTreeSet<u32>> {
    let train_pos: BTreeSet<(u32, u32)> =
        train.iter().filter(|r| r.rating >= 4).map(|r| (r.user_id, r.item_id)).collect();
    let mut out: BTreeMap<UserId, BTreeSet<u32>> = BTreeMap::new();
    for r in test.iter().filter(|r| r.rating >= 4 && !train_pos.contains(&(r.user_id, r.item_id))) {
        out.entry(r.user_id).or_default().insert(r.item_id);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub metrics: Metrics,
    pub n_users: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub k: usize,
    pub all: SliceMetrics,
    /// `None` when no cold-start user has a relevant test item.
    pub cold_start: Option<SliceMetrics>,
}

/// Means over eligible users (at least one relevant item). Users without a ranking score zero.
pub fn evaluate_run(
    recs: &BTreeMap<UserId, Vec<u32>>,
    relevance: &BTreeMap<UserId, BTreeSet<u32>>,
    k: usize,
    cold_start_users: &BTreeSet<UserId>,
) -> Result<RunMetrics, EvalError> {
    let empty = Vec::new();
    let mut all = (Metrics::default(), 0usize);
    let mut cold = (Metrics::default(), 0usize);
    for (user, rel) in relevance {
        if rel.is_empty() {
            continue;
        }
        let m = metrics_at_k(recs.get(user).unwrap_or(&empty), rel, k)?;
        all.0.add(&m);
        all.1 += 1;
        if cold_start_users.contains(user) {
            cold.0.add(&m);
            cold.1 += 1;
        }
    }
    let mean = |(sum, n): (Metrics, usize)| SliceMetrics {
        metrics: if n == 0 { sum } else { sum.scale(1.0 / n as f64) },
        n_users: n,
    };
    Ok(RunMetrics { k, all: mean(all), cold_start: (cold.1 > 0).then(|| mean(cold)) })
}

/// Items by number of train positive edges, most popular first, ties by item id.
pub fn popularity_order(graph: &BipartiteGraph) -> Vec<(u32, f64)> {
    let mut out: Vec<(u32, f64)> =
        graph.pos_adj_item.iter().enumerate().map(|(i, adj)| (graph.item_ids[i], adj.len() as f64)).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

/// Popularity ranking for one user, skipping their train positives.
pub fn popularity_for_user(order: &[(u32, f64)], graph: &BipartiteGraph, user: UserId, n: usize) -> Vec<u32> {
    let u = graph.user_index(user);
    order
        .iter()
        .filter(|(item, _)| match (u, graph.item_index(*item)) {
            (Some(u), Some(i)) => !graph.is_positive(u, i),
            _ => true,
        })
        .take(n)
        .map(|x| x.0)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub fold: usize,
    pub slice: String,
    pub strategy: String,
    pub k: usize,
    pub metrics: Metrics,
    pub n_users: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
    /// Slices that had no eligible users, as `(fold, slice, strategy)`.
    pub empty_slices: Vec<(usize, String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub slice: String,
    pub strategy: String,
    pub folds: usize,
    pub mean: Metrics,
    /// Sample standard deviation across folds (0 for a single fold).
    pub std: Metrics,
}

impl MetricsReport {
    pub fn add_run(&mut self, fold: usize, strategy: &str, run: &RunMetrics) {
        self.rows.push(ReportRow {
            fold,
            slice: "all".into(),
            strategy: strategy.into(),
            k: run.k,
            metrics: run.all.metrics,
            n_users: run.all.n_users,
        });
        match &run.cold_start {
            Some(c) => self.rows.push(ReportRow {
                fold,
                slice: "cold_start".into(),
                strategy: strategy.into(),
                k: run.k,
                metrics: c.metrics,
                n_users: c.n_users,
            }),
            None => self.empty_slices.push((fold, "cold_start".into(), strategy.into())),
        }
    }

    pub fn merge(&mut self, other: MetricsReport) {
        self.rows.extend(other.rows);
        self.empty_slices.extend(other.empty_slices);
    }

    pub fn get(&self, fold: usize, slice: &str, strategy: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.fold == fold && r.slice == slice && r.strategy == strategy)
    }

    /// Mean and sample std per (slice, strategy), in first-appearance order.
    pub fn aggregate(&self) -> Vec<Aggregate> {
        let mut keys: Vec<(String, String)> = Vec::new();
        for r in &self.rows {
            let key = (r.slice.clone(), r.strategy.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        keys.into_iter()
            .map(|(slice, strategy)| {
                let vals: Vec<[f64; 4]> = self
                    .rows
                    .iter()
                    .filter(|r| r.slice == slice && r.strategy == strategy)
                    .map(|r| r.metrics.values())
                    .collect();
                let n = vals.len() as f64;
                let mut mean = [0.0; 4];
                let mut std = [0.0; 4];
                for j in 0..4 {
                    mean[j] = vals.iter().map(|v| v[j]).sum::<f64>() / n;
                    if vals.len() > 1 {
                        std[j] = (vals.iter().map(|v| (v[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                    }
                }
                let m = |a: [f64; 4]| Metrics { precision: a[0], recall: a[1], ndcg: a[2], map: a[3] };
                Aggregate { slice, strategy, folds: vals.len(), mean: m(mean), std: m(std) }
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("fold,slice,strategy,k,precision,recall,ndcg,map,n_users\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{}",
                r.fold, r.slice, r.strategy, r.k, r.metrics.precision, r.metrics.recall, r.metrics.ndcg, r.metrics.map, r.n_users
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, EvalError> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |reason: &str| EvalError::BadReport { line: n + 1, reason: reason.to_string() };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad("expected 9 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad("bad integer"));
            rows.push(ReportRow {
                fold: int(f[0])?,
                slice: f[1].to_string(),
                strategy: f[2].to_string(),
                k: int(f[3])?,
                metrics: Metrics { precision: num(f[4])?, recall: num(f[5])?, ndcg: num(f[6])?, map: num(f[7])? },
                n_users: int(f[8])?,
            });
        }
        Ok(Self { rows, empty_slices: Vec::new() })
    }

    pub fn to_markdown(&self) -> String {
        let k = self.rows.first().map_or(10, |r| r.k);
        let mut out = format!("# Evaluation summary (k = {k})\n\n");
        for slice in ["all", "cold_start"] {
            let aggs: Vec<Aggregate> = self.aggregate().into_iter().filter(|a| a.slice == slice).collect();
            let _ = writeln!(out, "## Slice: {slice}\n");
            if aggs.is_empty() {
                out.push_str("No eligible users in this slice.\n\n");
                continue;
            }
            let _ = writeln!(out, "| Method | Folds | Precision@{k} | Recall@{k} | NDCG@{k} | MAP@{k} |");
            out.push_str("|---|---|---|---|---|---|\n");
            for a in aggs {
                let cell = |m: f64, s: f64| format!("{m:.4} ± {s:.4}");
                let _ = writeln!(
                    out,
                    "| {} | {} | {} | {} | {} | {} |",
                    a.strategy,
                    a.folds,
                    cell(a.mean.precision, a.std.precision),
                    cell(a.mean.recall, a.std.recall),
                    cell(a.mean.ndcg, a.std.ndcg),
                    cell(a.mean.map, a.std.map)
                );
            }
            out.push('\n');
        }
        if !self.empty_slices.is_empty() {
            out.push_str("Omitted (no eligible users):\n\n");
            for (fold, slice, strategy) in &self.empty_slices {
                let _ = writeln!(out, "- fold {fold}, {slice}, {strategy}");
            }
        }
        out
    }
}

/// Writes `report.csv` and `report.md` into `dir`.
pub fn emit_report(report: &MetricsReport, dir: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.csv"), report.to_csv())?;
    fs::write(dir.join("report.md"), report.to_markdown())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(v: &[u32]) -> BTreeSet<u32> {
        v.iter().copied().collect()
    }

    #[test]
    fn worked_examples() {
        let m = metrics_at_k(&[1, 2, 3], &set(&[1, 3]), 3).unwrap();
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.recall, 1.0);
        assert!((m.map - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-12);
        let m = metrics_at_k(&[2, 1, 3], &set(&[1]), 3).unwrap();
        assert!((m.ndcg - 1.0 / 3f64.log2()).abs() < 1e-12);
        let m = metrics_at_k(&[7, 8, 9, 10], &set(&[7]), 10).unwrap();
        assert_eq!((m.precision, m.recall, m.ndcg, m.map), (0.1, 1.0, 1.0, 1.0));
        assert!(matches!(metrics_at_k(&[1], &set(&[]), 3), Err(EvalError::EmptyRelevant)));
    }

    #[test]
    fn perfect_ranking() {
        for n_rel in 1..15u32 {
            let rel: BTreeSet<u32> = (0..n_rel).collect();
            let ranking: Vec<u32> = (0..30).collect();
            let m = metrics_at_k(&ranking, &rel, 10).unwrap();
            let top = n_rel.min(10) as f64;
            assert!((m.precision - top / 10.0).abs() < 1e-12);
            assert!((m.recall - top / n_rel as f64).abs() < 1e-12);
            assert!((m.ndcg - 1.0).abs() < 1e-12 && (m.map - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn run_means_and_absent_cold_slice() {
        let recs = BTreeMap::from([(1, vec![5, 6]), (2, vec![7, 8])]);
        let rel = BTreeMap::from([(1, set(&[5])), (2, set(&[7])), (3, set(&[]))]);
        let run = evaluate_run(&recs, &rel, 10, &BTreeSet::new()).unwrap();
        assert_eq!(run.all.n_users, 2);
        assert_eq!(run.all.metrics.ndcg, 1.0);
        assert!(run.cold_start.is_none());
        let run = evaluate_run(&recs, &rel, 10, &BTreeSet::from([2])).unwrap();
        assert_eq!((run.all.n_users, run.cold_start.unwrap().n_users), (2, 1));
    }

    #[test]
    fn relevance_threshold() {
        let test = vec![RatingRecord::new(1, 1, 4, 0), RatingRecord::new(1, 2, 3, 0), RatingRecord::new(2, 3, 5, 0)];
        let rel = relevance_sets(&test, &[]);
        assert_eq!(rel[&1], set(&[1]));
        assert_eq!(rel[&2], set(&[3]));
    }

    #[test]
    fn report_rows_and_csv() {
        let mut report = MetricsReport::default();
        for fold in 0..5 {
            let m = Metrics { precision: 0.5, recall: 0.25 + fold as f64 * 0.01, ndcg: 1.0 / 3.0, map: 0.125 };
            let run = RunMetrics {
                k: 10,
                all: SliceMetrics { metrics: m, n_users: 100 },
                cold_start: Some(SliceMetrics { metrics: m, n_users: 9 }),
            };
            report.add_run(fold, "gat", &run);
        }
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 11);
        let back = MetricsReport::from_csv(&csv).unwrap();
        for (a, b) in report.rows.iter().zip(&back.rows) {
            for (x, y) in a.metrics.values().iter().zip(b.metrics.values()) {
                assert!((x - y).abs() < 5e-7);
            }
        }
        let agg = report.aggregate();
        assert_eq!(agg[0].mean.precision, 0.5);
        assert_eq!(agg[0].std.precision, 0.0);
        assert!(agg[0].std.recall > 0.0);

        let mut empty = MetricsReport::default();
        let m = Metrics::default();
        empty.add_run(0, "gat", &RunMetrics { k: 10, all: SliceMetrics { metrics: m, n_users: 3 }, cold_start: None });
        assert_eq!(empty.to_csv().lines().count(), 2);
        assert!(empty.to_markdown().contains("No eligible users"));
    }
}

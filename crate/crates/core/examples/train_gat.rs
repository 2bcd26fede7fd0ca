//! Train the graph attention recommender on one MovieLens-100k fold and print a user's top items.
//!
//! Run from the repository root: `cargo run --release --example train_gat -- [epochs]`

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use hybrec::embed::{embed_subjects, MockEmbedder, Provenance};
use hybrec::eval::{metrics_at_k, relevance_sets};
use hybrec::gat::{forward, full_scores, train_with, Adjacency, GatConfig, Mode, NodeFeatures};
use hybrec::graph::build_graph_with_nodes;
use hybrec::ingest::{load_item_metadata, make_folds, parse_movielens, MetadataSource, RatingFormat};
use hybrec::profiles::Subject;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(10);
    let data = Path::new("data/ml-100k");
    let mut ds = parse_movielens(&data.join("u.data"), RatingFormat::Tab100k)?;
    ds.attach_metadata(load_item_metadata(&ds.item_ids(), &MetadataSource::FixtureDir(data.join("fixtures")), &BTreeMap::new())?);
    let fold = make_folds(&ds, 5, 42)?.remove(0);
    let g = build_graph_with_nodes(&fold.train, &ds.user_ids, &ds.item_ids())?;

    // Title and genres stand in for generated profiles here.
    let mut texts: Vec<(Subject, String)> =
        ds.catalog.values().map(|m| (Subject::Item(m.item_id), format!("{} {}", m.title, m.genres.join(" ")))).collect();
    texts.extend(ds.user_ids.iter().map(|&u| (Subject::User(u), format!("user {u}"))));
    let store = embed_subjects(&texts, &MockEmbedder::new(0), Provenance::Mock, 4)?;
    println!("{} nodes, {} positive edges", g.n_users + g.n_items, g.n_edges());

    let cfg = GatConfig { max_epochs: epochs, ..GatConfig::default() };
    let t = Instant::now();
    let (params, log) = train_with(&g, &store, &cfg, |e| {
        println!("epoch {:>3}  train {:.4}  val {:.4}  {:.0?}", e.epoch, e.train_loss, e.validation_loss, t.elapsed())
    })?;
    println!("best epoch {} (val {:.4}, initial {:.4})", log.best_epoch, log.best_validation_loss, log.initial_validation_loss);

    let states = forward(&Adjacency::new(&g), &params, &NodeFeatures::from_store(&g, &store)?, &cfg, Mode::Eval)?;
    let relevance = relevance_sets(&fold.test, &fold.train);
    let (user, relevant) = relevance.iter().find(|(_, r)| !r.is_empty()).ok_or("no evaluable user")?;
    let ranked: Vec<u32> = full_scores(&states, &g, g.user_index(*user).unwrap()).iter().map(|&(i, _)| g.item_ids[i]).collect();
    println!("user {user} top 5:");
    for id in &ranked[..5] {
        let mark = if relevant.contains(id) { "*" } else { " " };
        println!(" {mark} {}", ds.catalog[id].title);
    }
    let m = metrics_at_k(&ranked, relevant, 10)?;
    println!("P@10 {:.3}  R@10 {:.3}  NDCG@10 {:.3}", m.precision, m.recall, m.ndcg);
    Ok(())
}

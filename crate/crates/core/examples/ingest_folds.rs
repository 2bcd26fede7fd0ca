//! Parse MovieLens-100k, attach fixture metadata and build cross-validation folds.
//!
//! Run from the repository root: `cargo run --example ingest_folds`

use std::collections::BTreeMap;
use std::path::Path;

use hybrec::ingest::{load_item_metadata, make_cold_start_slice, make_folds, parse_movielens, MetadataSource, RatingFormat};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = Path::new("data/ml-100k");
    let mut ds = parse_movielens(&data.join("u.data"), RatingFormat::Tab100k)?;
    let metas = load_item_metadata(&ds.item_ids(), &MetadataSource::FixtureDir(data.join("fixtures")), &BTreeMap::new())?;
    let missing = metas.values().filter(|m| m.missing).count();
    ds.attach_metadata(metas);
    println!("{} ratings, {} users, {} items ({missing} without metadata)", ds.ratings.len(), ds.user_ids.len(), ds.catalog.len());

    let folds = make_folds(&ds, 5, 42)?;
    for f in &folds {
        println!("fold {}: {} train, {} test, {} users excluded", f.fold_index, f.train.len(), f.test.len(), f.excluded_users.len());
    }
    let cold = make_cold_start_slice(&folds[0], 0.2, 9, 43)?;
    println!("fold 0 cold-start slice: {} users, train shrinks to {}", cold.cold_start_users.len(), cold.train.len());
    if let Some(meta) = ds.catalog.values().next() {
        println!("first item: {} [{}]", meta.title, meta.genres.join(", "));
    }
    Ok(())
}

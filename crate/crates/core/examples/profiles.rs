//! Generate item and user profiles through the deterministic mock model.
//!
//! Run from the repository root: `cargo run --example profiles`

use std::collections::BTreeMap;
use std::path::Path;

use hybrec::ingest::{load_item_metadata, parse_movielens, MetadataSource, RatingFormat};
use hybrec::llm::templates::PromptTemplates;
use hybrec::llm::{Gateway, ProviderConfig};
use hybrec::profiles::{generate_item_profiles, generate_user_profile, render_profile, seed_items};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = Path::new("data/ml-100k");
    let mut ds = parse_movielens(&data.join("u.data"), RatingFormat::Tab100k)?;
    ds.attach_metadata(load_item_metadata(&ds.item_ids(), &MetadataSource::FixtureDir(data.join("fixtures")), &BTreeMap::new())?);

    let gateway = Gateway::from_config(ProviderConfig::mock(7))?;
    let templates = PromptTemplates::default();

    let user = 1;
    let ratings = ds.ratings_by_user().remove(&user).unwrap_or_default();
    let (liked, disliked) = hybrec::profiles::select_seed_ratings(&ratings);
    let wanted: Vec<_> = liked.iter().chain(&disliked).filter_map(|r| ds.catalog.get(&r.item_id).cloned()).collect();
    let items = generate_item_profiles(&wanted, &gateway, &templates, 2);
    println!("{}", render_profile(&items[0].profile));

    let by_id: BTreeMap<u32, _> = wanted.iter().map(|m| m.item_id).zip(items.into_iter().map(|g| g.profile)).collect();
    let seeds = seed_items(&ratings, &ds.catalog, &by_id);
    let outcome = generate_user_profile(user, &seeds, &gateway, &templates);
    println!("{} of {} turns succeeded", outcome.turns_succeeded, outcome.turns_attempted);
    println!("{}", render_profile(&outcome.generated.profile));
    println!("model calls: {}", gateway.send_count());
    Ok(())
}

//! Embed profile texts with the mock embedder, persist the store and compare vectors.
//!
//! Run with `cargo run --example embed_store`

use hybrec::embed::{embed_subjects, store_load, store_save, MockEmbedder, Provenance};
use hybrec::profiles::{render_profile, Profile, Subject};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let profiles = [
        Profile::new(Subject::Item(1), "A heist that goes wrong.", ["crime", "heist", "ensemble cast"], "", ["gore"])?,
        Profile::new(Subject::Item(2), "A crew plans one last job.", ["crime", "heist", "slow burn"], "", Vec::<&str>::new())?,
        Profile::new(Subject::Item(3), "Two strangers fall in love in Paris.", ["romance", "paris"], "", Vec::<&str>::new())?,
        Profile::new(Subject::User(10), "Enjoys crime capers.", ["crime", "heist"], "", ["romance"])?,
    ];
    let texts: Vec<(Subject, String)> = profiles.iter().map(|p| (p.subject, render_profile(p))).collect();
    let store = embed_subjects(&texts, &MockEmbedder::new(0), Provenance::Mock, 2)?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("profiles.embs");
    store_save(&store, &path)?;
    let loaded = store_load(&path)?;
    assert_eq!(loaded, store);
    println!("{} vectors of dim {} saved to {}", loaded.len(), loaded.dim, path.display());

    let user = loaded.get(Subject::User(10)).unwrap();
    for id in 1..=3 {
        let item = loaded.get(Subject::Item(id)).unwrap();
        println!("cos(user 10, item {id}) = {:.3}", user.cosine(item));
    }
    Ok(())
}

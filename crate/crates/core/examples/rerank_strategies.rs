//! Re-rank one candidate pool with every strategy and fuse with the graph scores.
//!
//! Run with `cargo run --example rerank_strategies`

use std::collections::BTreeMap;

use hybrec::llm::templates::PromptTemplates;
use hybrec::llm::{Gateway, ProviderConfig};
use hybrec::profiles::{Profile, Subject};
use hybrec::rerank::{rerank_user, select_pool, Reranker, Strategy};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let user = Profile::new(
        Subject::User(1),
        "Watches mostly thrillers.",
        ["thriller", "twist ending", "crime", "noir"],
        "",
        ["musical"],
    )?;
    let catalog = [
        (101, vec!["comedy", "musical"]),
        (102, vec!["thriller", "crime"]),
        (103, vec!["drama"]),
        (104, vec!["noir", "crime", "twist ending", "thriller"]),
        (105, vec!["animation"]),
        (106, vec!["thriller"]),
        (107, vec!["romance", "musical"]),
        (108, vec!["crime", "noir"]),
        (109, vec!["war"]),
        (110, vec!["twist ending"]),
    ];
    let mut items = BTreeMap::new();
    let mut scored = Vec::new();
    for (n, (id, tags)) in catalog.iter().enumerate() {
        items.insert(*id, Profile::new(Subject::Item(*id), "A film.", tags, "", Vec::<&str>::new())?);
        // Graph scores: catalog order, best first.
        scored.push((*id, 1.0 - n as f64 * 0.05));
    }
    let pool = select_pool(1, &scored, 10)?;
    println!("graph order: {:?}", pool.ids());

    let gateway = Gateway::from_config(ProviderConfig::mock(1))?;
    let templates = PromptTemplates::default();
    let reranker = Reranker { gateway: &gateway, templates: &templates, seed: 1 };
    for strategy in Strategy::ALL {
        let before = gateway.structured_call_count();
        let out = rerank_user(&reranker, strategy, &pool, &user, &items, 0.8, 2)?;
        let fused: Vec<u32> = out.fused.iter().map(|f| f.item_id).collect();
        let calls = gateway.structured_call_count() - before;
        println!("{strategy:>9}: model {:?}", out.result.order);
        println!("{:>9}  fused {fused:?} ({calls} calls)", "");
        for e in &out.explanations {
            println!("{:>11} {}: {}", "", e.item_id, e.text);
        }
    }
    Ok(())
}

//! Deterministic offline stand-in for a chat model.
//!
//! The mock reads the delimited blocks of the prompt and answers like a
//! cooperative model would: profile stages template documents from the
//! metadata they see, rerank stages score candidates by tag overlap with the
//! user profile, and explanations name the strongest shared tag.

use std::collections::BTreeMap;
use std::hash::Hasher;

use siphasher::sip::SipHasher13;

use super::blocks::{field, parse_blocks, section_tags, Block};
use super::{AttemptError, ChatProvider, ChatRequest, ChatResponse, LlmError, Role};
use crate::profiles::doc::{normalize_tags, render_sections, ProfileSections};

pub const STAGES: &[&str] =
    &["profile_item", "profile_user", "rerank_prompt", "rerank_pair", "rerank_batch", "rerank_relevancy", "explain"];

/// Cap on the number of tags a mock user profile keeps per list.
const MAX_PROFILE_TAGS: usize = 24;

const STOPWORDS: &[&str] = &[
    "about", "after", "against", "another", "because", "before", "becomes", "between", "during", "everything",
    "himself", "herself", "however", "nothing", "something", "themselves", "through", "together", "without",
    "where", "which", "while", "their", "there", "these", "those", "would", "could", "should",
];

#[derive(Debug, Clone)]
pub struct MockProvider {
    seed: u64,
}

impl MockProvider {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl ChatProvider for MockProvider {
    fn id(&self) -> String {
        format!("mock:{}", self.seed)
    }

    fn send(&self, request: &ChatRequest) -> Result<String, AttemptError> {
        mock_complete(request, self.seed).map(|r| r.text).map_err(AttemptError::Fatal)
    }
}

/// Tag-overlap heuristic: `100 * (|U ∩ I| - |D ∩ I|) / |U ∪ I|`, clamped to [0, 100].
pub fn overlap_score(user_attrs: &[String], user_dislikes: &[String], item_attrs: &[String]) -> f64 {
    let shared = item_attrs.iter().filter(|t| user_attrs.contains(t)).count();
    let disliked = item_attrs.iter().filter(|t| user_dislikes.contains(t)).count();
    let union = user_attrs.len() + item_attrs.iter().filter(|t| !user_attrs.contains(t)).count();
    if union == 0 {
        return 0.0;
    }
    (100.0 * (shared as f64 - disliked as f64) / union as f64).clamp(0.0, 100.0)
}

/// The first user attribute (in profile order) that the item shares.
pub fn top_shared_tag<'a>(user_attrs: &'a [String], item_attrs: &[String]) -> Option<&'a String> {
    user_attrs.iter().find(|t| item_attrs.contains(t))
}

fn canonical_prompt(request: &ChatRequest) -> String {
    request
        .turns
        .iter()
        .find(|t| t.role == Role::User)
        .map(|t| t.text.lines().map(str::trim_end).collect::<Vec<_>>().join("\n"))
        .unwrap_or_default()
}

fn seeded_hash(seed: u64, text: &str) -> u64 {
    let mut h = SipHasher13::new_with_keys(seed, 0x6d6f636b);
    h.write(text.as_bytes());
    h.finish()
}

fn fence(lang: &str, body: &str) -> String {
    format!("```{lang}\n{}\n```", body.trim_end())
}

/// Attribute tags of a block body: its `## Attributes` bullets, else its `genres:` field.
fn block_tags(body: &str) -> Vec<String> {
    let tags = section_tags(body, "Attributes");
    if !tags.is_empty() || body.contains("## Attributes") {
        return tags;
    }
    field(body, "genres").map(|g| normalize_tags(g.split(','))).unwrap_or_default()
}

struct Scene {
    user_attrs: Vec<String>,
    user_dislikes: Vec<String>,
    items: Vec<(u32, Vec<String>)>,
}

fn scene(blocks: &[Block]) -> Scene {
    let user = blocks.iter().find(|b| b.kind == "user_profile");
    let user_attrs = user.map(|b| section_tags(&b.body, "Attributes")).unwrap_or_default();
    let user_dislikes = user.map(|b| section_tags(&b.body, "Dislikes")).unwrap_or_default();
    let items = blocks
        .iter()
        .filter(|b| b.kind == "item")
        .filter_map(|b| Some((b.id()?, block_tags(&b.body))))
        .collect();
    Scene { user_attrs, user_dislikes, items }
}

impl Scene {
    fn scored(&self) -> Vec<(u32, f64)> {
        self.items
            .iter()
            .map(|(id, tags)| (*id, overlap_score(&self.user_attrs, &self.user_dislikes, tags)))
            .collect()
    }

    fn ranked(&self) -> Vec<u32> {
        let mut s = self.scored();
        // Stable: equal scores keep the order the candidates were presented in.
        s.sort_by(|a, b| b.1.total_cmp(&a.1));
        s.into_iter().map(|(id, _)| id).collect()
    }
}

fn narrative_tags(overview: &str, seed: u64) -> Vec<String> {
    let mut words: Vec<String> = overview
        .split(|c: char| !c.is_alphabetic())
        .filter(|w| w.chars().count() >= 7)
        .map(str::to_lowercase)
        .filter(|w| !STOPWORDS.contains(&w.as_str()))
        .collect();
    words.sort();
    words.dedup();
    words.sort_by_key(|w| seeded_hash(seed, w));
    words.truncate(3);
    words
}

fn item_profile(blocks: &[Block], seed: u64) -> String {
    let meta = blocks.iter().find(|b| b.kind == "item_meta").map(|b| b.body.as_str()).unwrap_or_default();
    let title = field(meta, "title").filter(|t| !t.is_empty()).unwrap_or("Untitled");
    let genres: Vec<String> = field(meta, "genres").map(|g| normalize_tags(g.split(','))).unwrap_or_default();
    let overview = field(meta, "overview").unwrap_or_default();
    let mut attributes = genres.clone();
    attributes.extend(narrative_tags(overview, seed));
    let genre_phrase = if genres.is_empty() { "film".to_string() } else { format!("{} film", genres.join(" and ")) };
    let first_sentence = overview.split_inclusive(['.', '!', '?']).next().unwrap_or_default().trim();
    let sections = ProfileSections {
        overview: if first_sentence.is_empty() {
            format!("{title} is a {genre_phrase}.")
        } else {
            format!("{title}: {first_sentence}")
        },
        attributes: normalize_tags(attributes),
        description: if overview.is_empty() { format!("{title} is a {genre_phrase}.") } else { overview.to_string() },
        dislikes: Vec::new(),
    };
    fence("markdown", &render_sections(&sections))
}

/// Tags ordered by frequency in the batch, ties alphabetical.
fn batch_tags(items: &[&Block]) -> Vec<String> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for b in items {
        for t in block_tags(&b.body) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let mut tags: Vec<(String, usize)> = counts.into_iter().collect();
    tags.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    tags.into_iter().map(|(t, _)| t).collect()
}

fn user_profile(blocks: &[Block]) -> String {
    let prior = blocks.iter().find(|b| b.kind == "prior_profile").map(|b| b.body.as_str()).unwrap_or_default();
    let mut attributes = section_tags(prior, "Attributes");
    let mut dislikes = section_tags(prior, "Dislikes");
    let liked: Vec<&Block> =
        blocks.iter().filter(|b| b.kind == "item" && b.args.get(1).is_some_and(|p| p == "liked")).collect();
    let disliked: Vec<&Block> =
        blocks.iter().filter(|b| b.kind == "item" && b.args.get(1).is_some_and(|p| p == "disliked")).collect();
    for t in batch_tags(&liked) {
        if !attributes.contains(&t) {
            attributes.push(t);
        }
    }
    for t in batch_tags(&disliked) {
        if !attributes.contains(&t) && !dislikes.contains(&t) {
            dislikes.push(t);
        }
    }
    attributes.truncate(MAX_PROFILE_TAGS);
    dislikes.truncate(MAX_PROFILE_TAGS);
    let titles: Vec<&str> = liked.iter().filter_map(|b| field(&b.body, "title")).collect();
    let overview = if attributes.is_empty() {
        "Viewer with no clear favourite themes yet.".to_string()
    } else {
        format!("Enjoys {}.", attributes.iter().take(3).cloned().collect::<Vec<_>>().join(", "))
    };
    let prior_description = prior
        .split("## Description")
        .nth(1)
        .and_then(|rest| rest.split("##").next())
        .map(str::trim)
        .unwrap_or_default();
    let description = if titles.is_empty() {
        prior_description.to_string()
    } else if prior_description.is_empty() {
        format!("Rated highly: {}.", titles.join("; "))
    } else {
        format!("{prior_description} Rated highly: {}.", titles.join("; "))
    };
    let sections = ProfileSections { overview, attributes, description, dislikes };
    fence("markdown", &render_sections(&sections))
}

fn explain(scene: &Scene) -> String {
    let entries: Vec<serde_json::Value> = scene
        .items
        .iter()
        .map(|(id, tags)| match top_shared_tag(&scene.user_attrs, tags) {
            Some(tag) => serde_json::json!({
                "id": id,
                "text": format!("Recommended because you enjoy {tag}."),
                "tags": [tag],
            }),
            None => serde_json::json!({
                "id": id,
                "text": "Recommended from viewers with similar ratings.",
                "tags": [],
            }),
        })
        .collect();
    fence("json", &serde_json::Value::Array(entries).to_string())
}

/// Deterministic answer for `request`, a pure function of (stage, prompt, seed).
pub fn mock_complete(request: &ChatRequest, seed: u64) -> Result<ChatResponse, LlmError> {
    let prompt = canonical_prompt(request);
    let blocks = parse_blocks(&prompt);
    let text = match request.tag.as_str() {
        "profile_item" => item_profile(&blocks, seed),
        "profile_user" => user_profile(&blocks),
        "rerank_prompt" | "rerank_batch" => fence("json", &serde_json::to_string(&scene(&blocks).ranked()).unwrap()),
        "rerank_pair" => {
            let scored = scene(&blocks).scored();
            let choice = match scored.as_slice() {
                [a, b] if a.1 > b.1 => serde_json::json!(a.0),
                [a, b] if b.1 > a.1 => serde_json::json!(b.0),
                _ => serde_json::json!("tie"),
            };
            fence("json", &serde_json::json!({ "choice": choice }).to_string())
        }
        "rerank_relevancy" => {
            let entries: Vec<serde_json::Value> = scene(&blocks)
                .scored()
                .into_iter()
                .map(|(id, s)| serde_json::json!({ "id": id, "score": s.round() as u32 }))
                .collect();
            fence("json", &serde_json::Value::Array(entries).to_string())
        }
        "explain" => explain(&scene(&blocks)),
        other => return Err(LlmError::UnknownStage(other.to_string())),
    };
    Ok(ChatResponse { text, provider_id: format!("mock:{seed}"), latency_ms: 0 })
}

//! Schema-aligned item and user profiles.
//!
//! Item profiles come from one structured call per item. User profiles are
//! refined over sequential batches of five seed items (liked batches first),
//! each turn embedding the profile produced by the previous one.

pub mod doc;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::ingest::{ItemMeta, RatingRecord};
use crate::llm::blocks::render_block;
use crate::llm::templates::PromptTemplates;
use crate::llm::{ChatRequest, Expected, Gateway, LlmError, Structured};

pub use doc::{parse_profile, parse_sections, render_profile, Profile, ProfileError, ProfileSections, Subject};

/// Seed items per polarity for a user profile.
pub const SEEDS_PER_POLARITY: usize = 10;
pub const USER_BATCH: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedProfile {
    pub profile: Profile,
    /// Built locally without a model call (missing metadata or no usable history).
    pub minimal: bool,
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn item_meta_block(meta: &ItemMeta) -> String {
    let body = format!(
        "title: {}\ngenres: {}\noverview: {}",
        one_line(&meta.title),
        meta.genres.iter().map(|g| one_line(g)).collect::<Vec<_>>().join(", "),
        one_line(&meta.overview)
    );
    render_block("item_meta", &[&meta.item_id.to_string()], &body)
}

pub fn minimal_item_profile(meta: &ItemMeta) -> Profile {
    let title = if meta.title.trim().is_empty() { "unknown" } else { meta.title.as_str() };
    Profile::new(Subject::Item(meta.item_id), title, &meta.genres, "", Vec::<String>::new())
        .expect("title is non-empty")
}

/// One structured call per item. Source genres are always kept as attributes.
pub fn generate_item_profile(
    meta: &ItemMeta,
    gateway: &Gateway,
    templates: &PromptTemplates,
) -> Result<GeneratedProfile, LlmError> {
    if meta.missing {
        return Ok(GeneratedProfile { profile: minimal_item_profile(meta), minimal: true });
    }
    if meta.title.trim().is_empty() {
        return Err(LlmError::InvalidRequest(format!("item {} has no title", meta.item_id)));
    }
    let prompt = templates.render("profile_item", &[("item_meta", &item_meta_block(meta))]);
    let request = ChatRequest::single("profile_item", templates.system(), prompt);
    let Structured::Profile(sections) = gateway.complete_structured(&request, &Expected::ProfileDoc)? else {
        unreachable!("ProfileDoc yields Structured::Profile")
    };
    let attributes: Vec<String> = meta.genres.iter().cloned().chain(sections.attributes).collect();
    let profile = Profile::new(
        Subject::Item(meta.item_id),
        &sections.overview,
        attributes,
        &sections.description,
        sections.dislikes,
    )
    .map_err(|e| LlmError::MalformedOutput { attempts: 1, reason: e.to_string(), raw: String::new() })?;
    Ok(GeneratedProfile { profile, minimal: false })
}

/// Generates item profiles on up to `workers` threads; a failed item falls back to its minimal profile.
pub fn generate_item_profiles(
    metas: &[ItemMeta],
    gateway: &Gateway,
    templates: &PromptTemplates,
    workers: usize,
) -> Vec<GeneratedProfile> {
    crate::util::par_map(metas, workers, |meta| {
        generate_item_profile(meta, gateway, templates).unwrap_or_else(|e| {
            log::warn!("item {}: {e}; using minimal profile", meta.item_id);
            GeneratedProfile { profile: minimal_item_profile(meta), minimal: true }
        })
    })
}

/// A rated item offered to the user-profile dialogue.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedItem {
    pub meta: ItemMeta,
    /// Preferred over raw metadata when present.
    pub profile: Option<Profile>,
    pub rating: u8,
    pub timestamp: u64,
}

/// Up to ten highest-rated (4-5) and ten lowest-rated (1-2) ratings.
/// Equal ratings prefer the most recent; 3s are never selected.
pub fn select_seed_ratings(ratings: &[RatingRecord]) -> (Vec<RatingRecord>, Vec<RatingRecord>) {
    let mut liked: Vec<RatingRecord> = ratings.iter().copied().filter(|r| r.rating >= 4).collect();
    liked.sort_by(|a, b| b.rating.cmp(&a.rating).then(b.timestamp.cmp(&a.timestamp)).then(a.item_id.cmp(&b.item_id)));
    liked.truncate(SEEDS_PER_POLARITY);
    let mut disliked: Vec<RatingRecord> = ratings.iter().copied().filter(|r| r.rating <= 2).collect();
    disliked
        .sort_by(|a, b| a.rating.cmp(&b.rating).then(b.timestamp.cmp(&a.timestamp)).then(a.item_id.cmp(&b.item_id)));
    disliked.truncate(SEEDS_PER_POLARITY);
    (liked, disliked)
}

/// Builds seed items for a user from their ratings and whatever profiles/metadata are known.
pub fn seed_items(
    ratings: &[RatingRecord],
    catalog: &BTreeMap<u32, ItemMeta>,
    item_profiles: &BTreeMap<u32, Profile>,
) -> Vec<SeedItem> {
    let (liked, disliked) = select_seed_ratings(ratings);
    liked
        .into_iter()
        .chain(disliked)
        .map(|r| SeedItem {
            meta: catalog.get(&r.item_id).cloned().unwrap_or_else(|| ItemMeta::missing(r.item_id, "unknown")),
            profile: item_profiles.get(&r.item_id).cloned(),
            rating: r.rating,
            timestamp: r.timestamp,
        })
        .collect()
}

fn seed_block(seed: &SeedItem, polarity: &str) -> String {
    let mut body = format!("title: {}\nrating: {}\n", one_line(&seed.meta.title), seed.rating);
    match &seed.profile {
        Some(p) => body.push_str(&doc::render_sections(&p.sections())),
        None => body.push_str(&format!(
            "genres: {}\noverview: {}\n",
            seed.meta.genres.join(", "),
            one_line(&seed.meta.overview)
        )),
    }
    render_block("item", &[&seed.meta.item_id.to_string(), polarity], &body)
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserProfileOutcome {
    pub generated: GeneratedProfile,
    pub turns_attempted: usize,
    pub turns_succeeded: usize,
}

pub fn minimal_user_profile(user_id: u32) -> Profile {
    Profile::new(Subject::User(user_id), "Viewer with no rating history yet.", Vec::<String>::new(), "", Vec::<String>::new())
        .expect("non-empty overview")
}

/// Sequential batch refinement. Stops at the first turn that fails permanently
/// and returns the state reached by the last successful turn.
pub fn generate_user_profile(
    user_id: u32,
    seeds: &[SeedItem],
    gateway: &Gateway,
    templates: &PromptTemplates,
) -> UserProfileOutcome {
    let liked: Vec<&SeedItem> = seeds.iter().filter(|s| s.rating >= 4).collect();
    let disliked: Vec<&SeedItem> = seeds.iter().filter(|s| s.rating <= 2).collect();
    let batches = liked
        .chunks(USER_BATCH)
        .map(|c| ("liked", c))
        .chain(disliked.chunks(USER_BATCH).map(|c| ("disliked", c)));

    let mut current: Option<Profile> = None;
    let mut attempted = 0;
    let mut succeeded = 0;
    for (polarity, batch) in batches {
        attempted += 1;
        let prior = current
            .as_ref()
            .map(|p| doc::render_sections(&p.sections()))
            .unwrap_or_else(|| "(none yet)".to_string());
        let batch_block: String = batch.iter().map(|s| seed_block(s, polarity)).collect();
        let prompt = templates.render(
            "profile_user",
            &[("prior_profile", &render_block("prior_profile", &[], &prior)), ("batch_block", &batch_block)],
        );
        let request = ChatRequest::single("profile_user", templates.system(), prompt);
        let sections = match gateway.complete_structured(&request, &Expected::ProfileDoc) {
            Ok(Structured::Profile(s)) => s,
            Ok(_) => unreachable!("ProfileDoc yields Structured::Profile"),
            Err(e) => {
                log::warn!("user {user_id}: turn {attempted} failed: {e}");
                break;
            }
        };
        // Dislikes may only grow from low-rated batches.
        let dislikes = if polarity == "liked" {
            current.as_ref().map(|p| p.dislikes.clone()).unwrap_or_default()
        } else {
            sections.dislikes
        };
        match Profile::new(Subject::User(user_id), &sections.overview, sections.attributes, &sections.description, dislikes)
        {
            Ok(p) => {
                current = Some(p);
                succeeded += 1;
            }
            Err(e) => {
                log::warn!("user {user_id}: turn {attempted} unusable: {e}");
                break;
            }
        }
    }
    let generated = match current {
        Some(profile) => GeneratedProfile { profile, minimal: false },
        None => GeneratedProfile { profile: minimal_user_profile(user_id), minimal: true },
    };
    UserProfileOutcome { generated, turns_attempted: attempted, turns_succeeded: succeeded }
}

/// The unstructured baseline text: `"title. genres: a, b. overview"`.
pub fn render_integrated_text(meta: &ItemMeta) -> String {
    let mut out = format!("{}.", meta.title.trim());
    if !meta.genres.is_empty() {
        out.push_str(&format!(" genres: {}.", meta.genres.join(", ")));
    }
    let overview = meta.overview.trim();
    if !overview.is_empty() {
        out.push(' ');
        out.push_str(overview);
    }
    out
}

/// Flattens a profile into headline-free text for the integrated-text variant.
pub fn render_integrated_profile(p: &Profile) -> String {
    let mut out = p.overview.replace('\n', " ");
    if !p.attributes.is_empty() {
        out.push_str(&format!(" likes: {}.", p.attributes.join(", ")));
    }
    if !p.dislikes.is_empty() {
        out.push_str(&format!(" dislikes: {}.", p.dislikes.join(", ")));
    }
    if !p.description.is_empty() {
        out.push(' ');
        out.push_str(&p.description.replace('\n', " "));
    }
    out
}

pub fn save_profile(dir: &Path, p: &Profile) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(p.subject.file_name()), render_profile(p))
}

/// Loads every `item_*.md` / `user_*.md` file in `dir`.
pub fn load_profiles(dir: &Path) -> Result<Vec<Profile>, Box<dyn std::error::Error + Send + Sync>> {
    let mut names: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().to_string())
        .filter(|n| (n.starts_with("item_") || n.starts_with("user_")) && n.ends_with(".md"))
        .collect();
    names.sort();
    let mut out = Vec::with_capacity(names.len());
    for n in names {
        let text = fs::read_to_string(dir.join(&n))?;
        out.push(parse_profile(&text).map_err(|e| format!("{n}: {e}"))?);
    }
    Ok(out)
}

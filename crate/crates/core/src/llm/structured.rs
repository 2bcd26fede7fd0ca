//! Fenced-block extraction and validation of structured model answers.

use std::collections::BTreeSet;

use serde::Deserialize;

use crate::profiles::doc::{parse_sections, ProfileSections};

/// What a structured call must return.
#[derive(Debug, Clone, PartialEq)]
pub enum Expected {
    /// A permutation of exactly these ids.
    RankedIdList { candidates: Vec<u32> },
    /// One integer score in 0..=100 per candidate.
    IdScoreList { candidates: Vec<u32> },
    /// A four-section profile document.
    ProfileDoc,
    /// Which of two items fits better, or a tie.
    PairChoice { a: u32, b: u32 },
    /// One short explanation per candidate.
    ExplanationList { candidates: Vec<u32> },
}

impl Expected {
    pub fn format_hint(&self) -> &'static str {
        match self {
            Expected::RankedIdList { .. } => "a fenced ```json block holding a JSON array of every candidate id, best first",
            Expected::IdScoreList { .. } => {
                "a fenced ```json block holding a JSON array of {\"id\": <id>, \"score\": <0-100>} objects, one per candidate"
            }
            Expected::ProfileDoc => {
                "a fenced ```markdown block with the sections ## Overview, ## Attributes, ## Description, ## Dislikes"
            }
            Expected::PairChoice { .. } => "a fenced ```json block holding {\"choice\": <id>} or {\"choice\": \"tie\"}",
            Expected::ExplanationList { .. } => {
                "a fenced ```json block holding a JSON array of {\"id\": <id>, \"text\": <sentence>, \"tags\": [<tag>]} objects"
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct RawExplanation {
    pub id: u32,
    pub text: String,
    #[serde(default)]
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Structured {
    RankedIds(Vec<u32>),
    IdScores(Vec<(u32, u32)>),
    Profile(ProfileSections),
    /// `None` is a tie.
    Pair(Option<u32>),
    Explanations(Vec<RawExplanation>),
}

/// Body of the first fenced block. A bare language tag on the opening line is dropped.
pub fn extract_fenced(text: &str) -> Option<&str> {
    let start = text.find("```")? + 3;
    let rest = &text[start..];
    let end = rest.find("```")?;
    let inner = &rest[..end];
    if let Some((first, body)) = inner.split_once('\n') {
        let tag = first.trim();
        if !tag.is_empty() && tag.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Some(body);
        }
    }
    Some(inner)
}

fn same_set(ids: &[u32], candidates: &[u32]) -> Result<(), String> {
    let got: BTreeSet<u32> = ids.iter().copied().collect();
    let want: BTreeSet<u32> = candidates.iter().copied().collect();
    if got.len() != ids.len() {
        return Err("ids are repeated".into());
    }
    if let Some(extra) = got.difference(&want).next() {
        return Err(format!("id {extra} is not a candidate"));
    }
    if let Some(missing) = want.difference(&got).next() {
        return Err(format!("candidate {missing} is missing"));
    }
    Ok(())
}

#[derive(Deserialize)]
struct ScoreEntry {
    id: u32,
    score: i64,
}

#[derive(Deserialize)]
struct ChoiceEntry {
    choice: serde_json::Value,
}

/// Parses and validates a response; `Err` carries a reason suitable for a repair turn.
pub fn parse_structured(text: &str, expected: &Expected) -> Result<Structured, String> {
    let body = extract_fenced(text).ok_or("no fenced block found")?;
    match expected {
        Expected::RankedIdList { candidates } => {
            let ids: Vec<u32> = serde_json::from_str(body.trim()).map_err(|e| format!("not a JSON id array: {e}"))?;
            same_set(&ids, candidates)?;
            Ok(Structured::RankedIds(ids))
        }
        Expected::IdScoreList { candidates } => {
            let entries: Vec<ScoreEntry> =
                serde_json::from_str(body.trim()).map_err(|e| format!("not a JSON score array: {e}"))?;
            let ids: Vec<u32> = entries.iter().map(|e| e.id).collect();
            same_set(&ids, candidates)?;
            let mut out = Vec::with_capacity(entries.len());
            for e in entries {
                if !(0..=100).contains(&e.score) {
                    return Err(format!("score {} for id {} is outside 0-100", e.score, e.id));
                }
                out.push((e.id, e.score as u32));
            }
            Ok(Structured::IdScores(out))
        }
        Expected::ProfileDoc => {
            let sections = parse_sections(body).map_err(|e| e.to_string())?;
            if sections.overview.is_empty() {
                return Err("overview must not be empty".into());
            }
            Ok(Structured::Profile(sections))
        }
        Expected::PairChoice { a, b } => {
            let entry: ChoiceEntry =
                serde_json::from_str(body.trim()).map_err(|e| format!("not a JSON choice object: {e}"))?;
            match entry.choice {
                serde_json::Value::String(s) if s.eq_ignore_ascii_case("tie") => Ok(Structured::Pair(None)),
                serde_json::Value::Number(n) => match n.as_u64().and_then(|n| u32::try_from(n).ok()) {
                    Some(id) if id == *a || id == *b => Ok(Structured::Pair(Some(id))),
                    _ => Err(format!("choice {n} is neither {a} nor {b}")),
                },
                other => Err(format!("choice {other} is not an id or \"tie\"")),
            }
        }
        Expected::ExplanationList { candidates } => {
            let entries: Vec<RawExplanation> =
                serde_json::from_str(body.trim()).map_err(|e| format!("not a JSON explanation array: {e}"))?;
            let ids: Vec<u32> = entries.iter().map(|e| e.id).collect();
            same_set(&ids, candidates)?;
            if let Some(e) = entries.iter().find(|e| e.text.trim().is_empty()) {
                return Err(format!("explanation for {} is empty", e.id));
            }
            Ok(Structured::Explanations(entries))
        }
    }
}

//! The four-section Markdown profile document.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subject {
    Item(u32),
    User(u32),
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::Item(id) => write!(f, "item {id}"),
            Subject::User(id) => write!(f, "user {id}"),
        }
    }
}

impl Subject {
    pub fn file_name(&self) -> String {
        match self {
            Subject::Item(id) => format!("item_{id}.md"),
            Subject::User(id) => format!("user_{id}.md"),
        }
    }

    fn parse(s: &str) -> Option<Self> {
        let mut parts = s.split_whitespace();
        let kind = parts.next()?;
        let id: u32 = parts.next()?.parse().ok()?;
        if parts.next().is_some() {
            return None;
        }
        match kind.to_ascii_lowercase().as_str() {
            "item" => Some(Subject::Item(id)),
            "user" => Some(Subject::User(id)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Overview,
    Attributes,
    Description,
    Dislikes,
}

impl Section {
    pub const ALL: [Section; 4] = [Section::Overview, Section::Attributes, Section::Description, Section::Dislikes];

    pub fn heading(self) -> &'static str {
        match self {
            Section::Overview => "Overview",
            Section::Attributes => "Attributes",
            Section::Description => "Description",
            Section::Dislikes => "Dislikes",
        }
    }
}

impl fmt::Display for Section {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.heading())
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ProfileError {
    #[error("missing section {0}")]
    MissingSection(Section),
    #[error("missing or malformed subject heading")]
    MissingSubject,
    #[error("overview must not be empty")]
    EmptyOverview,
}

/// Section contents without the subject line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileSections {
    pub overview: String,
    pub attributes: Vec<String>,
    pub description: String,
    pub dislikes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Profile {
    pub subject: Subject,
    pub overview: String,
    pub attributes: Vec<String>,
    pub description: String,
    pub dislikes: Vec<String>,
}

/// Lowercases, collapses whitespace and strips characters that would break a bullet line.
pub fn normalize_tag(raw: &str) -> String {
    let cleaned: String = raw
        .chars()
        .map(|c| if c == ',' || c == '#' || c.is_control() { ' ' } else { c })
        .collect::<String>()
        .to_lowercase();
    let joined = cleaned.split_whitespace().collect::<Vec<_>>().join(" ");
    joined.trim_start_matches(['-', '*', ' ']).trim().to_string()
}

/// Normalizes and deduplicates tags, keeping first-seen order.
pub fn normalize_tags<I, S>(raw: I) -> Vec<String>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut seen = BTreeSet::new();
    raw.into_iter()
        .map(|t| normalize_tag(t.as_ref()))
        .filter(|t| !t.is_empty() && seen.insert(t.clone()))
        .collect()
}

/// Trims each line and drops lines that would read back as headings.
pub fn normalize_text(raw: &str) -> String {
    let lines: Vec<&str> = raw
        .lines()
        .map(str::trim)
        .filter(|l| !l.starts_with('#'))
        .collect();
    let mut out: Vec<&str> = Vec::new();
    for l in lines {
        if l.is_empty() && out.last().is_none_or(|p| p.is_empty()) {
            continue;
        }
        out.push(l);
    }
    while out.last().is_some_and(|l| l.is_empty()) {
        out.pop();
    }
    out.join("\n")
}

impl Profile {
    /// Builds a profile with every field normalized. Fails only on an empty overview.
    pub fn new<A, D>(
        subject: Subject,
        overview: &str,
        attributes: A,
        description: &str,
        dislikes: D,
    ) -> Result<Self, ProfileError>
    where
        A: IntoIterator,
        A::Item: AsRef<str>,
        D: IntoIterator,
        D::Item: AsRef<str>,
    {
        let overview = normalize_text(overview);
        if overview.is_empty() {
            return Err(ProfileError::EmptyOverview);
        }
        Ok(Self {
            subject,
            overview,
            attributes: normalize_tags(attributes),
            description: normalize_text(description),
            dislikes: normalize_tags(dislikes),
        })
    }

    pub fn from_sections(subject: Subject, s: ProfileSections) -> Result<Self, ProfileError> {
        Self::new(subject, &s.overview, s.attributes, &s.description, s.dislikes)
    }

    pub fn sections(&self) -> ProfileSections {
        ProfileSections {
            overview: self.overview.clone(),
            attributes: self.attributes.clone(),
            description: self.description.clone(),
            dislikes: self.dislikes.clone(),
        }
    }

    /// Whether the profile is already in normal form.
    pub fn is_valid(&self) -> bool {
        Profile::new(self.subject, &self.overview, &self.attributes, &self.description, &self.dislikes)
            .is_ok_and(|p| &p == self)
    }
}

pub fn render_sections(s: &ProfileSections) -> String {
    let mut out = String::new();
    out.push_str("## Overview\n");
    out.push_str(&s.overview);
    out.push_str("\n\n## Attributes\n");
    for tag in &s.attributes {
        out.push_str("- ");
        out.push_str(tag);
        out.push('\n');
    }
    out.push_str("\n## Description\n");
    if !s.description.is_empty() {
        out.push_str(&s.description);
        out.push('\n');
    }
    out.push_str("\n## Dislikes\n");
    for tag in &s.dislikes {
        out.push_str("- ");
        out.push_str(tag);
        out.push('\n');
    }
    out
}

pub fn render_profile(p: &Profile) -> String {
    format!("# {}\n\n{}", p.subject, render_sections(&p.sections()))
}

/// Parses the four sections; the `# subject` line and unknown `##` sections are ignored.
pub fn parse_sections(markdown: &str) -> Result<ProfileSections, ProfileError> {
    let mut current: Option<Option<Section>> = None;
    let mut bodies: [Option<Vec<&str>>; 4] = [None, None, None, None];
    for line in markdown.lines() {
        let trimmed = line.trim();
        if let Some(heading) = trimmed.strip_prefix("## ") {
            let heading = heading.trim();
            let section = Section::ALL.iter().copied().find(|s| s.heading().eq_ignore_ascii_case(heading));
            match section {
                Some(s) => {
                    bodies[s as usize].get_or_insert_with(Vec::new);
                }
                None => log::warn!("ignoring unknown profile section {heading:?}"),
            }
            current = Some(section);
            continue;
        }
        if trimmed.starts_with("# ") {
            current = None;
            continue;
        }
        if let Some(Some(s)) = current {
            bodies[s as usize].get_or_insert_with(Vec::new).push(line);
        }
    }
    let mut take = |s: Section| bodies[s as usize].take().ok_or(ProfileError::MissingSection(s));
    let overview = take(Section::Overview)?;
    let attributes = take(Section::Attributes)?;
    let description = take(Section::Description)?;
    let dislikes = take(Section::Dislikes)?;
    Ok(ProfileSections {
        overview: normalize_text(&overview.join("\n")),
        attributes: parse_tag_lines(&attributes),
        description: normalize_text(&description.join("\n")),
        dislikes: parse_tag_lines(&dislikes),
    })
}

fn parse_tag_lines(lines: &[&str]) -> Vec<String> {
    let raw = lines.iter().flat_map(|l| {
        let l = l.trim();
        let items: Vec<&str> = match l.strip_prefix("- ").or_else(|| l.strip_prefix("* ")) {
            Some(tag) => vec![tag],
            None => l.split(',').collect(),
        };
        items
    });
    normalize_tags(raw)
}

pub fn parse_profile(markdown: &str) -> Result<Profile, ProfileError> {
    let subject = markdown
        .lines()
        .find_map(|l| l.trim().strip_prefix("# ").map(str::trim))
        .and_then(Subject::parse)
        .ok_or(ProfileError::MissingSubject)?;
    Profile::from_sections(subject, parse_sections(markdown)?)
}

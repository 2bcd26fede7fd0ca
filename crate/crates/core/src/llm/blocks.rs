//! Delimited prompt blocks.
//!
//! Prompts embed profiles and metadata between `<<BEGIN kind args>>` and
//! `<<END>>` markers so that both remote models and the mock provider can
//! locate the user profile and each candidate unambiguously.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    pub kind: String,
    pub args: Vec<String>,
    pub body: String,
}

impl Block {
    pub fn new(kind: &str, args: &[&str], body: &str) -> Self {
        Self { kind: kind.to_string(), args: args.iter().map(|a| a.to_string()).collect(), body: body.to_string() }
    }

    /// The first argument parsed as an id.
    pub fn id(&self) -> Option<u32> {
        self.args.first()?.parse().ok()
    }

    pub fn render(&self) -> String {
        let mut header = self.kind.clone();
        for a in &self.args {
            header.push(' ');
            header.push_str(a);
        }
        format!("<<BEGIN {header}>>\n{}\n<<END>>\n", self.body.trim_end())
    }
}

pub fn render_block(kind: &str, args: &[&str], body: &str) -> String {
    Block::new(kind, args, body).render()
}

/// Extracts every well-formed block in order. Unterminated blocks are dropped.
pub fn parse_blocks(text: &str) -> Vec<Block> {
    let mut out = Vec::new();
    let mut current: Option<(String, Vec<String>, Vec<&str>)> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(header) = trimmed.strip_prefix("<<BEGIN ").and_then(|h| h.strip_suffix(">>")) {
            let mut parts = header.split_whitespace().map(str::to_string);
            let kind = parts.next().unwrap_or_default();
            current = Some((kind, parts.collect(), Vec::new()));
        } else if trimmed == "<<END>>" {
            if let Some((kind, args, body)) = current.take() {
                out.push(Block { kind, args, body: body.join("\n") });
            }
        } else if let Some((_, _, body)) = current.as_mut() {
            body.push(line);
        }
    }
    out
}

/// Collects the bullet tags listed under `## <heading>` inside a block body.
pub fn section_tags(body: &str, heading: &str) -> Vec<String> {
    let mut inside = false;
    let mut tags = Vec::new();
    for line in body.lines() {
        let t = line.trim();
        if let Some(h) = t.strip_prefix("## ") {
            inside = h.trim().eq_ignore_ascii_case(heading);
            continue;
        }
        if inside {
            if let Some(tag) = t.strip_prefix("- ") {
                let tag = tag.trim().to_lowercase();
                if !tag.is_empty() && !tags.contains(&tag) {
                    tags.push(tag);
                }
            }
        }
    }
    tags
}

/// Value of a `key: value` line inside a block body.
pub fn field<'a>(body: &'a str, key: &str) -> Option<&'a str> {
    body.lines().find_map(|l| {
        let (k, v) = l.split_once(':')?;
        (k.trim() == key).then(|| v.trim())
    })
}

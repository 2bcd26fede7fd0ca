//! Prompt templates with `{name}` placeholders.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

const DEFAULTS: &[(&str, &str)] = &[
    ("system", include_str!("../../templates/system.txt")),
    ("profile_item", include_str!("../../templates/profile_item.txt")),
    ("profile_user", include_str!("../../templates/profile_user.txt")),
    ("rerank_prompt", include_str!("../../templates/rerank_prompt.txt")),
    ("rerank_pair", include_str!("../../templates/rerank_pair.txt")),
    ("rerank_batch", include_str!("../../templates/rerank_batch.txt")),
    ("rerank_relevancy", include_str!("../../templates/rerank_relevancy.txt")),
    ("explain", include_str!("../../templates/explain.txt")),
];

#[derive(Debug, Clone, PartialEq)]
pub struct PromptTemplates {
    templates: BTreeMap<String, String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self { templates: DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect() }
    }
}

impl PromptTemplates {
    /// Defaults overridden by any `<name>.txt` found in `dir`.
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let mut out = Self::default();
        for (name, _) in DEFAULTS {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                out.templates.insert(name.to_string(), fs::read_to_string(path)?);
            }
        }
        Ok(out)
    }

    pub fn system(&self) -> &str {
        self.templates["system"].trim()
    }

    /// Substitutes each `{key}`. Unknown template names render empty.
    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> String {
        let mut text = self.templates.get(name).cloned().unwrap_or_default();
        for (key, value) in vars {
            text = text.replace(&format!("{{{key}}}"), value);
        }
        text
    }
}

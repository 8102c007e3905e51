//! Versioned prompt templates with `{{name}}` placeholders.
//!
//! The built-in set is compiled in from `prompts/`; a directory with the same
//! layout can override any subset of files.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::digest::sha256_hex_parts;

/// Bumped whenever any built-in template changes.
pub const PROMPT_SET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PromptKind {
    System,
    Enhance,
    Pairs,
    Discriminate,
    SynthesizeStandard,
    Anchor,
    Decouple,
    SynthesizeVocabulary,
}

impl PromptKind {
    pub const ALL: [PromptKind; 8] = [
        Self::System,
        Self::Enhance,
        Self::Pairs,
        Self::Discriminate,
        Self::SynthesizeStandard,
        Self::Anchor,
        Self::Decouple,
        Self::SynthesizeVocabulary,
    ];

    /// Path relative to a prompt directory.
    pub fn file_name(self) -> &'static str {
        match self {
            Self::System => "system.txt",
            Self::Enhance => "distill/enhance.txt",
            Self::Pairs => "distill/pairs.txt",
            Self::Discriminate => "distill/discriminate.txt",
            Self::SynthesizeStandard => "distill/synthesize.txt",
            Self::Anchor => "reason/anchor.txt",
            Self::Decouple => "reason/decouple.txt",
            Self::SynthesizeVocabulary => "reason/synthesize.txt",
        }
    }

    fn builtin(self) -> &'static str {
        match self {
            Self::System => include_str!("../prompts/system.txt"),
            Self::Enhance => include_str!("../prompts/distill/enhance.txt"),
            Self::Pairs => include_str!("../prompts/distill/pairs.txt"),
            Self::Discriminate => include_str!("../prompts/distill/discriminate.txt"),
            Self::SynthesizeStandard => include_str!("../prompts/distill/synthesize.txt"),
            Self::Anchor => include_str!("../prompts/reason/anchor.txt"),
            Self::Decouple => include_str!("../prompts/reason/decouple.txt"),
            Self::SynthesizeVocabulary => include_str!("../prompts/reason/synthesize.txt"),
        }
    }
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {template} uses placeholder {{{{{name}}}}} but no value was supplied")]
    MissingValue { template: &'static str, name: String },
    #[error("template {template} has an unterminated placeholder at byte {at}")]
    Unterminated { template: &'static str, at: usize },
    #[error("reading prompt template {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplates {
    templates: BTreeMap<PromptKind, String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptTemplates {
    pub fn builtin() -> Self {
        Self {
            templates: PromptKind::ALL
                .iter()
                .map(|&k| (k, k.builtin().to_string()))
                .collect(),
        }
    }

    /// Built-in templates with every file present under `dir` replacing its
    /// counterpart.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        for kind in PromptKind::ALL {
            let path = dir.join(kind.file_name());
            if path.is_file() {
                let text = std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                set.templates.insert(kind, text);
            }
        }
        Ok(set)
    }

    pub fn get(&self, kind: PromptKind) -> &str {
        &self.templates[&kind]
    }

    pub fn set(&mut self, kind: PromptKind, text: impl Into<String>) {
        self.templates.insert(kind, text.into());
    }

    pub fn render(&self, kind: PromptKind, values: &[(&str, &str)]) -> Result<String, PromptError> {
        render_template(kind.file_name(), self.get(kind), values)
    }

    /// Digest over every template, in a fixed order.
    pub fn digest(&self) -> String {
        let mut parts: Vec<&[u8]> = Vec::new();
        for (kind, text) in &self.templates {
            parts.push(kind.file_name().as_bytes());
            parts.push(text.as_bytes());
        }
        sha256_hex_parts(parts)
    }
}

/// Substitutes `{{name}}` placeholders. Every placeholder must have a value;
/// unused values are ignored.
pub fn render_template(
    template_name: &'static str,
    template: &str,
    values: &[(&str, &str)],
) -> Result<String, PromptError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    let mut offset = 0;
    while let Some(open) = rest.find("{{") {
        out.push_str(&rest[..open]);
        let after = &rest[open + 2..];
        let close = after.find("}}").ok_or(PromptError::Unterminated {
            template: template_name,
            at: offset + open,
        })?;
        let name = after[..close].trim();
        let value = values
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| PromptError::MissingValue {
                template: template_name,
                name: name.to_string(),
            })?;
        out.push_str(value);
        let consumed = open + 2 + close + 2;
        offset += consumed;
        rest = &rest[consumed..];
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitutes_all_placeholders() {
        let out = render_template("t", "a {{x}} b {{ y }} {{x}}", &[("x", "1"), ("y", "2")]).unwrap();
        assert_eq!(out, "a 1 b 2 1");
    }

    #[test]
    fn missing_value_is_an_error() {
        let err = render_template("t", "{{x}} {{z}}", &[("x", "1")]).unwrap_err();
        assert!(matches!(err, PromptError::MissingValue { name, .. } if name == "z"));
        assert!(matches!(
            render_template("t", "ab {{x", &[("x", "1")]),
            Err(PromptError::Unterminated { at: 3, .. })
        ));
    }

    #[test]
    fn overrides_replace_only_present_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("reason")).unwrap();
        std::fs::write(dir.path().join("reason/anchor.txt"), "custom {{scene_labels}}").unwrap();
        let set = PromptTemplates::with_overrides(dir.path()).unwrap();
        assert_eq!(set.get(PromptKind::Anchor), "custom {{scene_labels}}");
        assert_eq!(set.get(PromptKind::Decouple), PromptTemplates::builtin().get(PromptKind::Decouple));
        assert_ne!(set.digest(), PromptTemplates::builtin().digest());
    }

    #[test]
    fn builtin_templates_are_nonempty() {
        let set = PromptTemplates::builtin();
        for kind in PromptKind::ALL {
            assert!(!set.get(kind).trim().is_empty(), "{kind:?}");
        }
    }
}

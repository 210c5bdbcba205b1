//! Versioned prompt assets and placeholder substitution.
//!
//! Every template ships embedded in the binary and can be overridden by a
//! directory holding files with the same names. Placeholders are literal
//! tokens: angle-bracket names such as `<NUMBER OF TRAJECTORIES>` or bare
//! upper-case names such as `TASK_DESCRIPTION`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {template} has no placeholder {placeholder}")]
    UnknownPlaceholder { template: String, placeholder: String },
    #[error("template {template} left placeholder {placeholder} unfilled")]
    Unfilled { template: String, placeholder: String },
    #[error("failed to read prompt asset {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub name: String,
    pub text: String,
}

fn angle_placeholder() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"<[A-Z][A-Z0-9_ ]*[A-Z0-9]>").expect("valid regex"))
}

impl PromptTemplate {
    pub fn new(name: impl Into<String>, text: impl Into<String>) -> Self {
        PromptTemplate {
            name: name.into(),
            text: text.into(),
        }
    }

    /// Angle-bracket placeholders present in the template, in order of first use.
    pub fn placeholders(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for m in angle_placeholder().find_iter(&self.text) {
            if !seen.iter().any(|s: &String| s == m.as_str()) {
                seen.push(m.as_str().to_string());
            }
        }
        seen
    }

    /// Replaces every occurrence of each token. Supplying a token that does
    /// not occur is an error, as is leaving an angle-bracket placeholder in
    /// the output.
    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, PromptError> {
        for (token, _) in values {
            if !self.text.contains(token) {
                return Err(PromptError::UnknownPlaceholder {
                    template: self.name.clone(),
                    placeholder: token.to_string(),
                });
            }
        }
        for placeholder in self.placeholders() {
            if !values.iter().any(|(t, _)| *t == placeholder) {
                return Err(PromptError::Unfilled {
                    template: self.name.clone(),
                    placeholder,
                });
            }
        }
        // Single pass, so substituted values are never rescanned for tokens.
        let mut out = String::with_capacity(self.text.len());
        let mut rest = self.text.as_str();
        while !rest.is_empty() {
            let hit = values
                .iter()
                .filter_map(|(t, v)| rest.find(t).map(|at| (at, t.len(), *v)))
                .min_by_key(|(at, len, _)| (*at, usize::MAX - len));
            match hit {
                Some((at, len, value)) => {
                    out.push_str(&rest[..at]);
                    out.push_str(value);
                    rest = &rest[at + len..];
                }
                None => {
                    out.push_str(rest);
                    break;
                }
            }
        }
        Ok(out)
    }
}

pub const JUDGE_SYSTEM: &str = "judge_system.v1.txt";
pub const JUDGE_GUIDELINES: &str = "judge_guidelines.v1.txt";
pub const JUDGE_CITING: &str = "judge_citing.v1.txt";
pub const INDEPENDENT_JUDGE: &str = "independent_judge.v1.txt";
pub const FACT_GENERATOR: &str = "fact_generator.v1.txt";
pub const CAPTION: &str = "caption.v1.txt";
pub const GUI_POLICY: &str = "gui_policy.v1.txt";
pub const CODE_AGENT: &str = "code_agent.v1.txt";
pub const CODE_SUMMARIZER: &str = "code_summarizer.v1.txt";
pub const REFLECTION: &str = "reflection.v1.txt";

const BUILTIN: &[(&str, &str)] = &[
    (JUDGE_SYSTEM, include_str!("../assets/prompts/judge_system.v1.txt")),
    (JUDGE_GUIDELINES, include_str!("../assets/prompts/judge_guidelines.v1.txt")),
    (JUDGE_CITING, include_str!("../assets/prompts/judge_citing.v1.txt")),
    (INDEPENDENT_JUDGE, include_str!("../assets/prompts/independent_judge.v1.txt")),
    (FACT_GENERATOR, include_str!("../assets/prompts/fact_generator.v1.txt")),
    (CAPTION, include_str!("../assets/prompts/caption.v1.txt")),
    (GUI_POLICY, include_str!("../assets/prompts/gui_policy.v1.txt")),
    (CODE_AGENT, include_str!("../assets/prompts/code_agent.v1.txt")),
    (CODE_SUMMARIZER, include_str!("../assets/prompts/code_summarizer.v1.txt")),
    (REFLECTION, include_str!("../assets/prompts/reflection.v1.txt")),
];

/// The full set of templates used by the pipeline.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSet {
    templates: BTreeMap<String, PromptTemplate>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptSet {
    pub fn builtin() -> Self {
        let templates = BUILTIN
            .iter()
            .map(|(name, text)| (name.to_string(), PromptTemplate::new(*name, *text)))
            .collect();
        PromptSet { templates }
    }

    /// Builtin templates, with any same-named file in `dir` taking precedence.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        for (name, _) in BUILTIN {
            let path = dir.join(name);
            if path.is_file() {
                let text = fs::read_to_string(&path).map_err(|source| PromptError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                set.templates
                    .insert(name.to_string(), PromptTemplate::new(*name, text));
            }
        }
        Ok(set)
    }

    pub fn get(&self, name: &str) -> &PromptTemplate {
        self.templates
            .get(name)
            .unwrap_or_else(|| panic!("prompt set is missing {name}"))
    }

    pub fn replace(&mut self, name: &str, text: impl Into<String>) {
        self.templates
            .insert(name.to_string(), PromptTemplate::new(name, text));
    }

    /// SHA-256 over every template name and body, hex encoded.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, t) in &self.templates {
            hasher.update((name.len() as u64).to_le_bytes());
            hasher.update(name.as_bytes());
            hasher.update((t.text.len() as u64).to_le_bytes());
            hasher.update(t.text.as_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// Digest of only the templates a judge strategy reads, given the
    /// citing toggle.
    pub fn judge_digest(&self, citing: bool) -> String {
        let mut hasher = Sha256::new();
        let mut names = vec![JUDGE_SYSTEM, JUDGE_GUIDELINES, INDEPENDENT_JUDGE];
        if citing {
            names.push(JUDGE_CITING);
        }
        for name in names {
            hasher.update(self.get(name).text.as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_templates_expose_expected_placeholders() {
        let set = PromptSet::builtin();
        assert_eq!(
            set.get(JUDGE_SYSTEM).placeholders(),
            vec![
                "<NUMBER OF TRAJECTORIES>",
                "<TASK_DESCRIPTION_INPUT>",
                "<JUDGE_GUIDELINES>",
                "<CITATION_INSTRUCTIONS>"
            ]
        );
        assert!(set.get(GUI_POLICY).text.contains("TASK_DESCRIPTION"));
        assert!(set.get(GUI_POLICY).text.contains("CURRENT_OS"));
        assert!(set.get(FACT_GENERATOR).placeholders().is_empty());
    }

    #[test]
    fn lowercase_tags_are_not_placeholders() {
        let t = PromptTemplate::new("t", "<thoughts>x</thoughts> <answer>1</answer> <N>");
        assert_eq!(t.placeholders(), Vec::<String>::new());
        let t = PromptTemplate::new("t", "pick from 1 to <NUMBER OF TRAJECTORIES>");
        assert_eq!(t.placeholders(), vec!["<NUMBER OF TRAJECTORIES>"]);
    }

    #[test]
    fn render_substitutes_every_occurrence() {
        let t = PromptTemplate::new("t", "<A B> and <A B>, task `TASK`");
        let out = t.render(&[("<A B>", "3"), ("TASK", "save")]).unwrap();
        assert_eq!(out, "3 and 3, task `save`");
        let injected = t.render(&[("<A B>", "TASK"), ("TASK", "x")]).unwrap();
        assert_eq!(injected, "TASK and TASK, task `x`");
    }

    #[test]
    fn render_rejects_missing_and_unknown() {
        let t = PromptTemplate::new("t", "<AA> <BB>");
        assert!(matches!(
            t.render(&[("<AA>", "1")]),
            Err(PromptError::Unfilled { .. })
        ));
        assert!(matches!(
            t.render(&[("<AA>", "1"), ("<BB>", "2"), ("<CC>", "3")]),
            Err(PromptError::UnknownPlaceholder { .. })
        ));
    }

    #[test]
    fn overrides_change_digest() {
        let dir = tempfile::tempdir().unwrap();
        let base = PromptSet::builtin();
        let same = PromptSet::with_overrides(dir.path()).unwrap();
        assert_eq!(base.digest(), same.digest());
        fs::write(dir.path().join(JUDGE_CITING), "- cite facts\n").unwrap();
        let changed = PromptSet::with_overrides(dir.path()).unwrap();
        assert_ne!(base.digest(), changed.digest());
        assert_eq!(changed.get(JUDGE_CITING).text, "- cite facts\n");
        assert_eq!(base.judge_digest(false), changed.judge_digest(false));
        assert_ne!(base.judge_digest(true), changed.judge_digest(true));
    }
}

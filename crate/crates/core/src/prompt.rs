//! Prompt templates. Built-in texts ship under `assets/prompts/`; a
//! directory with files of the same names overrides them.

use std::path::Path;

use crate::model::Document;

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("template {name} is missing {what}")]
    Missing { name: String, what: String },
    #[error("reading template {name}: {source}")]
    Io {
        name: String,
        #[source]
        source: std::io::Error,
    },
}

pub const UNROLL_MARKERS: [&str; 4] = [
    "Hop Count:",
    "Reasoning Structure:",
    "Sub-questions:",
    "Triple Reasoning Chain:",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    name: String,
    text: String,
}

impl PromptTemplate {
    /// Checks that every `{placeholder}` and marker string appears in `text`.
    pub fn new(
        name: impl Into<String>,
        text: impl Into<String>,
        placeholders: &[&str],
        markers: &[&str],
    ) -> Result<Self, PromptError> {
        let (name, text) = (name.into(), text.into());
        for p in placeholders {
            if !text.contains(&format!("{{{p}}}")) {
                return Err(PromptError::Missing {
                    name,
                    what: format!("placeholder {{{p}}}"),
                });
            }
        }
        for m in markers {
            if !text.contains(m) {
                return Err(PromptError::Missing {
                    name,
                    what: format!("marker {m:?}"),
                });
            }
        }
        Ok(PromptTemplate { name, text })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    /// Single-pass substitution: values are inserted verbatim and never
    /// rescanned, so a value containing `{question}` stays as typed.
    pub fn render(&self, vars: &[(&str, &str)]) -> String {
        let mut out = String::with_capacity(self.text.len() + 256);
        let mut rest = self.text.as_str();
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let after = &rest[open + 1..];
            let hit = after.find('}').and_then(|close| {
                let key = &after[..close];
                vars.iter()
                    .find(|(k, _)| *k == key)
                    .map(|(_, v)| (close, *v))
            });
            match hit {
                Some((close, value)) => {
                    out.push_str(value);
                    rest = &after[close + 1..];
                }
                None => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub unroll: PromptTemplate,
    pub complete: PromptTemplate,
    pub reason: PromptTemplate,
    pub key_extract: PromptTemplate,
    pub unified: PromptTemplate,
}

const CHAIN_VARS: [&str; 4] = ["context", "question", "sub_questions", "chain"];

impl PromptSet {
    pub fn builtin() -> Self {
        Self::from_texts(|name| {
            Ok(match name {
                "unroll" => include_str!("../assets/prompts/unroll.txt"),
                "complete" => include_str!("../assets/prompts/complete.txt"),
                "reason" => include_str!("../assets/prompts/reason.txt"),
                "key_extract" => include_str!("../assets/prompts/key_extract.txt"),
                "unified" => include_str!("../assets/prompts/unified.txt"),
                _ => unreachable!("unknown builtin prompt {name}"),
            }
            .to_string())
        })
        .expect("builtin prompts are valid")
    }

    /// Built-ins, with `<dir>/<name>.txt` taking precedence where present.
    pub fn with_overrides(dir: &Path) -> Result<Self, PromptError> {
        let builtin = Self::builtin();
        Self::from_texts(|name| {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                std::fs::read_to_string(&path).map_err(|source| PromptError::Io {
                    name: name.to_string(),
                    source,
                })
            } else {
                Ok(builtin.by_name(name).text().to_string())
            }
        })
    }

    fn by_name(&self, name: &str) -> &PromptTemplate {
        match name {
            "unroll" => &self.unroll,
            "complete" => &self.complete,
            "reason" => &self.reason,
            "key_extract" => &self.key_extract,
            _ => &self.unified,
        }
    }

    fn from_texts<F>(mut load: F) -> Result<Self, PromptError>
    where
        F: FnMut(&str) -> Result<String, PromptError>,
    {
        Ok(PromptSet {
            unroll: PromptTemplate::new("unroll", load("unroll")?, &["question"], &UNROLL_MARKERS)?,
            complete: PromptTemplate::new("complete", load("complete")?, &CHAIN_VARS, &[])?,
            reason: PromptTemplate::new("reason", load("reason")?, &CHAIN_VARS, &["<<ANS>>"])?,
            key_extract: PromptTemplate::new(
                "key_extract",
                load("key_extract")?,
                &["question", "context"],
                &["So the answer is:"],
            )?,
            unified: PromptTemplate::new("unified", load("unified")?, &CHAIN_VARS, &["<<ANS>>"])?,
        })
    }
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

/// `Document[i] (Title: ...) text`, one per line, 1-based.
pub fn render_documents(docs: &[Document]) -> String {
    docs.iter()
        .enumerate()
        .map(|(i, d)| format!("Document[{}] (Title: {}) {}", i + 1, d.title, d.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// `Document [i]: (Title: ...) text`, the layout the key-extraction prompt expects.
pub fn render_documents_for_key_extract(docs: &[Document]) -> String {
    docs.iter()
        .enumerate()
        .map(|(i, d)| format!("Document [{}]: (Title: {}) {}", i + 1, d.title, d.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// `SUB_Q1: ...` lines.
pub fn render_sub_questions(subs: &[String]) -> String {
    subs.iter()
        .enumerate()
        .map(|(i, s)| format!("SUB_Q{}: {}", i + 1, s))
        .collect::<Vec<_>>()
        .join("\n")
}

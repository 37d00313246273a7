//! Domain types shared across the engine.
//!
//! Everything here is plain data with validated invariants: no I/O and no
//! model calls. Values are immutable once constructed.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::fmt;

/// Literal used for an entity the model was not confident about.
pub const UNCERTAIN_LITERAL: &str = "<UNCERTAIN>";
/// Literal used for the final answer slot of a reasoning chain.
pub const FILL_LITERAL: &str = "<FILL>";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("document id must be non-empty")]
    EmptyDocId,
    #[error("document {0} has empty text")]
    EmptyDocText(String),
    #[error("entity text must be non-empty")]
    EmptySlotText,
    #[error("entity text {0:?} contains a mask literal")]
    MaskInText(String),
    #[error("chain invariant violated: {0}")]
    ChainInvariant(String),
    #[error("invalid unrolled question: {0}")]
    InvalidUnrolled(String),
    #[error("invalid QA example {id}: {reason}")]
    InvalidExample { id: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub text: String,
}

impl Document {
    pub fn new(
        id: impl Into<String>,
        title: impl Into<String>,
        text: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let doc = Document {
            id: id.into(),
            title: title.into(),
            text: text.into(),
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.id.is_empty() {
            return Err(ModelError::EmptyDocId);
        }
        if self.text.trim().is_empty() {
            return Err(ModelError::EmptyDocText(self.id.clone()));
        }
        Ok(())
    }
}

/// One position of a triple: a concrete entity, or one of the two masks.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum EntitySlot {
    Text(String),
    Uncertain,
    Fill,
}

impl EntitySlot {
    pub fn text(s: impl Into<String>) -> Result<Self, ModelError> {
        let s = s.into();
        if s.trim().is_empty() {
            return Err(ModelError::EmptySlotText);
        }
        if contains_mask_literal(&s) {
            return Err(ModelError::MaskInText(s));
        }
        Ok(EntitySlot::Text(s))
    }

    pub fn is_mask(&self) -> bool {
        !matches!(self, EntitySlot::Text(_))
    }

    pub fn as_str(&self) -> &str {
        match self {
            EntitySlot::Text(s) => s,
            EntitySlot::Uncertain => UNCERTAIN_LITERAL,
            EntitySlot::Fill => FILL_LITERAL,
        }
    }
}

impl fmt::Display for EntitySlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub(crate) fn contains_mask_literal(s: &str) -> bool {
    s.contains(UNCERTAIN_LITERAL) || s.contains(FILL_LITERAL)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Triple {
    pub head: EntitySlot,
    pub relation: EntitySlot,
    pub tail: EntitySlot,
}

impl Triple {
    pub fn new(head: EntitySlot, relation: EntitySlot, tail: EntitySlot) -> Self {
        Triple {
            head,
            relation,
            tail,
        }
    }

    /// Builds a triple from three raw strings, mapping mask literals to slots.
    pub fn parse_parts(head: &str, relation: &str, tail: &str) -> Result<Self, ModelError> {
        Ok(Triple {
            head: slot_from_str(head)?,
            relation: slot_from_str(relation)?,
            tail: slot_from_str(tail)?,
        })
    }

    pub fn slots(&self) -> [&EntitySlot; 3] {
        [&self.head, &self.relation, &self.tail]
    }

    /// "head relation tail" with masks rendered literally.
    pub fn render(&self) -> String {
        format!("{} {} {}", self.head, self.relation, self.tail)
    }
}

/// Maps a raw string to a slot. A string that carries a mask literal anywhere
/// collapses to that mask.
pub fn slot_from_str(raw: &str) -> Result<EntitySlot, ModelError> {
    let s = raw.trim();
    if s.contains(FILL_LITERAL) {
        Ok(EntitySlot::Fill)
    } else if s.contains(UNCERTAIN_LITERAL) {
        Ok(EntitySlot::Uncertain)
    } else {
        EntitySlot::text(s)
    }
}

/// Ordered triples with exactly one `Fill`, sitting in the final tail.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ReasoningChain {
    triples: Vec<Triple>,
}

impl ReasoningChain {
    pub fn new(triples: Vec<Triple>) -> Result<Self, ModelError> {
        validate_chain(&triples)?;
        Ok(ReasoningChain { triples })
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn uncertain_count(&self) -> usize {
        self.triples
            .iter()
            .flat_map(|t| t.slots())
            .filter(|s| matches!(s, EntitySlot::Uncertain))
            .count()
    }

    /// Space-joined "head relation tail" segments.
    pub fn render_flat(&self) -> String {
        self.triples
            .iter()
            .map(Triple::render)
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// The bracketed triple-list syntax used by the prompts:
    /// `[["h", "r", "t"], ...]`.
    pub fn render_list(&self) -> String {
        render_triple_list(self.triples.iter().map(|t| {
            [
                t.head.as_str().to_string(),
                t.relation.as_str().to_string(),
                t.tail.as_str().to_string(),
            ]
        }))
    }
}

fn validate_chain(triples: &[Triple]) -> Result<(), ModelError> {
    if triples.is_empty() {
        return Err(ModelError::ChainInvariant("chain is empty".into()));
    }
    let mut fills = Vec::new();
    for (i, t) in triples.iter().enumerate() {
        if t.relation == EntitySlot::Fill {
            return Err(ModelError::ChainInvariant(format!(
                "relation of triple {} is <FILL>",
                i + 1
            )));
        }
        if t.head == EntitySlot::Fill {
            fills.push((i, "head"));
        }
        if t.tail == EntitySlot::Fill {
            fills.push((i, "tail"));
        }
    }
    match fills.as_slice() {
        [] => Err(ModelError::ChainInvariant("chain has no <FILL> slot".into())),
        [(i, "tail")] if *i == triples.len() - 1 => Ok(()),
        [(i, pos)] => Err(ModelError::ChainInvariant(format!(
            "<FILL> found at {pos} of triple {} but must be the tail of the last triple",
            i + 1
        ))),
        many => Err(ModelError::ChainInvariant(format!(
            "chain has {} <FILL> slots",
            many.len()
        ))),
    }
}

/// Triple-list rendering shared by masked and completed chains.
pub(crate) fn render_triple_list<I>(rows: I) -> String
where
    I: IntoIterator<Item = [String; 3]>,
{
    let rendered: Vec<String> = rows
        .into_iter()
        .map(|row| {
            let cells: Vec<String> = row
                .iter()
                .map(|c| serde_json::to_string(c).expect("string serialization"))
                .collect();
            format!("[{}]", cells.join(", "))
        })
        .collect();
    format!("[{}]", rendered.join(",\n "))
}

/// A reasoning chain after completion: every slot is concrete text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletedChain {
    pub triples: Vec<[String; 3]>,
}

impl CompletedChain {
    pub fn new(triples: Vec<[String; 3]>) -> Result<Self, ModelError> {
        if triples.is_empty() {
            return Err(ModelError::ChainInvariant("completed chain is empty".into()));
        }
        for (i, t) in triples.iter().enumerate() {
            for cell in t {
                if contains_mask_literal(cell) {
                    return Err(ModelError::ChainInvariant(format!(
                        "triple {} still contains a mask: {cell:?}",
                        i + 1
                    )));
                }
            }
        }
        Ok(CompletedChain { triples })
    }

    pub fn render_list(&self) -> String {
        render_triple_list(self.triples.iter().cloned())
    }

    pub fn contains_text(&self, needle: &str) -> bool {
        self.triples.iter().flatten().any(|c| c.contains(needle))
    }
}

/// Question + sub-questions + masked reasoning chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnrolledQuestion {
    pub original: String,
    pub sub_questions: Vec<String>,
    pub chain: ReasoningChain,
    pub hop_count: u32,
    pub raw_llm_text: String,
}

impl UnrolledQuestion {
    pub fn new(
        original: impl Into<String>,
        sub_questions: Vec<String>,
        chain: ReasoningChain,
        hop_count: u32,
        raw_llm_text: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let u = UnrolledQuestion {
            original: original.into(),
            sub_questions,
            chain,
            hop_count,
            raw_llm_text: raw_llm_text.into(),
        };
        u.validate()?;
        Ok(u)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.original.trim().is_empty() {
            return Err(ModelError::InvalidUnrolled("empty original question".into()));
        }
        if self.hop_count == 0 {
            return Err(ModelError::InvalidUnrolled("hop count must be positive".into()));
        }
        if let Some(i) = self.sub_questions.iter().position(|s| s.trim().is_empty()) {
            return Err(ModelError::InvalidUnrolled(format!(
                "sub-question {} is empty",
                i + 1
            )));
        }
        Ok(())
    }
}

/// Flattens `U = Q || S || R` into one query string: the question, each
/// sub-question, then each triple as "head relation tail", space-joined.
pub fn serialize_unrolled(u: &UnrolledQuestion) -> String {
    let mut parts: Vec<String> = Vec::with_capacity(1 + u.sub_questions.len() + u.chain.len());
    parts.push(u.original.trim().to_string());
    parts.extend(u.sub_questions.iter().map(|s| s.trim().to_string()));
    parts.extend(u.chain.triples().iter().map(Triple::render));
    parts.join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedDocument {
    pub doc_id: String,
    pub score: f64,
    pub rank: usize,
}

/// Orders by score descending, then doc id ascending.
pub(crate) fn cmp_scored(a: (&str, f64), b: (&str, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0))
}

/// Sorts `(doc_id, score)` pairs and assigns 1-based ranks, keeping at most `limit`.
pub fn rank_scored(mut scored: Vec<(String, f64)>, limit: usize) -> Vec<RankedDocument> {
    scored.sort_by(|a, b| cmp_scored((&a.0, a.1), (&b.0, b.1)));
    scored
        .into_iter()
        .take(limit)
        .enumerate()
        .map(|(i, (doc_id, score))| RankedDocument {
            doc_id,
            score,
            rank: i + 1,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub question: String,
    #[serde(rename = "answers")]
    pub gold_answers: Vec<String>,
    pub gold_doc_ids: Vec<String>,
}

impl QaExample {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |reason: &str| ModelError::InvalidExample {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        if self.id.is_empty() {
            return Err(bad("empty id"));
        }
        if self.question.trim().is_empty() {
            return Err(bad("empty question"));
        }
        if self.gold_answers.is_empty() {
            return Err(bad("no gold answers"));
        }
        if self.gold_doc_ids.is_empty() {
            return Err(bad("no gold documents"));
        }
        Ok(())
    }
}

//! Chain completion, answer generation and the key-sentence extraction loop.

use std::sync::OnceLock;

use regex::Regex;

use crate::grammar::{bracket_block, normalize_llm_text, parse_triple_list};
use crate::llm::{GatewayError, LlmSession};
use crate::model::{CompletedChain, Document, ModelError, ReasoningChain};
use crate::prompt::{
    render_documents, render_documents_for_key_extract, render_sub_questions, PromptSet,
    PromptTemplate,
};

pub const ANSWER_DELIMITER: &str = "<<ANS>>";
pub const DEFAULT_KEY_EXTRACT_ITERATIONS: usize = 3;
pub const KEY_EXTRACT_DOCS: usize = 10;

const RECONSTRUCTED_MARKER: &str = "Reconstructed Reasoning Chain:";

#[derive(Debug, thiserror::Error)]
pub enum ReasoningError {
    #[error("completion context has no documents")]
    NoDocuments,
    #[error("chain still has unresolved masks: {0}")]
    IncompleteChain(String),
    #[error("unparseable model output: {0}")]
    Parse(String),
    #[error("answer delimiters {ANSWER_DELIMITER} not found")]
    AnswerDelimiterMissing,
    #[error("key extraction reached its limit of {max} iterations")]
    IterationLimitExceeded { max: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl ReasoningError {
    fn is_retryable(&self) -> bool {
        matches!(
            self,
            ReasoningError::IncompleteChain(_)
                | ReasoningError::Parse(_)
                | ReasoningError::AnswerDelimiterMissing
        )
    }
}

#[derive(Debug, Clone)]
pub struct CompletionContext {
    pub documents: Vec<Document>,
    pub question: String,
    pub sub_questions: Vec<String>,
    pub chain: ReasoningChain,
}

impl CompletionContext {
    pub fn new(
        documents: Vec<Document>,
        question: impl Into<String>,
        sub_questions: Vec<String>,
        chain: ReasoningChain,
    ) -> Result<Self, ReasoningError> {
        if documents.is_empty() {
            return Err(ReasoningError::NoDocuments);
        }
        Ok(CompletionContext {
            documents,
            question: question.into(),
            sub_questions,
            chain,
        })
    }

    fn render(&self, template: &PromptTemplate, chain: &str) -> String {
        template.render(&[
            ("context", &render_documents(&self.documents)),
            ("question", &self.question),
            ("sub_questions", &render_sub_questions(&self.sub_questions)),
            ("chain", chain),
        ])
    }
}

fn retry<T>(
    attempts: usize,
    what: &str,
    mut f: impl FnMut() -> Result<T, ReasoningError>,
) -> Result<T, ReasoningError> {
    let attempts = attempts.max(1);
    let mut last = None;
    for attempt in 1..=attempts {
        match f() {
            Ok(v) => return Ok(v),
            Err(e) if e.is_retryable() => {
                log::debug!("{what} attempt {attempt}/{attempts} failed: {e}");
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Reads the triple list following "Reconstructed Reasoning Chain:", or the
/// first list in the text when the marker is absent.
pub fn parse_completed_chain(text: &str) -> Result<CompletedChain, ReasoningError> {
    let norm = normalize_llm_text(text);
    let from = norm
        .find(RECONSTRUCTED_MARKER)
        .map_or(0, |i| i + RECONSTRUCTED_MARKER.len());
    let (s, e) = bracket_block(&norm, from)
        .ok_or_else(|| ReasoningError::Parse("no triple list in completion".into()))?;
    let rows = parse_triple_list(&norm[s..e]).map_err(|e| ReasoningError::Parse(e.0))?;
    CompletedChain::new(rows).map_err(|e| match e {
        ModelError::ChainInvariant(msg) => ReasoningError::IncompleteChain(msg),
        other => ReasoningError::Parse(other.to_string()),
    })
}

/// Asks the model to replace every mask with document text. Replies that
/// still carry masks or do not parse are retried up to `max_attempts` times.
pub fn complete_chain(
    ctx: &CompletionContext,
    session: &LlmSession<'_>,
    prompts: &PromptSet,
    max_attempts: usize,
) -> Result<CompletedChain, ReasoningError> {
    let prompt = ctx.render(&prompts.complete, &ctx.chain.render_list());
    retry(max_attempts, "chain completion", || {
        parse_completed_chain(&session.ask(&prompt)?)
    })
}

/// Text between the first pair of answer delimiters, trimmed.
pub fn extract_answer(text: &str) -> Result<String, ReasoningError> {
    let norm = normalize_llm_text(text);
    let open = norm
        .find(ANSWER_DELIMITER)
        .ok_or(ReasoningError::AnswerDelimiterMissing)?;
    let rest = &norm[open + ANSWER_DELIMITER.len()..];
    let close = rest
        .find(ANSWER_DELIMITER)
        .ok_or(ReasoningError::AnswerDelimiterMissing)?;
    let answer = rest[..close].trim().to_string();
    if answer.is_empty() {
        log::warn!("model returned an empty answer");
    }
    Ok(answer)
}

pub fn generate_answer(
    ctx: &CompletionContext,
    completed: &CompletedChain,
    session: &LlmSession<'_>,
    prompts: &PromptSet,
    max_attempts: usize,
) -> Result<String, ReasoningError> {
    let prompt = ctx.render(&prompts.reason, &completed.render_list());
    retry(max_attempts, "answer generation", || {
        extract_answer(&session.ask(&prompt)?)
    })
}

/// Completion and answer from one call.
pub fn complete_and_answer_unified(
    ctx: &CompletionContext,
    session: &LlmSession<'_>,
    prompts: &PromptSet,
    max_attempts: usize,
) -> Result<(CompletedChain, String), ReasoningError> {
    let prompt = ctx.render(&prompts.unified, &ctx.chain.render_list());
    retry(max_attempts, "unified reasoning", || {
        let reply = session.ask(&prompt)?;
        let chain = parse_completed_chain(&reply)?;
        Ok((chain, extract_answer(&reply)?))
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyExtractState {
    pub question: String,
    pub iteration: usize,
    pub key_sentences: Vec<String>,
    pub augmented_query: String,
    pub max_iterations: usize,
}

impl KeyExtractState {
    pub fn new(question: impl Into<String>, query: impl Into<String>, max_iterations: usize) -> Self {
        KeyExtractState {
            question: question.into(),
            iteration: 0,
            key_sentences: Vec::new(),
            augmented_query: query.into(),
            max_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum KeyExtractOutcome {
    Answer(String),
    Continue(KeyExtractState),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyExtractReply {
    pub doc_index: usize,
    pub sentence: String,
    /// `None` when the model answered "False".
    pub answer: Option<String>,
}

fn key_extract_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r#"(?s)\(\s*\[?\s*(\d+)\s*\]?\s*,\s*("(?:[^"\\]|\\.)*")\s*\)\s*\.?\s*So the answer is:\s*(.*)"#,
        )
        .expect("valid regex")
    })
}

/// Parses `([i], "sentence"). So the answer is: X`.
pub fn parse_key_extract(text: &str, doc_count: usize) -> Result<KeyExtractReply, ReasoningError> {
    let norm = normalize_llm_text(text);
    let caps = key_extract_regex()
        .captures(&norm)
        .ok_or_else(|| ReasoningError::Parse("no ([i], \"sentence\") tuple".into()))?;
    let doc_index: usize = caps[1]
        .parse()
        .map_err(|_| ReasoningError::Parse(format!("bad document index {}", &caps[1])))?;
    if doc_index == 0 || doc_index > doc_count {
        return Err(ReasoningError::Parse(format!(
            "document index {doc_index} outside 1..={doc_count}"
        )));
    }
    let sentence: String = serde_json::from_str(&caps[2])
        .map_err(|e| ReasoningError::Parse(format!("bad key sentence: {e}")))?;
    let sentence = sentence.trim().to_string();
    if sentence.is_empty() {
        return Err(ReasoningError::Parse("empty key sentence".into()));
    }
    let raw = caps[3].lines().next().unwrap_or("").trim();
    let raw = raw.strip_suffix('.').unwrap_or(raw).trim();
    let raw = raw
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .unwrap_or(raw)
        .trim();
    let answer = if raw.eq_ignore_ascii_case("false") {
        None
    } else if raw.is_empty() {
        return Err(ReasoningError::Parse("missing answer after \"So the answer is:\"".into()));
    } else {
        Some(raw.to_string())
    };
    Ok(KeyExtractReply {
        doc_index,
        sentence,
        answer,
    })
}

/// One extraction round over `documents` (the caller passes the top ten).
pub fn key_extract_step(
    state: &KeyExtractState,
    documents: &[Document],
    session: &LlmSession<'_>,
    prompts: &PromptSet,
) -> Result<KeyExtractOutcome, ReasoningError> {
    if state.iteration >= state.max_iterations {
        return Err(ReasoningError::IterationLimitExceeded {
            max: state.max_iterations,
        });
    }
    if documents.is_empty() {
        return Err(ReasoningError::NoDocuments);
    }
    let prompt = prompts.key_extract.render(&[
        ("question", &state.question),
        ("context", &render_documents_for_key_extract(documents)),
    ]);
    let reply = parse_key_extract(&session.ask(&prompt)?, documents.len())?;
    Ok(match reply.answer {
        Some(answer) => KeyExtractOutcome::Answer(answer),
        None => {
            let mut next = state.clone();
            next.iteration += 1;
            next.augmented_query = format!("{} {}", next.augmented_query, reply.sentence);
            next.key_sentences.push(reply.sentence);
            KeyExtractOutcome::Continue(next)
        }
    })
}

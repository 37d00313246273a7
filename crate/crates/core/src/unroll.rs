//! Question unrolling: one LLM call turns a question into sub-questions and a
//! masked triple chain.

use std::sync::OnceLock;

use regex::Regex;

use crate::grammar::{bracket_block, normalize_llm_text, parse_string_list, parse_triple_list};
use crate::llm::{GatewayError, LlmSession};
use crate::model::{ModelError, ReasoningChain, Triple, UnrolledQuestion};
use crate::prompt::PromptSet;

pub const DEFAULT_MAX_ATTEMPTS: usize = 3;

const SUBQ_MARKER: &str = "Sub-questions:";
const CHAIN_MARKER: &str = "Triple Reasoning Chain:";

#[derive(Debug, thiserror::Error)]
pub enum UnrollError {
    #[error("question is empty")]
    EmptyQuestion,
    #[error("unparseable unroll output: {0}")]
    Parse(String),
    #[error("unrolled chain is invalid: {0}")]
    ChainInvariantViolation(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl UnrollError {
    fn is_retryable(&self) -> bool {
        matches!(self, UnrollError::Parse(_) | UnrollError::ChainInvariantViolation(_))
    }
}

pub fn render_unroll_prompt(prompts: &PromptSet, question: &str) -> Result<String, UnrollError> {
    if question.trim().is_empty() {
        return Err(UnrollError::EmptyQuestion);
    }
    Ok(prompts.unroll.render(&[("question", question)]))
}

fn hop_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)hop\s+count\s*:\s*\[?\s*(\d+)").expect("valid regex"))
}

fn label_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(?i:sub[_\s-]?q(?:uestion)?\s*\d+)\s*[:.)]\s*").expect("valid regex"))
}

/// Parses the model's reply for `question`. Whitespace is free; the section
/// markers and bracket structure are not.
pub fn parse_unroll_output(question: &str, text: &str) -> Result<UnrolledQuestion, UnrollError> {
    if text.trim().is_empty() {
        return Err(UnrollError::Parse("empty response".into()));
    }
    let norm = normalize_llm_text(text);

    let hop_count: u32 = hop_regex()
        .captures(&norm)
        .and_then(|c| c[1].parse().ok())
        .ok_or_else(|| UnrollError::Parse("missing \"Hop Count:\"".into()))?;

    let chain_at = norm
        .find(CHAIN_MARKER)
        .ok_or_else(|| UnrollError::Parse(format!("missing {CHAIN_MARKER:?}")))?;
    let subq_at = norm[..chain_at]
        .find(SUBQ_MARKER)
        .ok_or_else(|| UnrollError::Parse(format!("missing {SUBQ_MARKER:?} before the chain")))?;

    let from = subq_at + SUBQ_MARKER.len();
    let (s, e) = bracket_block(&norm, from)
        .filter(|&(_, e)| e <= chain_at)
        .ok_or_else(|| UnrollError::Parse("sub-question list is not a bracketed list".into()))?;
    let sub_questions: Vec<String> = parse_string_list(&norm[s..e])
        .map_err(|e| UnrollError::Parse(e.0))?
        .iter()
        .map(|q| label_regex().replace(q, "").trim().to_string())
        .filter(|q| !q.is_empty())
        .collect();
    if sub_questions.is_empty() {
        log::warn!("unroll produced no sub-questions for {question:?}");
    }

    let from = chain_at + CHAIN_MARKER.len();
    let (s, e) = bracket_block(&norm, from)
        .ok_or_else(|| UnrollError::Parse("triple chain is not a bracketed list".into()))?;
    let rows = parse_triple_list(&norm[s..e]).map_err(|e| UnrollError::Parse(e.0))?;
    let triples = rows
        .iter()
        .map(|[h, r, t]| Triple::parse_parts(h, r, t))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| UnrollError::Parse(e.to_string()))?;
    let chain = ReasoningChain::new(triples).map_err(|e| match e {
        ModelError::ChainInvariant(msg) => UnrollError::ChainInvariantViolation(msg),
        other => UnrollError::Parse(other.to_string()),
    })?;

    UnrolledQuestion::new(question, sub_questions, chain, hop_count, text)
        .map_err(|e| UnrollError::Parse(e.to_string()))
}

/// Asks the model to unroll `question`, re-asking with the same prompt when
/// the reply does not parse. Gateway errors are returned immediately.
pub fn unroll(
    question: &str,
    session: &LlmSession<'_>,
    prompts: &PromptSet,
    max_attempts: usize,
) -> Result<UnrolledQuestion, UnrollError> {
    let prompt = render_unroll_prompt(prompts, question)?;
    let attempts = max_attempts.max(1);
    let mut last = None;
    for attempt in 1..=attempts {
        let reply = session.ask(&prompt)?;
        match parse_unroll_output(question, &reply) {
            Ok(u) => return Ok(u),
            Err(e) if e.is_retryable() => {
                log::debug!("unroll attempt {attempt}/{attempts} failed: {e}");
                last = Some(e);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{GatewayConfig, ScriptedGateway};
    use crate::model::EntitySlot;

    const FIXTURE: &str = include_str!("../tests/fixtures/calibre_unroll.txt");
    const QUESTION: &str =
        "Which film has the director who died later, 45 Calibre Echo or Bons Baisers De Hong Kong?";

    #[test]
    fn calibre_fixture() {
        let u = parse_unroll_output(QUESTION, FIXTURE).unwrap();
        assert_eq!(u.hop_count, 4);
        assert_eq!(u.sub_questions.len(), 4);
        assert_eq!(u.sub_questions[0], "Who directed the film 45 Calibre Echo?");
        assert_eq!(u.chain.len(), 5);
        assert_eq!(u.chain.uncertain_count(), 5);
        assert_eq!(u.chain.triples()[4].tail, EntitySlot::Fill);
        assert_eq!(u.raw_llm_text, FIXTURE);
    }

    #[test]
    fn prompt_contains_instruction_and_question() {
        let p = PromptSet::builtin();
        let q = "Who's {x} \"quoted\" & <tagged>?";
        let out = render_unroll_prompt(&p, q).unwrap();
        assert!(out.contains("replace the entity with"));
        assert!(out.contains(q));
        assert_eq!(out, render_unroll_prompt(&p, q).unwrap());
        assert!(matches!(render_unroll_prompt(&p, "  "), Err(UnrollError::EmptyQuestion)));
    }

    #[test]
    fn missing_chain_marker() {
        let text = FIXTURE.replace(CHAIN_MARKER, "Chain:");
        assert!(matches!(parse_unroll_output(QUESTION, &text), Err(UnrollError::Parse(_))));
    }

    #[test]
    fn mid_chain_fill() {
        let text = "Hop Count: 2\nSub-questions: [\"a?\"]\nTriple Reasoning Chain:\n\
                    [[\"x\", \"r\", \"<FILL>\"], [\"y\", \"r\", \"z\"]]";
        assert!(matches!(
            parse_unroll_output("q", text),
            Err(UnrollError::ChainInvariantViolation(_))
        ));
    }

    #[test]
    fn empty_sub_questions_accepted() {
        let text = "Hop Count: 1\nSub-questions: []\nTriple Reasoning Chain: [[\"x\", \"r\", \"<FILL>\"]]";
        let u = parse_unroll_output("q", text).unwrap();
        assert!(u.sub_questions.is_empty());
    }

    #[test]
    fn typographic_masks() {
        let text = "Hop Count: 1\nSub-questions: [\u{201c}a?\u{201d}]\nTriple Reasoning Chain: \
                    [[\"\u{27e8}UNCERTAIN\u{27e9}\", \"r\", \"\u{27e8}FILL\u{27e9}\"]]";
        let u = parse_unroll_output("q", text).unwrap();
        assert_eq!(u.chain.triples()[0].head, EntitySlot::Uncertain);
    }

    #[test]
    fn retries_then_succeeds() {
        let gw = ScriptedGateway::new(["garbage", "still garbage", FIXTURE]);
        let cfg = GatewayConfig::default();
        let session = LlmSession::new(&gw, &cfg);
        let u = unroll(QUESTION, &session, &PromptSet::builtin(), 3).unwrap();
        assert_eq!(u.chain.len(), 5);
        assert_eq!(session.calls(), 3);
    }

    #[test]
    fn retry_limit_one() {
        let gw = ScriptedGateway::new(["garbage", FIXTURE]);
        let cfg = GatewayConfig::default();
        let session = LlmSession::new(&gw, &cfg);
        let err = unroll(QUESTION, &session, &PromptSet::builtin(), 1).unwrap_err();
        assert!(matches!(err, UnrollError::Parse(_)));
        assert_eq!(session.calls(), 1);
    }
}

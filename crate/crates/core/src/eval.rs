//! Datasets, retrieval and answer metrics, and run reports.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::model::{CompletedChain, Document, QaExample};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("gold set is empty")]
    EmptyGold,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {} invalid line(s): {}", .errors.len(), SchemaList(.errors))]
    Schema {
        path: PathBuf,
        errors: Vec<SchemaIssue>,
    },
    #[error("run record {0} has no matching example")]
    MissingExample(String),
    #[error("serializing report: {0}")]
    Serialize(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SchemaIssue {
    pub line: usize,
    pub message: String,
}

struct SchemaList<'a>(&'a [SchemaIssue]);

impl fmt::Display for SchemaList<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, issue) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "line {}: {}", issue.line, issue.message)?;
        }
        Ok(())
    }
}

/// `|gold ∩ retrieved[..k]| / |gold|`.
pub fn recall_at_k<S: AsRef<str>>(retrieved: &[S], gold: &[S], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let gold: HashSet<&str> = gold.iter().map(AsRef::as_ref).collect();
    if gold.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    let hits: HashSet<&str> = retrieved
        .iter()
        .take(k)
        .map(AsRef::as_ref)
        .filter(|id| gold.contains(id))
        .collect();
    Ok(hits.len() as f64 / gold.len() as f64)
}

/// Lowercase, drop punctuation and the articles a/an/the, collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lowered: String = s
        .to_lowercase()
        .chars()
        .filter(|c| !is_punct(*c))
        .collect();
    lowered
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation() || (!c.is_alphanumeric() && !c.is_whitespace())
}

pub fn exact_match<S: AsRef<str>>(pred: &str, golds: &[S]) -> Result<f64, EvalError> {
    if golds.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    let p = normalize_answer(pred);
    Ok(if golds.iter().any(|g| normalize_answer(g.as_ref()) == p) {
        1.0
    } else {
        0.0
    })
}

pub fn token_f1<S: AsRef<str>>(pred: &str, golds: &[S]) -> Result<f64, EvalError> {
    if golds.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    Ok(golds
        .iter()
        .map(|g| f1_pair(pred, g.as_ref()))
        .fold(0.0, f64::max))
}

fn f1_pair(pred: &str, gold: &str) -> f64 {
    let p = normalize_answer(pred);
    let g = normalize_answer(gold);
    let pt: Vec<&str> = p.split_whitespace().collect();
    let gt: Vec<&str> = g.split_whitespace().collect();
    if pt.is_empty() || gt.is_empty() {
        return if pt.is_empty() && gt.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: BTreeMap<&str, i64> = BTreeMap::new();
    for t in &gt {
        *counts.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pt {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pt.len() as f64;
    let recall = common as f64 / gt.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

fn load_jsonl<T, V>(path: &Path, check: V) -> Result<Vec<(usize, T)>, EvalError>
where
    T: DeserializeOwned,
    V: Fn(&T) -> Result<(), String>,
{
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(&line)
            .map_err(|e| e.to_string())
            .and_then(|v| check(&v).map(|_| v))
        {
            Ok(v) => out.push((i + 1, v)),
            Err(message) => errors.push(SchemaIssue {
                line: i + 1,
                message,
            }),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(EvalError::Schema {
            path: path.to_path_buf(),
            errors,
        })
    }
}

fn unique_ids<'a>(path: &Path, ids: impl Iterator<Item = (usize, &'a str)>) -> Result<(), EvalError> {
    let mut seen = HashSet::new();
    let errors: Vec<SchemaIssue> = ids
        .filter(|(_, id)| !seen.insert(*id))
        .map(|(line, id)| SchemaIssue {
            line,
            message: format!("duplicate id {id:?}"),
        })
        .collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(EvalError::Schema {
            path: path.to_path_buf(),
            errors,
        })
    }
}

/// Reads `{"id", "title", "text"}` lines. Every bad line is reported, not just the first.
pub fn load_corpus(path: &Path) -> Result<Vec<Document>, EvalError> {
    let docs = load_jsonl(path, |d: &Document| d.validate().map_err(|e| e.to_string()))?;
    unique_ids(path, docs.iter().map(|(line, d)| (*line, d.id.as_str())))?;
    Ok(docs.into_iter().map(|(_, d)| d).collect())
}

pub fn load_qa(path: &Path) -> Result<Vec<QaExample>, EvalError> {
    let qa = load_jsonl(path, |q: &QaExample| q.validate().map_err(|e| e.to_string()))?;
    unique_ids(path, qa.iter().map(|(line, q)| (*line, q.id.as_str())))?;
    Ok(qa.into_iter().map(|(_, q)| q).collect())
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), EvalError> {
    let io = |source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    for row in rows {
        serde_json::to_writer(&mut w, row)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn save_corpus(path: &Path, docs: &[Document]) -> Result<(), EvalError> {
    write_jsonl(path, docs)
}

pub fn save_qa(path: &Path, qa: &[QaExample]) -> Result<(), EvalError> {
    write_jsonl(path, qa)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub millis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnrolledArtifact {
    pub sub_questions: Vec<String>,
    pub chain: String,
    pub hop_count: u32,
    pub query: String,
}

/// Everything one question produced. `retrieved` is the reranked list
/// handed to the model; `candidates` is the first-stage list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub id: String,
    pub question: String,
    pub stages: Vec<String>,
    pub timings: Vec<StageTiming>,
    pub candidates: Vec<String>,
    pub retrieved: Vec<String>,
    pub unrolled: Option<UnrolledArtifact>,
    pub completed_chain: Option<CompletedChain>,
    pub key_sentences: Vec<String>,
    pub predicted_answer: Option<String>,
    pub llm_calls: usize,
    pub warnings: Vec<String>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn new(id: impl Into<String>, question: impl Into<String>) -> Self {
        RunRecord {
            id: id.into(),
            question: question.into(),
            stages: Vec::new(),
            timings: Vec::new(),
            candidates: Vec::new(),
            retrieved: Vec::new(),
            unrolled: None,
            completed_chain: None,
            key_sentences: Vec::new(),
            predicted_answer: None,
            llm_calls: 0,
            warnings: Vec::new(),
            error: None,
        }
    }

    pub fn failed(&self) -> bool {
        self.error.is_some() || self.predicted_answer.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub id: String,
    pub retrieved: Vec<String>,
    pub predicted_answer: Option<String>,
    pub recall_at_2: Option<f64>,
    pub recall_at_5: Option<f64>,
    pub exact_match: Option<f64>,
    pub f1: Option<f64>,
    pub llm_calls: usize,
    pub error: Option<String>,
}

/// Macro averages over examples that completed. Failed examples only count
/// toward `failed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub examples: usize,
    pub completed: usize,
    pub failed: usize,
    pub recall_at_2: f64,
    pub recall_at_5: f64,
    pub exact_match: f64,
    pub f1: f64,
    pub llm_calls: usize,
}

/// Published numbers kept next to a report for context. Desk-scale runs are
/// not expected to reach them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub label: String,
    pub dataset: String,
    pub recall_at_2: f64,
    pub exact_match: f64,
}

impl Default for ReferencePoint {
    fn default() -> Self {
        ReferencePoint {
            label: "published result, GPT-4o-mini reader".into(),
            dataset: "HotpotQA".into(),
            recall_at_2: 88.8,
            exact_match: 65.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub reference: ReferencePoint,
    pub per_example: Vec<ExampleResult>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores every record against its example. Output order follows `records`.
pub fn evaluate_run(records: &[RunRecord], dataset: &[QaExample]) -> Result<EvalReport, EvalError> {
    let by_id: BTreeMap<&str, &QaExample> = dataset.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut per_example = Vec::with_capacity(records.len());
    for r in records {
        let ex = by_id
            .get(r.id.as_str())
            .ok_or_else(|| EvalError::MissingExample(r.id.clone()))?;
        let result = match (&r.predicted_answer, r.failed()) {
            (Some(pred), false) => ExampleResult {
                id: r.id.clone(),
                retrieved: r.retrieved.clone(),
                predicted_answer: Some(pred.clone()),
                recall_at_2: Some(recall_at_k(&r.retrieved, &ex.gold_doc_ids, 2)?),
                recall_at_5: Some(recall_at_k(&r.retrieved, &ex.gold_doc_ids, 5)?),
                exact_match: Some(exact_match(pred, &ex.gold_answers)?),
                f1: Some(token_f1(pred, &ex.gold_answers)?),
                llm_calls: r.llm_calls,
                error: None,
            },
            _ => ExampleResult {
                id: r.id.clone(),
                retrieved: r.retrieved.clone(),
                predicted_answer: r.predicted_answer.clone(),
                recall_at_2: None,
                recall_at_5: None,
                exact_match: None,
                f1: None,
                llm_calls: r.llm_calls,
                error: Some(r.error.clone().unwrap_or_else(|| "no answer produced".into())),
            },
        };
        per_example.push(result);
    }
    let ok: Vec<&ExampleResult> = per_example.iter().filter(|e| e.error.is_none()).collect();
    let metrics = Metrics {
        examples: per_example.len(),
        completed: ok.len(),
        failed: per_example.len() - ok.len(),
        recall_at_2: mean(ok.iter().filter_map(|e| e.recall_at_2)),
        recall_at_5: mean(ok.iter().filter_map(|e| e.recall_at_5)),
        exact_match: mean(ok.iter().filter_map(|e| e.exact_match)),
        f1: mean(ok.iter().filter_map(|e| e.f1)),
        llm_calls: per_example.iter().map(|e| e.llm_calls).sum(),
    };
    Ok(EvalReport {
        metrics,
        reference: ReferencePoint::default(),
        per_example,
    })
}

/// Writes `<dir>/report.json` (metrics and reference) and
/// `<dir>/examples.jsonl` (one line per example).
pub fn write_report(dir: &Path, report: &EvalReport) -> Result<(PathBuf, PathBuf), EvalError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EvalError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let summary = dir.join("report.json");
    let examples = dir.join("examples.jsonl");
    let body = serde_json::json!({
        "metrics": report.metrics,
        "reference": report.reference,
    });
    let mut text = serde_json::to_string_pretty(&body)?;
    text.push('\n');
    std::fs::write(&summary, text).map_err(io(&summary))?;
    write_jsonl(&examples, &report.per_example)?;
    Ok((summary, examples))
}

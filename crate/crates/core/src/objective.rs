//! Difficulty-aware weighted InfoNCE over a mini-batch.
//!
//! A batch holds `b` unrolled questions and `2b` documents: document `i` is
//! the positive for question `i` and document `b + i` its hard negative. With
//! `S[i][j]` the gap-weighted score of question `i` against document `j`,
//!
//! ```text
//! loss = sum_i alpha_i * -log( exp(S[i][i]/tau) / sum_j exp(S[i][j]/tau) )
//! alpha_i = ln(1 + number of sub-questions of question i)
//! ```
//!
//! The positive stays in its own denominator. Gradients stop at `S`: an
//! external trainer backpropagates [`batch_loss_grad`] through its encoder.

use serde::{Deserialize, Serialize};

use crate::embedding::LayeredEmbeddings;
use crate::exec::{self, ExecMode};
use crate::model::UnrolledQuestion;
use crate::rerank::{self, CandidateLayerSet, RerankError};

pub const DEFAULT_TAU: f64 = 0.05;
pub const DEFAULT_BATCH_SIZE: usize = 40;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ObjectiveError {
    #[error("positive index {index} out of range for {len} scores")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("temperature must be positive, got {0}")]
    NonPositiveTemperature(f64),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("score matrix contains a non-finite value")]
    NonFinite,
    #[error("batch is empty")]
    EmptyBatch,
    #[error(transparent)]
    Score(#[from] RerankError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaMode {
    #[default]
    SubQuestions,
    ChainLength,
}

/// `ln(1 + n)`.
pub fn alpha_from_count(n: usize) -> f64 {
    (n as f64).ln_1p()
}

/// Difficulty weight from the number of sub-questions.
pub fn alpha(u: &UnrolledQuestion) -> f64 {
    alpha_from_count(u.sub_questions.len())
}

pub fn alpha_with(mode: AlphaMode, u: &UnrolledQuestion) -> f64 {
    BatchQuestion::from(u).alpha(mode)
}

/// What the objective needs to know about one question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchQuestion {
    #[serde(default)]
    pub id: Option<String>,
    pub sub_questions: usize,
    #[serde(default)]
    pub chain_length: usize,
}

impl BatchQuestion {
    pub fn alpha(&self, mode: AlphaMode) -> f64 {
        match mode {
            AlphaMode::SubQuestions => alpha_from_count(self.sub_questions),
            AlphaMode::ChainLength => alpha_from_count(self.chain_length),
        }
    }
}

impl From<&UnrolledQuestion> for BatchQuestion {
    fn from(u: &UnrolledQuestion) -> Self {
        BatchQuestion {
            id: None,
            sub_questions: u.sub_questions.len(),
            chain_length: u.chain.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub questions: Vec<BatchQuestion>,
    /// Optional ids of the `2b` documents: positives first, then negatives.
    #[serde(default)]
    pub documents: Vec<String>,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub alpha_mode: AlphaMode,
}

fn default_tau() -> f64 {
    DEFAULT_TAU
}

impl BatchSpec {
    pub fn new(questions: Vec<BatchQuestion>, tau: f64, alpha_mode: AlphaMode) -> Self {
        BatchSpec {
            questions,
            documents: Vec::new(),
            tau,
            alpha_mode,
        }
    }

    pub fn size(&self) -> usize {
        self.questions.len()
    }

    pub fn positive_index(&self, i: usize) -> usize {
        i
    }

    pub fn negative_index(&self, i: usize) -> usize {
        self.size() + i
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.questions.iter().map(|q| q.alpha(self.alpha_mode)).collect()
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.questions.is_empty() {
            return Err(ObjectiveError::EmptyBatch);
        }
        check_tau(self.tau)?;
        if !self.documents.is_empty() && self.documents.len() != 2 * self.size() {
            return Err(ObjectiveError::DimMismatch(format!(
                "{} questions need {} documents, got {}",
                self.size(),
                2 * self.size(),
                self.documents.len()
            )));
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<(), ObjectiveError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(ObjectiveError::NonPositiveTemperature(tau))
    }
}

/// Row-major `b x 2b` matrix of question/document scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, ObjectiveError> {
        if data.len() != rows * cols {
            return Err(ObjectiveError::DimMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ObjectiveError::NonFinite);
        }
        Ok(ScoreMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, ObjectiveError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(ObjectiveError::DimMismatch("ragged score rows".into()));
        }
        ScoreMatrix::new(r, c, rows.into_iter().flatten().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for ScoreMatrix {
    type Error = ObjectiveError;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self, Self::Error> {
        ScoreMatrix::from_rows(rows)
    }
}

impl From<ScoreMatrix> for Vec<Vec<f64>> {
    fn from(m: ScoreMatrix) -> Self {
        m.to_rows()
    }
}

/// Gap-weighted scores of every question against every document.
pub fn score_matrix(
    questions: &[LayeredEmbeddings],
    documents: &[LayeredEmbeddings],
    candidates: &CandidateLayerSet,
    mode: ExecMode,
) -> Result<ScoreMatrix, ObjectiveError> {
    if documents.len() != 2 * questions.len() {
        return Err(ObjectiveError::DimMismatch(format!(
            "{} questions need {} documents, got {}",
            questions.len(),
            2 * questions.len(),
            documents.len()
        )));
    }
    let cols = documents.len();
    let cells = exec::map_range(mode, questions.len() * cols, |k| {
        rerank::score_optimized(&questions[k / cols], &documents[k % cols], candidates)
    });
    let data = cells.into_iter().collect::<Result<Vec<_>, _>>()?;
    ScoreMatrix::new(questions.len(), cols, data)
}

/// `-log softmax(scores / tau)[positive]`, stable for large `|scores / tau|`.
pub fn info_nce_row(scores: &[f64], positive: usize, tau: f64) -> Result<f64, ObjectiveError> {
    check_tau(tau)?;
    if positive >= scores.len() {
        return Err(ObjectiveError::IndexOutOfRange {
            index: positive,
            len: scores.len(),
        });
    }
    let logits: Vec<f64> = scores.iter().map(|s| s / tau).collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let others: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != positive)
        .map(|(_, l)| (l - top).exp())
        .sum();
    let pos = logits[positive];
    if pos == top {
        // ln(1 + x) keeps precision when the positive dominates.
        Ok(others.ln_1p())
    } else {
        Ok((top - pos) + ((pos - top).exp() + others).ln())
    }
}

fn softmax(scores: &[f64], tau: f64) -> Vec<f64> {
    let logits: Vec<f64> = scores.iter().map(|s| s / tau).collect();
    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn check_batch(batch: &BatchSpec, scores: &ScoreMatrix) -> Result<(), ObjectiveError> {
    batch.validate()?;
    if scores.rows() != batch.size() || scores.cols() != 2 * batch.size() {
        return Err(ObjectiveError::DimMismatch(format!(
            "batch of {} needs a {}x{} score matrix, got {}x{}",
            batch.size(),
            batch.size(),
            2 * batch.size(),
            scores.rows(),
            scores.cols()
        )));
    }
    Ok(())
}

/// Sum over questions of `alpha_i` times the row's InfoNCE loss.
pub fn batch_loss(batch: &BatchSpec, scores: &ScoreMatrix) -> Result<f64, ObjectiveError> {
    check_batch(batch, scores)?;
    let alphas = batch.alphas();
    let mut total = 0.0;
    for (i, a) in alphas.iter().enumerate() {
        total += a * info_nce_row(scores.row(i), batch.positive_index(i), batch.tau)?;
    }
    Ok(total)
}

/// `d loss / d S[i][j] = alpha_i / tau * (softmax_j(S[i] / tau) - [j == i])`.
pub fn batch_loss_grad(batch: &BatchSpec, scores: &ScoreMatrix) -> Result<ScoreMatrix, ObjectiveError> {
    check_batch(batch, scores)?;
    let alphas = batch.alphas();
    let mut data = Vec::with_capacity(scores.rows() * scores.cols());
    for (i, a) in alphas.iter().enumerate() {
        let p = softmax(scores.row(i), batch.tau);
        let positive = batch.positive_index(i);
        data.extend(p.iter().enumerate().map(|(j, pj)| {
            let target = if j == positive { 1.0 } else { 0.0 };
            a / batch.tau * (pj - target)
        }));
    }
    ScoreMatrix::new(scores.rows(), scores.cols(), data)
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone, Serialize)]
pub struct GradientCheck {
    pub step: f64,
    /// `||analytic - numeric||_2 / max(||analytic||_2, ||numeric||_2)`.
    pub relative_error: f64,
    pub max_abs_error: f64,
}

/// Central finite differences of [`batch_loss`] with step `h`.
pub fn numeric_grad(batch: &BatchSpec, scores: &ScoreMatrix, h: f64) -> Result<ScoreMatrix, ObjectiveError> {
    check_batch(batch, scores)?;
    let mut probe = scores.clone();
    let mut data = Vec::with_capacity(scores.as_slice().len());
    for i in 0..scores.rows() {
        for j in 0..scores.cols() {
            let base = scores.get(i, j);
            probe.set(i, j, base + h);
            let up = batch_loss(batch, &probe)?;
            probe.set(i, j, base - h);
            let down = batch_loss(batch, &probe)?;
            probe.set(i, j, base);
            data.push((up - down) / (2.0 * h));
        }
    }
    ScoreMatrix::new(scores.rows(), scores.cols(), data)
}

pub fn check_gradient(batch: &BatchSpec, scores: &ScoreMatrix, h: f64) -> Result<GradientCheck, ObjectiveError> {
    let analytic = batch_loss_grad(batch, scores)?;
    let numeric = numeric_grad(batch, scores, h)?;
    let (mut diff2, mut a2, mut n2, mut max_abs) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for (a, n) in analytic.as_slice().iter().zip(numeric.as_slice()) {
        diff2 += (a - n) * (a - n);
        a2 += a * a;
        n2 += n * n;
        max_abs = max_abs.max((a - n).abs());
    }
    let denom = a2.sqrt().max(n2.sqrt());
    let relative_error = if denom == 0.0 { 0.0 } else { diff2.sqrt() / denom };
    Ok(GradientCheck {
        step: h,
        relative_error,
        max_abs_error: max_abs,
    })
}

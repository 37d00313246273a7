//! Ranking by contrasting layers.
//!
//! Every scorer compares final-layer query token vectors `q_i` against
//! document token vectors `d_j^(l)` at several encoder layers. The layer gap
//! of a pair is
//!
//! ```text
//! g(q_i, d_j) = max_{l in C} ( cos(q_i, d_j^(L)) - cos(q_i, d_j^(l)) )
//! ```
//!
//! where `C` is a set of premature candidate layers and `L` the last layer.
//! Scorers available:
//!
//! * [`score_naive`]: `avg_i max_j g(q_i, d_j)`
//! * [`score_optimized`]: `g(q_0, d_0) * avg_i max_j cos(q_i, d_j^(L))`
//! * [`score_token_contrast`]: MaxSim against, per document token, the layer
//!   farthest (L2) from its final-layer state
//! * [`plain_maxsim`]: final-layer MaxSim, no contrast
//!
//! Averages run over every query position including CLS (index 0). Cosine
//! with a zero vector is taken to be 0.

use std::collections::HashSet;
use std::ops::RangeInclusive;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingStore, LayeredEmbeddings};
use crate::exec::{self, ExecMode};
use crate::model::{rank_scored, RankedDocument};

pub const DEFAULT_BUCKET_COUNT: usize = 4;
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RerankError {
    #[error("cannot split {layers} premature layers into {buckets} buckets")]
    BadBucketCount { layers: usize, buckets: usize },
    #[error("bucket count {0} outside 2..=4 (set allow_any_bucket_count to override)")]
    BucketCountOutOfPolicy(usize),
    #[error("dimension mismatch: query {query}, document {doc}")]
    DimMismatch { query: usize, doc: usize },
    #[error("candidate layer {layer} invalid for a {total}-layer encoder")]
    InvalidLayer { layer: usize, total: usize },
    #[error("empty candidate layer set")]
    NoCandidateLayers,
    #[error("need at least {need} encoder layers, have {have}")]
    TooFewLayers { need: usize, have: usize },
    #[error("unknown document id {0}")]
    UnknownDocId(String),
    #[error("k must be at least 1")]
    ZeroK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    NaiveGap,
    #[default]
    GapWeighted,
    TokenContrast,
    PlainMaxsim,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::NaiveGap,
        Strategy::GapWeighted,
        Strategy::TokenContrast,
        Strategy::PlainMaxsim,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::NaiveGap => "naive-gap",
            Strategy::GapWeighted => "gap-weighted",
            Strategy::TokenContrast => "token-contrast",
            Strategy::PlainMaxsim => "plain-maxsim",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| {
                format!("unknown rerank strategy {s:?}; expected naive-gap, gap-weighted, token-contrast or plain-maxsim")
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankConfig {
    pub strategy: Strategy,
    pub bucket_count: usize,
    pub seed: u64,
    pub k: usize,
    pub allow_any_bucket_count: bool,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            strategy: Strategy::default(),
            bucket_count: DEFAULT_BUCKET_COUNT,
            seed: 0,
            k: DEFAULT_K,
            allow_any_bucket_count: false,
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<(), RerankError> {
        if self.k == 0 {
            return Err(RerankError::ZeroK);
        }
        if !self.allow_any_bucket_count && !(2..=4).contains(&self.bucket_count) {
            return Err(RerankError::BucketCountOutOfPolicy(self.bucket_count));
        }
        Ok(())
    }
}

/// Premature layers sampled one per bucket. Never contains the last layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateLayerSet {
    layers: Vec<usize>,
    bucket_count: usize,
    seed: u64,
}

impl CandidateLayerSet {
    /// An explicit set, checked against a `total_layers`-layer encoder.
    pub fn explicit(layers: Vec<usize>, total_layers: usize) -> Result<Self, RerankError> {
        let set = CandidateLayerSet {
            bucket_count: layers.len(),
            layers,
            seed: 0,
        };
        set.check(total_layers)?;
        Ok(set)
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn bucket_count(&self) -> usize {
        self.bucket_count
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Every layer must lie in `1..total_layers`.
    pub fn check(&self, total_layers: usize) -> Result<(), RerankError> {
        if self.layers.is_empty() {
            return Err(RerankError::NoCandidateLayers);
        }
        for &layer in &self.layers {
            if layer == 0 || layer >= total_layers {
                return Err(RerankError::InvalidLayer {
                    layer,
                    total: total_layers,
                });
            }
        }
        Ok(())
    }
}

/// Splits layers `1..=total_layers-1` into `buckets` contiguous runs whose
/// sizes differ by at most one, larger runs first.
pub fn bucket_partition(
    total_layers: usize,
    buckets: usize,
) -> Result<Vec<RangeInclusive<usize>>, RerankError> {
    let premature = total_layers.saturating_sub(1);
    if buckets == 0 || buckets > premature {
        return Err(RerankError::BadBucketCount {
            layers: premature,
            buckets,
        });
    }
    let base = premature / buckets;
    let extra = premature % buckets;
    let mut start = 1;
    Ok((0..buckets)
        .map(|b| {
            let size = base + usize::from(b < extra);
            let range = start..=start + size - 1;
            start += size;
            range
        })
        .collect())
}

/// Draws one layer uniformly from each bucket with a seeded ChaCha8 stream.
pub fn select_candidate_layers(
    total_layers: usize,
    buckets: usize,
    seed: u64,
) -> Result<CandidateLayerSet, RerankError> {
    if total_layers < 3 {
        return Err(RerankError::TooFewLayers {
            need: 3,
            have: total_layers,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = bucket_partition(total_layers, buckets)?
        .into_iter()
        .map(|r| rng.gen_range(r))
        .collect();
    Ok(CandidateLayerSet {
        layers,
        bucket_count: buckets,
        seed,
    })
}

/// Unit-normalized copy of selected rows, in f64.
struct UnitRows {
    dim: usize,
    data: Vec<f64>,
}

impl UnitRows {
    fn of_layer(e: &LayeredEmbeddings, layer: usize) -> Self {
        let dim = e.dim();
        let mut data = Vec::with_capacity(e.tokens() * dim);
        for t in 0..e.tokens() {
            push_unit(&mut data, e.row(layer, t));
        }
        UnitRows { dim, data }
    }

    fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    #[inline]
    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn push_unit(out: &mut Vec<f64>, v: &[f32]) {
    let norm = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm > 0.0 {
        out.extend(v.iter().map(|&x| x as f64 / norm));
    } else {
        out.extend(std::iter::repeat_n(0.0, v.len()));
    }
}

fn unit(v: &[f32]) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len());
    push_unit(&mut out, v);
    out
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dims(u: &LayeredEmbeddings, d: &LayeredEmbeddings) -> Result<(), RerankError> {
    if u.dim() != d.dim() {
        return Err(RerankError::DimMismatch {
            query: u.dim(),
            doc: d.dim(),
        });
    }
    Ok(())
}

fn mean_of_max<F>(n_query: usize, n_doc: usize, f: F) -> f64
where
    F: Fn(usize, usize) -> f64,
{
    let total: f64 = (0..n_query)
        .map(|i| {
            (0..n_doc)
                .map(|j| f(i, j))
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    total / n_query as f64
}

/// `max_{l in C} cos(q, d_token^(L)) - cos(q, d_token^(l))` for one query
/// vector against one document token.
pub fn token_gap(
    q: &[f32],
    doc: &LayeredEmbeddings,
    token: usize,
    candidates: &CandidateLayerSet,
) -> Result<f64, RerankError> {
    if q.len() != doc.dim() {
        return Err(RerankError::DimMismatch {
            query: q.len(),
            doc: doc.dim(),
        });
    }
    candidates.check(doc.layers())?;
    let q = unit(q);
    let last = dot(&q, &unit(doc.row(doc.layers(), token)));
    Ok(candidates
        .layers()
        .iter()
        .map(|&l| last - dot(&q, &unit(doc.row(l, token))))
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Mean over query positions of the best per-token layer gap.
pub fn score_naive(
    u: &LayeredEmbeddings,
    d: &LayeredEmbeddings,
    candidates: &CandidateLayerSet,
) -> Result<f64, RerankError> {
    check_dims(u, d)?;
    candidates.check(d.layers())?;
    let q = UnitRows::of_layer(u, u.layers());
    let last = UnitRows::of_layer(d, d.layers());
    let premature: Vec<UnitRows> = candidates
        .layers()
        .iter()
        .map(|&l| UnitRows::of_layer(d, l))
        .collect();
    Ok(mean_of_max(q.len(), last.len(), |i, j| {
        let qi = q.row(i);
        let top = dot(qi, last.row(j));
        premature
            .iter()
            .map(|p| top - dot(qi, p.row(j)))
            .fold(f64::NEG_INFINITY, f64::max)
    }))
}

/// Layer gap of the two CLS vectors. May be negative.
pub fn gap_weight(
    u: &LayeredEmbeddings,
    d: &LayeredEmbeddings,
    candidates: &CandidateLayerSet,
) -> Result<f64, RerankError> {
    check_dims(u, d)?;
    token_gap(u.row(u.layers(), 0), d, 0, candidates)
}

/// Final-layer MaxSim averaged over query positions.
pub fn plain_maxsim(u: &LayeredEmbeddings, d: &LayeredEmbeddings) -> Result<f64, RerankError> {
    check_dims(u, d)?;
    let q = UnitRows::of_layer(u, u.layers());
    let last = UnitRows::of_layer(d, d.layers());
    Ok(mean_of_max(q.len(), last.len(), |i, j| dot(q.row(i), last.row(j))))
}

/// Gap weight times final-layer MaxSim.
pub fn score_optimized(
    u: &LayeredEmbeddings,
    d: &LayeredEmbeddings,
    candidates: &CandidateLayerSet,
) -> Result<f64, RerankError> {
    let weight = gap_weight(u, d, candidates)?;
    Ok(weight * plain_maxsim(u, d)?)
}

/// For each document token, the premature layer `1 <= l < L` whose raw state
/// lies farthest (L2) from the final one; ties go to the lowest layer.
pub fn contrast_layers(d: &LayeredEmbeddings) -> Result<Vec<usize>, RerankError> {
    let total = d.layers();
    if total < 2 {
        return Err(RerankError::TooFewLayers {
            need: 2,
            have: total,
        });
    }
    Ok((0..d.tokens())
        .map(|j| {
            let last = d.row(total, j);
            let mut best = (1, f64::NEG_INFINITY);
            for l in 1..total {
                let dist = d
                    .row(l, j)
                    .iter()
                    .zip(last)
                    .map(|(&a, &b)| {
                        let diff = a as f64 - b as f64;
                        diff * diff
                    })
                    .sum::<f64>();
                if dist > best.1 {
                    best = (l, dist);
                }
            }
            best.0
        })
        .collect())
}

/// MaxSim against each document token taken at its most-changed layer.
pub fn score_token_contrast(
    u: &LayeredEmbeddings,
    d: &LayeredEmbeddings,
) -> Result<f64, RerankError> {
    check_dims(u, d)?;
    let chosen = contrast_layers(d)?;
    let q = UnitRows::of_layer(u, u.layers());
    let mut rows = Vec::with_capacity(d.tokens() * d.dim());
    for (j, &l) in chosen.iter().enumerate() {
        push_unit(&mut rows, d.row(l, j));
    }
    let doc = UnitRows {
        dim: d.dim(),
        data: rows,
    };
    Ok(mean_of_max(q.len(), doc.len(), |i, j| dot(q.row(i), doc.row(j))))
}

/// Scores one pair under `strategy`.
pub fn score(
    strategy: Strategy,
    u: &LayeredEmbeddings,
    d: &LayeredEmbeddings,
    candidates: &CandidateLayerSet,
) -> Result<f64, RerankError> {
    match strategy {
        Strategy::NaiveGap => score_naive(u, d, candidates),
        Strategy::GapWeighted => score_optimized(u, d, candidates),
        Strategy::TokenContrast => score_token_contrast(u, d),
        Strategy::PlainMaxsim => plain_maxsim(u, d),
    }
}

/// A configured reranker. Candidate layers are drawn once at construction.
#[derive(Debug, Clone)]
pub struct Reranker {
    config: RerankConfig,
    candidates: CandidateLayerSet,
}

impl Reranker {
    pub fn new(config: RerankConfig, total_layers: usize) -> Result<Self, RerankError> {
        config.validate()?;
        let candidates = select_candidate_layers(total_layers, config.bucket_count, config.seed)?;
        Ok(Reranker { config, candidates })
    }

    pub fn with_candidates(
        config: RerankConfig,
        candidates: CandidateLayerSet,
    ) -> Result<Self, RerankError> {
        if config.k == 0 {
            return Err(RerankError::ZeroK);
        }
        Ok(Reranker { config, candidates })
    }

    pub fn config(&self) -> &RerankConfig {
        &self.config
    }

    pub fn candidates(&self) -> &CandidateLayerSet {
        &self.candidates
    }

    /// Scores every candidate against `u` and returns the top `k`.
    /// Duplicate ids are scored once.
    pub fn rerank(
        &self,
        candidates: &[String],
        u: &LayeredEmbeddings,
        store: &EmbeddingStore,
        mode: ExecMode,
    ) -> Result<Vec<RankedDocument>, RerankError> {
        self.rerank_top(candidates, u, store, self.config.k, mode)
    }

    pub fn rerank_top(
        &self,
        candidates: &[String],
        u: &LayeredEmbeddings,
        store: &EmbeddingStore,
        k: usize,
        mode: ExecMode,
    ) -> Result<Vec<RankedDocument>, RerankError> {
        let mut seen = HashSet::new();
        let mut docs = Vec::with_capacity(candidates.len());
        for id in candidates {
            if !seen.insert(id.as_str()) {
                continue;
            }
            let emb = store
                .get(id)
                .ok_or_else(|| RerankError::UnknownDocId(id.clone()))?;
            docs.push((id.as_str(), emb));
        }
        let scores = exec::map_slice(mode, &docs, |(_, d)| {
            score(self.config.strategy, u, d, &self.candidates)
        });
        let scored = docs
            .iter()
            .zip(scores)
            .map(|((id, _), s)| s.map(|s| (id.to_string(), s)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(rank_scored(scored, k))
    }
}

//! End-to-end orchestration: ingest, index, ask, evaluate, plus the offline
//! rerank and gradient checks behind the CLI.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{AnswerMode, ConfigError, PipelineConfig};
use crate::embedding::{cls_vector, encode, load_store, save_store, EmbeddingStore, EncoderProvider, LayeredEmbeddings};
use crate::eval::{evaluate_run, load_corpus, load_qa, write_jsonl, write_report, EvalReport, RunRecord, StageTiming, UnrolledArtifact};
use crate::exec::{self, ExecMode};
use crate::index::{load_index, save_index, FlatIndex};
use crate::llm::{ChatGateway, LlmSession};
use crate::model::{serialize_unrolled, Document, RankedDocument};
use crate::objective::{check_gradient, AlphaMode, BatchQuestion, BatchSpec, GradientCheck, ScoreMatrix};
use crate::prompt::PromptSet;
use crate::reasoning::{
    complete_and_answer_unified, complete_chain, generate_answer, key_extract_step, CompletionContext,
    KeyExtractOutcome, KeyExtractState, KEY_EXTRACT_DOCS,
};
use crate::rerank::{Reranker, Strategy};
use crate::unroll::unroll;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Ingest,
    BuildIndex,
    Unroll,
    EncodeQuery,
    Retrieve,
    Rerank,
    KeyExtract,
    CompleteChain,
    GenerateAnswer,
    Reason,
    Evaluate,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Load => "load",
            Stage::Ingest => "ingest",
            Stage::BuildIndex => "build_index",
            Stage::Unroll => "unroll",
            Stage::EncodeQuery => "encode_query",
            Stage::Retrieve => "retrieve",
            Stage::Rerank => "rerank",
            Stage::KeyExtract => "key_extract",
            Stage::CompleteChain => "complete_chain",
            Stage::GenerateAnswer => "generate_answer",
            Stage::Reason => "reason",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: BoxError,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl PipelineError {
    pub fn stage(&self) -> Option<Stage> {
        match self {
            PipelineError::Stage { stage, .. } => Some(*stage),
            PipelineError::Config(_) => None,
        }
    }
}

fn at<E: Into<BoxError>>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        source: e.into(),
    }
}

fn at_path<E: fmt::Display>(stage: Stage, path: &Path) -> impl FnOnce(E) -> PipelineError + '_ {
    move |e| PipelineError::Stage {
        stage,
        source: format!("{}: {e}", path.display()).into(),
    }
}

/// The text a document is encoded from.
pub fn document_text(doc: &Document) -> String {
    if doc.title.trim().is_empty() {
        doc.text.clone()
    } else {
        format!("{} {}", doc.title, doc.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedDocument {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub documents: usize,
    pub encoded: usize,
    pub failed: Vec<FailedDocument>,
}

impl IngestReport {
    pub fn is_partial(&self) -> bool {
        !self.failed.is_empty()
    }
}

/// Encodes every corpus document and writes the store. Documents that fail
/// to encode are left out and listed in the report.
pub fn cmd_ingest(
    corpus: &Path,
    out_store: &Path,
    encoder: &dyn EncoderProvider,
    max_seq_len: usize,
    mode: ExecMode,
) -> Result<IngestReport, PipelineError> {
    let docs = load_corpus(corpus).map_err(at(Stage::Ingest))?;
    let encoded = exec::map_slice(mode, &docs, |d| encode(&document_text(d), encoder, max_seq_len));
    let mut store = EmbeddingStore::new();
    let mut failed = Vec::new();
    for (doc, result) in docs.iter().zip(encoded) {
        match result.and_then(|e| store.insert(doc.id.clone(), e)) {
            Ok(()) => log::info!("encoded {}", doc.id),
            Err(e) => {
                log::warn!("failed to encode {}: {e}", doc.id);
                failed.push(FailedDocument {
                    id: doc.id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    save_store(&store, out_store).map_err(at_path(Stage::Ingest, out_store))?;
    Ok(IngestReport {
        documents: docs.len(),
        encoded: store.len(),
        failed,
    })
}

pub fn cmd_build_index(store_path: &Path, index_path: &Path) -> Result<usize, PipelineError> {
    let store = load_store(store_path).map_err(at_path(Stage::BuildIndex, store_path))?;
    let index = FlatIndex::build(&store).map_err(at(Stage::BuildIndex))?;
    save_index(&index, index_path).map_err(at_path(Stage::BuildIndex, index_path))?;
    Ok(index.len())
}

/// Everything needed to answer questions, loaded once and shared read-only.
pub struct Engine {
    config: PipelineConfig,
    docs: BTreeMap<String, Document>,
    store: EmbeddingStore,
    index: FlatIndex,
    reranker: Reranker,
    encoder: Box<dyn EncoderProvider>,
    gateway: Box<dyn ChatGateway>,
    prompts: PromptSet,
}

impl Engine {
    /// Loads index, store and corpus from the configured paths, then builds
    /// the encoder and gateway. Nothing is sent to the model here.
    pub fn open(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let index_path = config.require("index", &config.paths.index)?;
        let index = load_index(&index_path).map_err(at_path(Stage::Load, &index_path))?;
        let store_path = config.require("store", &config.paths.store)?;
        let store = load_store(&store_path).map_err(at_path(Stage::Load, &store_path))?;
        let corpus_path = config.require("corpus", &config.paths.corpus)?;
        let docs = load_corpus(&corpus_path).map_err(at(Stage::Load))?;
        let encoder = config.encoder.build()?;
        let gateway = config.gateway.build().map_err(at(Stage::Load))?;
        Self::from_parts(config, docs, store, index, encoder, gateway)
    }

    pub fn from_parts(
        config: PipelineConfig,
        docs: Vec<Document>,
        store: EmbeddingStore,
        index: FlatIndex,
        encoder: Box<dyn EncoderProvider>,
        gateway: Box<dyn ChatGateway>,
    ) -> Result<Self, PipelineError> {
        config.validate()?;
        let docs: BTreeMap<String, Document> = docs.into_iter().map(|d| (d.id.clone(), d)).collect();
        if let Some(id) = index.ids().iter().find(|id| store.get(id).is_none() || !docs.contains_key(*id)) {
            return Err(at(Stage::Load)(format!(
                "indexed document {id} is missing from the store or corpus"
            )));
        }
        let (layers, _) = store.shape().ok_or_else(|| at(Stage::Load)("embedding store is empty"))?;
        let reranker = Reranker::new(config.rerank.clone(), layers).map_err(at(Stage::Load))?;
        let prompts = match &config.paths.prompts {
            Some(dir) => PromptSet::with_overrides(dir).map_err(at(Stage::Load))?,
            None => PromptSet::builtin(),
        };
        Ok(Engine {
            config,
            docs,
            store,
            index,
            reranker,
            encoder,
            gateway,
            prompts,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn reranker(&self) -> &Reranker {
        &self.reranker
    }

    /// Answers one question. Errors carry the stage that failed.
    pub fn ask(&self, id: &str, question: &str) -> Result<RunRecord, PipelineError> {
        let mut rec = RunRecord::new(id, question);
        let session = LlmSession::new(self.gateway.as_ref(), &self.config.gateway);
        let out = self.execute(&mut rec, &session);
        rec.llm_calls = session.calls();
        out.map(|_| rec)
    }

    /// Like [`Engine::ask`] but never fails: the error lands in the record.
    pub fn run(&self, id: &str, question: &str) -> RunRecord {
        let mut rec = RunRecord::new(id, question);
        let session = LlmSession::new(self.gateway.as_ref(), &self.config.gateway);
        if let Err(e) = self.execute(&mut rec, &session) {
            log::warn!("question {id} failed: {e}");
            rec.error = Some(e.to_string());
        }
        rec.llm_calls = session.calls();
        rec
    }

    fn execute(&self, rec: &mut RunRecord, session: &LlmSession<'_>) -> Result<(), PipelineError> {
        let cfg = &self.config;
        let question = rec.question.clone();
        let u = timed(rec, Stage::Unroll, || {
            unroll(&question, session, &self.prompts, cfg.max_attempts)
        })?;
        let query = serialize_unrolled(&u);
        rec.unrolled = Some(UnrolledArtifact {
            sub_questions: u.sub_questions.clone(),
            chain: u.chain.render_list(),
            hop_count: u.hop_count,
            query: query.clone(),
        });

        let k = cfg.rerank.k;
        let depth = match cfg.mode {
            AnswerMode::SingleStep => k,
            AnswerMode::KeyExtract => k.max(KEY_EXTRACT_DOCS),
        };
        let mut ranked = self.retrieve(rec, &query, depth)?;

        if cfg.mode == AnswerMode::KeyExtract {
            let mut state = KeyExtractState::new(question.clone(), query, cfg.key_extract_iterations);
            loop {
                let top = self.documents(&ranked, depth);
                let step = timed(rec, Stage::KeyExtract, || {
                    key_extract_step(&state, &top, session, &self.prompts)
                });
                match step {
                    Ok(KeyExtractOutcome::Answer(answer)) => {
                        rec.predicted_answer = Some(answer);
                        return Ok(());
                    }
                    Ok(KeyExtractOutcome::Continue(next)) => {
                        rec.key_sentences = next.key_sentences.clone();
                        state = next;
                        if state.iteration >= state.max_iterations {
                            log::info!("key extraction hit {} iterations; answering single-step", state.max_iterations);
                            break;
                        }
                        ranked = self.retrieve(rec, &state.augmented_query, depth)?;
                    }
                    Err(e) => return Err(e),
                }
            }
        }

        let docs = self.documents(&ranked, k);
        let ctx = CompletionContext::new(docs, question, u.sub_questions.clone(), u.chain.clone())
            .map_err(at(Stage::CompleteChain))?;
        let answer = if cfg.unified_reasoning {
            let (chain, answer) = timed(rec, Stage::Reason, || {
                complete_and_answer_unified(&ctx, session, &self.prompts, cfg.max_attempts)
            })?;
            rec.completed_chain = Some(chain);
            answer
        } else {
            let chain = timed(rec, Stage::CompleteChain, || {
                complete_chain(&ctx, session, &self.prompts, cfg.max_attempts)
            })?;
            let answer = timed(rec, Stage::GenerateAnswer, || {
                generate_answer(&ctx, &chain, session, &self.prompts, cfg.max_attempts)
            })?;
            rec.completed_chain = Some(chain);
            answer
        };
        if answer.is_empty() {
            rec.warnings.push("empty answer".into());
        }
        rec.predicted_answer = Some(answer);
        Ok(())
    }

    /// Encode, first-stage search for `n`, rerank down to `depth`. Records
    /// the candidate list and the first `k` reranked ids.
    fn retrieve(&self, rec: &mut RunRecord, query: &str, depth: usize) -> Result<Vec<RankedDocument>, PipelineError> {
        let cfg = &self.config;
        let u_emb = timed(rec, Stage::EncodeQuery, || {
            encode(query, self.encoder.as_ref(), cfg.encoder.max_seq_len)
        })?;
        let hits = timed(rec, Stage::Retrieve, || search_cls(&self.index, &u_emb, cfg.retrieval.n, cfg.exec))?;
        rec.candidates = hits.iter().map(|h| h.doc_id.clone()).collect();
        let candidates = rec.candidates.clone();
        let ranked = timed(rec, Stage::Rerank, || {
            self.reranker.rerank_top(&candidates, &u_emb, &self.store, depth, cfg.exec)
        })?;
        rec.retrieved = ranked.iter().take(cfg.rerank.k).map(|r| r.doc_id.clone()).collect();
        Ok(ranked)
    }

    fn documents(&self, ranked: &[RankedDocument], limit: usize) -> Vec<Document> {
        ranked
            .iter()
            .take(limit)
            .filter_map(|r| self.docs.get(&r.doc_id).cloned())
            .collect()
    }

    /// Runs every example, at most `eval_threads` at a time. Order of the
    /// returned records follows `qa`.
    pub fn run_all(&self, qa: &[crate::model::QaExample]) -> Vec<RunRecord> {
        exec::with_threads(self.config.exec, self.config.eval_threads, || {
            exec::map_slice(self.config.exec, qa, |ex| self.run(&ex.id, &ex.question))
        })
    }
}

fn search_cls(
    index: &FlatIndex,
    u: &LayeredEmbeddings,
    n: usize,
    mode: ExecMode,
) -> Result<Vec<RankedDocument>, BoxError> {
    let q = cls_vector(u, u.layers())?;
    Ok(index.search_with(q, n, mode)?)
}

fn timed<T, E, F>(rec: &mut RunRecord, stage: Stage, f: F) -> Result<T, PipelineError>
where
    E: Into<BoxError>,
    F: FnOnce() -> Result<T, E>,
{
    rec.stages.push(stage.as_str().to_string());
    let start = Instant::now();
    let out = f();
    rec.timings.push(StageTiming {
        stage: stage.as_str().to_string(),
        millis: start.elapsed().as_secs_f64() * 1e3,
    });
    out.map_err(at(stage))
}

/// Answers a single question and, when `paths.output` is set, writes the
/// run record to `<output>/record.json`.
pub fn cmd_ask(config: PipelineConfig, question: &str) -> Result<RunRecord, PipelineError> {
    let output = config.paths.output.clone();
    let engine = Engine::open(config)?;
    let rec = engine.ask("ask", question)?;
    if let Some(dir) = output {
        std::fs::create_dir_all(&dir).map_err(at_path(Stage::Evaluate, &dir))?;
        let path = dir.join("record.json");
        let text = serde_json::to_string_pretty(&rec).map_err(at(Stage::Evaluate))?;
        std::fs::write(&path, text + "\n").map_err(at_path(Stage::Evaluate, &path))?;
    }
    Ok(rec)
}

#[derive(Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub records: Vec<RunRecord>,
    pub files: Vec<PathBuf>,
}

/// Evaluates the QA set. With `paths.output` set, writes `report.json`,
/// `examples.jsonl` (both deterministic) and `records.jsonl` (full records
/// including timings).
pub fn cmd_eval(config: PipelineConfig) -> Result<EvalOutcome, PipelineError> {
    let qa_path = config.require("qa", &config.paths.qa)?;
    let output = config.paths.output.clone();
    let qa = load_qa(&qa_path).map_err(at(Stage::Load))?;
    let engine = Engine::open(config)?;
    let records = engine.run_all(&qa);
    let report = evaluate_run(&records, &qa).map_err(at(Stage::Evaluate))?;
    let mut files = Vec::new();
    if let Some(dir) = output {
        let (summary, examples) = write_report(&dir, &report).map_err(at(Stage::Evaluate))?;
        let full = dir.join("records.jsonl");
        write_jsonl(&full, &records).map_err(at(Stage::Evaluate))?;
        files.extend([summary, examples, full]);
    }
    Ok(EvalOutcome {
        report,
        records,
        files,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct StrategyRun {
    pub strategy: Strategy,
    pub ranking: Vec<RankedDocument>,
    pub millis: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RerankBench {
    pub query: String,
    pub candidate_layers: Vec<usize>,
    pub exec: ExecMode,
    pub runs: Vec<StrategyRun>,
}

/// Scores `candidates` (all stored documents when empty) against `query`
/// with every strategy. Needs only the store and an encoder.
pub fn cmd_rerank_bench(
    config: &PipelineConfig,
    query: &str,
    candidates: &[String],
) -> Result<RerankBench, PipelineError> {
    config.validate()?;
    let store_path = config.require("store", &config.paths.store)?;
    let store = load_store(&store_path).map_err(at_path(Stage::Load, &store_path))?;
    let (layers, _) = store.shape().ok_or_else(|| at(Stage::Load)("embedding store is empty"))?;
    let encoder = config.encoder.build()?;
    let u = encode(query, encoder.as_ref(), config.encoder.max_seq_len).map_err(at(Stage::EncodeQuery))?;
    let ids: Vec<String> = if candidates.is_empty() {
        store.iter().map(|(id, _)| id.to_string()).collect()
    } else {
        candidates.to_vec()
    };
    let mut runs = Vec::new();
    let mut candidate_layers = Vec::new();
    for strategy in Strategy::ALL {
        let mut rc = config.rerank.clone();
        rc.strategy = strategy;
        let reranker = Reranker::new(rc, layers).map_err(at(Stage::Rerank))?;
        candidate_layers = reranker.candidates().layers().to_vec();
        let start = Instant::now();
        let ranking = reranker
            .rerank_top(&ids, &u, &store, ids.len(), config.exec)
            .map_err(at(Stage::Rerank))?;
        runs.push(StrategyRun {
            strategy,
            ranking,
            millis: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(RerankBench {
        query: query.to_string(),
        candidate_layers,
        exec: config.exec,
        runs,
    })
}

/// A batch plus its score matrix, as read by `loss-check --input`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossCheckInput {
    pub batch: BatchSpec,
    pub scores: ScoreMatrix,
}

#[derive(Debug, Clone, Serialize)]
pub struct LossCheckResult {
    pub batch_size: usize,
    pub loss: f64,
    pub check: GradientCheck,
}

pub fn loss_check(inputs: &[LossCheckInput], h: f64) -> Result<Vec<LossCheckResult>, PipelineError> {
    inputs
        .iter()
        .map(|inp| {
            let loss = crate::objective::batch_loss(&inp.batch, &inp.scores).map_err(at(Stage::Evaluate))?;
            let check = check_gradient(&inp.batch, &inp.scores, h).map_err(at(Stage::Evaluate))?;
            Ok(LossCheckResult {
                batch_size: inp.batch.size(),
                loss,
                check,
            })
        })
        .collect()
}

/// Seeded random batches: `b` in 1..=max_b, sub-question counts in 0..=6,
/// scores uniform in [-1, 1].
pub fn random_loss_inputs(
    count: usize,
    max_b: usize,
    seed: u64,
    tau: f64,
    alpha_mode: AlphaMode,
) -> Vec<LossCheckInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let b = rng.gen_range(1..=max_b.max(1));
            let questions = (0..b)
                .map(|_| BatchQuestion {
                    id: None,
                    sub_questions: rng.gen_range(0..=6),
                    chain_length: rng.gen_range(1..=6),
                })
                .collect();
            let rows = (0..b)
                .map(|_| (0..2 * b).map(|_| rng.gen_range(-1.0..=1.0)).collect())
                .collect();
            LossCheckInput {
                batch: BatchSpec::new(questions, tau, alpha_mode),
                scores: ScoreMatrix::from_rows(rows).expect("finite rectangular scores"),
            }
        })
        .collect()
}

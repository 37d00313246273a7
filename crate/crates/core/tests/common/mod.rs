#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use cooprag::config::PipelineConfig;
use cooprag::embedding::HashingEncoder;
use cooprag::eval::load_qa;
use cooprag::llm::{ChatGateway, ChatRequest, GatewayError, MockGateway, ProviderKind};
use cooprag::pipeline::{cmd_build_index, cmd_ingest, Engine};
use cooprag::ExecMode;
use serde::Deserialize;

/// Fixture directory of the core crate; this module is also compiled into
/// the CLI tests, whose manifest dir is a sibling.
pub fn fixtures() -> PathBuf {
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let local = manifest.join("tests/fixtures");
    if local.is_dir() {
        local
    } else {
        manifest.join("../core/tests/fixtures")
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct QuestionScript {
    pub unroll: String,
    pub complete: String,
    pub reason: String,
    pub key_extract: Vec<String>,
}

pub fn load_script() -> BTreeMap<String, QuestionScript> {
    let text = std::fs::read_to_string(fixtures().join("e2e/llm_script.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Answers by recognizing which question and which prompt a request is for.
/// Key-extraction replies are served in order per question. When
/// `record_dir` is set every exchange is also written as a mock fixture.
pub struct ScriptGateway {
    script: BTreeMap<String, QuestionScript>,
    record_dir: Option<PathBuf>,
    key_extract_seen: Mutex<HashMap<String, usize>>,
    calls: Mutex<Vec<String>>,
}

impl ScriptGateway {
    pub fn new(script: BTreeMap<String, QuestionScript>) -> Self {
        ScriptGateway {
            script,
            record_dir: None,
            key_extract_seen: Mutex::new(HashMap::new()),
            calls: Mutex::new(Vec::new()),
        }
    }

    pub fn recording(mut self, dir: &Path) -> Self {
        std::fs::create_dir_all(dir).unwrap();
        self.record_dir = Some(dir.to_path_buf());
        self
    }

    /// Prompt kinds in call order.
    pub fn calls(&self) -> Vec<String> {
        self.calls.lock().unwrap().clone()
    }
}

pub fn prompt_kind(prompt: &str) -> &'static str {
    let reconstructed = prompt.contains("Reconstructed Reasoning Chain:");
    let answer = prompt.contains("GENERATED_ANSWER:");
    if reconstructed && answer {
        "unified"
    } else if answer {
        "reason"
    } else if reconstructed {
        "complete"
    } else if prompt.contains("So the answer is:") {
        "key_extract"
    } else {
        "unroll"
    }
}

impl ChatGateway for ScriptGateway {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        let prompt = &req.messages.last().unwrap().content;
        let (question, script) = self
            .script
            .iter()
            .find(|(q, _)| prompt.contains(q.as_str()))
            .ok_or_else(|| GatewayError::MissingFixture("unknown question".into()))?;
        let kind = prompt_kind(prompt);
        self.calls.lock().unwrap().push(kind.to_string());
        let reply = match kind {
            "unroll" => script.unroll.clone(),
            "complete" => script.complete.clone(),
            "reason" => script.reason.clone(),
            "unified" => format!("{}\n{}", script.complete, script.reason),
            _ => {
                let mut seen = self.key_extract_seen.lock().unwrap();
                let n = seen.entry(question.clone()).or_default();
                let reply = script
                    .key_extract
                    .get(*n)
                    .cloned()
                    .ok_or_else(|| GatewayError::MissingFixture("key extraction script exhausted".into()))?;
                *n += 1;
                reply
            }
        };
        if let Some(dir) = &self.record_dir {
            std::fs::write(MockGateway::fixture_path(dir, req), &reply).unwrap();
        }
        Ok(reply)
    }
}

/// Copies the e2e corpus into `dir`, ingests it with the hashing encoder,
/// builds the index and records mock LLM fixtures for every QA example.
/// Returns a config that runs entirely offline from `dir`.
pub fn prepare_e2e(dir: &Path) -> PipelineConfig {
    let src = fixtures().join("e2e");
    for name in ["corpus.jsonl", "qa.jsonl"] {
        std::fs::copy(src.join(name), dir.join(name)).unwrap();
    }
    let mut cfg = PipelineConfig::default();
    cfg.paths.corpus = Some(dir.join("corpus.jsonl"));
    cfg.paths.qa = Some(dir.join("qa.jsonl"));
    cfg.paths.store = Some(dir.join("store.bin"));
    cfg.paths.index = Some(dir.join("index.bin"));
    cfg.paths.output = Some(dir.join("out"));
    cfg.gateway.provider = ProviderKind::Mock;
    cfg.gateway.fixtures_dir = Some(dir.join("llm"));
    cfg.retrieval.n = 10;

    let encoder = HashingEncoder::new(cfg.encoder.layers, cfg.encoder.dim);
    let report = cmd_ingest(
        cfg.paths.corpus.as_ref().unwrap(),
        cfg.paths.store.as_ref().unwrap(),
        &encoder,
        cfg.encoder.max_seq_len,
        ExecMode::Parallel,
    )
    .unwrap();
    assert!(!report.is_partial());
    cmd_build_index(cfg.paths.store.as_ref().unwrap(), cfg.paths.index.as_ref().unwrap()).unwrap();
    record_fixtures(&cfg);
    cfg
}

/// Runs every QA example once against the script, writing fixtures into
/// the configured mock directory.
pub fn record_fixtures(cfg: &PipelineConfig) {
    let gw = ScriptGateway::new(load_script()).recording(cfg.gateway.fixtures_dir.as_ref().unwrap());
    let engine = open_with(cfg, Box::new(gw));
    for ex in load_qa(cfg.paths.qa.as_ref().unwrap()).unwrap() {
        engine.ask(&ex.id, &ex.question).unwrap();
    }
}

pub fn open_with(cfg: &PipelineConfig, gateway: Box<dyn ChatGateway>) -> Engine {
    let docs = cooprag::eval::load_corpus(cfg.paths.corpus.as_ref().unwrap()).unwrap();
    let store = cooprag::embedding::load_store(cfg.paths.store.as_ref().unwrap()).unwrap();
    let index = cooprag::index::load_index(cfg.paths.index.as_ref().unwrap()).unwrap();
    let encoder = cfg.encoder.build().unwrap();
    Engine::from_parts(cfg.clone(), docs, store, index, encoder, gateway).unwrap()
}

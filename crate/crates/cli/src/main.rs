use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use cooprag::config::{AnswerMode, EncoderKind, PipelineConfig};
use cooprag::llm::ProviderKind;
use cooprag::objective::AlphaMode;
use cooprag::pipeline::{self, LossCheckInput};
use cooprag::{ExecMode, Strategy};

#[derive(Parser)]
#[command(name = "cooprag", version, about = "Multi-hop retrieval-augmented QA engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a JSONL corpus into an all-layer embedding store.
    Ingest(Opts),
    /// Build the flat cosine index from an embedding store.
    BuildIndex(Opts),
    /// Answer one question and print the run record as JSON.
    Ask {
        question: String,
        #[command(flatten)]
        opts: Opts,
    },
    /// Run every QA example and write the evaluation report.
    Eval(Opts),
    /// Rerank candidates for a query with every strategy.
    RerankBench {
        /// Query text, encoded as is.
        #[arg(long)]
        query: String,
        /// Comma-separated document ids; defaults to the whole store.
        #[arg(long, value_delimiter = ',')]
        candidates: Vec<String>,
        #[command(flatten)]
        opts: Opts,
    },
    /// Compare analytic loss gradients with finite differences.
    LossCheck {
        /// JSON file with `{"batch": ..., "scores": [[...]]}` or a list of them.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        batches: usize,
        #[arg(long, default_value_t = 8)]
        max_batch: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[command(flatten)]
        opts: Opts,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    SingleStep,
    KeyExtract,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderArg {
    Hashing,
    Fixture,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderArg {
    Mock,
    Http,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlphaArg {
    SubQuestions,
    ChainLength,
}

/// Config file plus per-field overrides.
#[derive(Args, Clone, Default)]
struct Opts {
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    qa: Option<PathBuf>,
    #[arg(long)]
    store: Option<PathBuf>,
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    prompts: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    /// Retrieval depth before reranking.
    #[arg(long)]
    n: Option<usize>,
    /// Documents kept after reranking.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    rerank_strategy: Option<Strategy>,
    #[arg(long)]
    buckets: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    unified: bool,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_enum)]
    alpha_mode: Option<AlphaArg>,
    #[arg(long, value_enum)]
    encoder: Option<EncoderArg>,
    #[arg(long)]
    encoder_fixtures: Option<PathBuf>,
    #[arg(long)]
    encoder_url: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long, value_enum)]
    provider: Option<ProviderArg>,
    /// Directory of mock LLM fixtures.
    #[arg(long)]
    fixtures: Option<PathBuf>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    sequential: bool,
    #[arg(long)]
    eval_threads: Option<usize>,
}

impl Opts {
    fn config(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
            if v.is_some() {
                slot.clone_from(v);
            }
        };
        set(&mut c.paths.corpus, &self.corpus);
        set(&mut c.paths.qa, &self.qa);
        set(&mut c.paths.store, &self.store);
        set(&mut c.paths.index, &self.index);
        set(&mut c.paths.prompts, &self.prompts);
        set(&mut c.paths.output, &self.output);
        set(&mut c.gateway.fixtures_dir, &self.fixtures);
        set(&mut c.encoder.fixtures_dir, &self.encoder_fixtures);
        if let Some(v) = self.n {
            c.retrieval.n = v;
        }
        if let Some(v) = self.k {
            c.rerank.k = v;
        }
        if let Some(v) = self.rerank_strategy {
            c.rerank.strategy = v;
        }
        if let Some(v) = self.buckets {
            c.rerank.bucket_count = v;
        }
        if let Some(v) = self.seed {
            c.rerank.seed = v;
        }
        if let Some(v) = self.mode {
            c.mode = match v {
                ModeArg::SingleStep => AnswerMode::SingleStep,
                ModeArg::KeyExtract => AnswerMode::KeyExtract,
            };
        }
        if self.unified {
            c.unified_reasoning = true;
        }
        if let Some(v) = self.tau {
            c.objective.tau = v;
        }
        if let Some(v) = self.alpha_mode {
            c.objective.alpha_mode = match v {
                AlphaArg::SubQuestions => AlphaMode::SubQuestions,
                AlphaArg::ChainLength => AlphaMode::ChainLength,
            };
        }
        if let Some(v) = self.encoder {
            c.encoder.kind = match v {
                EncoderArg::Hashing => EncoderKind::Hashing,
                EncoderArg::Fixture => EncoderKind::Fixture,
                EncoderArg::Http => EncoderKind::Http,
            };
        }
        if let Some(v) = &self.encoder_url {
            c.encoder.url.clone_from(v);
        }
        if let Some(v) = self.layers {
            c.encoder.layers = v;
        }
        if let Some(v) = self.dim {
            c.encoder.dim = v;
        }
        if let Some(v) = self.max_seq_len {
            c.encoder.max_seq_len = v;
        }
        if let Some(v) = self.provider {
            c.gateway.provider = match v {
                ProviderArg::Mock => ProviderKind::Mock,
                ProviderArg::Http => ProviderKind::Http,
            };
        }
        if let Some(v) = &self.base_url {
            c.gateway.base_url.clone_from(v);
        }
        if let Some(v) = &self.model {
            c.gateway.model.clone_from(v);
        }
        if self.sequential {
            c.exec = ExecMode::Sequential;
        }
        if self.eval_threads.is_some() {
            c.eval_threads = self.eval_threads;
        }
        c.validate()?;
        Ok(c)
    }
}

fn required(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    match path {
        Some(p) => Ok(p.clone()),
        None => bail!("{flag} is required (flag or config file)"),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn read_loss_inputs(path: &Path) -> Result<Vec<LossCheckInput>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    Ok(if value.is_array() {
        serde_json::from_value(value)?
    } else {
        vec![serde_json::from_value(value)?]
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Ingest(opts) => {
            let c = opts.config()?;
            let corpus = required(&c.paths.corpus, "--corpus")?;
            let store = required(&c.paths.store, "--store")?;
            let encoder = c.encoder.build()?;
            let report = pipeline::cmd_ingest(&corpus, &store, encoder.as_ref(), c.encoder.max_seq_len, c.exec)?;
            print_json(&report)?;
            if report.is_partial() {
                for f in &report.failed {
                    eprintln!("failed: {} ({})", f.id, f.error);
                }
                return Ok(ExitCode::from(2));
            }
        }
        Command::BuildIndex(opts) => {
            let c = opts.config()?;
            let store = required(&c.paths.store, "--store")?;
            let index = required(&c.paths.index, "--index")?;
            let rows = pipeline::cmd_build_index(&store, &index)?;
            println!("indexed {rows} documents into {}", index.display());
        }
        Command::Ask { question, opts } => {
            let rec = pipeline::cmd_ask(opts.config()?, &question)?;
            print_json(&rec)?;
        }
        Command::Eval(opts) => {
            let outcome = pipeline::cmd_eval(opts.config()?)?;
            print_json(&outcome.report.metrics)?;
            for f in &outcome.files {
                eprintln!("wrote {}", f.display());
            }
        }
        Command::RerankBench {
            query,
            candidates,
            opts,
        } => {
            let bench = pipeline::cmd_rerank_bench(&opts.config()?, &query, &candidates)?;
            print_json(&bench)?;
        }
        Command::LossCheck {
            input,
            batches,
            max_batch,
            step,
            tolerance,
            opts,
        } => {
            let c = opts.config()?;
            let inputs = match &input {
                Some(path) => read_loss_inputs(path)?,
                None => pipeline::random_loss_inputs(
                    batches,
                    max_batch,
                    c.rerank.seed,
                    c.objective.tau,
                    c.objective.alpha_mode,
                ),
            };
            let results = pipeline::loss_check(&inputs, step)?;
            print_json(&results)?;
            let worst = results.iter().map(|r| r.check.relative_error).fold(0.0, f64::max);
            eprintln!("worst relative error {worst:.3e} over {} batches", results.len());
            if worst >= tolerance {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

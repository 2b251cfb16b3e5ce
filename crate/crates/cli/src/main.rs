use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use msdp_core::config::MsdpConfig;
use msdp_core::corpus::{load_corpus, ngram_contamination, topic_overlap};
use msdp_core::error::ErrorKind;
use msdp_core::harness::{execute_run, read_json, render_report_md, rerun, run_sweep, score_traces, write_json, EvalReport, Prepared, SweepSpec};
use msdp_core::{synthetic, Corpus, CorpusFormat, Error, Mode, PromptFormat, QueryContext, Strategy};
use msdp_service::{ApiError, AppState};

/// Exit codes: 0 success, 1 config error, 2 provider failure, 3 validation failure.
#[derive(Parser)]
#[command(name = "msdp", version, about = "Multi-stage dialogue prompting harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Convert a WoW, WoI or JSONL corpus to canonical JSONL.
    Convert {
        #[arg(long, default_value = "jsonl")]
        from: CorpusFormat,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a seeded synthetic corpus.
    Synth {
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "synth")]
        prefix: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the database index and write it to `run.index` (or --out).
    Index {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Show the exemplars chosen for one query.
    Select {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        query: QueryArgs,
    },
    /// Prompt inspection.
    Prompt {
        #[command(subcommand)]
        cmd: PromptCmd,
    },
    /// Run the pipeline over a test corpus.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        test: PathBuf,
        #[arg(long, default_value = "jsonl")]
        test_format: CorpusFormat,
        /// Output directory for traces.jsonl, report.json and the manifest.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_report: bool,
    },
    /// Score a trace file.
    Score {
        #[arg(long)]
        traces: PathBuf,
        /// Supplies gold knowledge and responses when traces lack them.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, default_value = "jsonl")]
        test_format: CorpusFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every point of a sweep grid.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
    },
    /// Re-execute a run manifest and compare output hashes.
    Rerun {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Markdown table over report.json files; arms are named by their directory.
    Report { reports: Vec<PathBuf> },
    /// Topic overlap and n-gram knowledge contamination between two corpora.
    Overlap {
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        database: PathBuf,
        #[arg(long, default_value = "jsonl")]
        format: CorpusFormat,
        #[arg(long, default_value_t = 8)]
        n: usize,
    },
    /// Serve chat sessions over HTTP.
    Serve {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// 0 picks a free port; the bound address is printed either way.
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Subcommand)]
enum PromptCmd {
    /// Print the knowledge or response prompt for one query.
    Render {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[command(flatten)]
        query: QueryArgs,
        #[arg(long, default_value = "knowledge")]
        stage: String,
        /// Knowledge sentence for the response prompt.
        #[arg(long, default_value = "")]
        knowledge: String,
    },
}

#[derive(Args, Clone)]
struct QueryArgs {
    #[arg(long, default_value = "")]
    topic: String,
    /// One dialogue turn, oldest first; repeat for each turn.
    #[arg(long = "turn", required = true)]
    turns: Vec<String>,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    database: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    strategy: Option<Strategy>,
    #[arg(long)]
    n_knowledge: Option<usize>,
    #[arg(long)]
    n_response: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    overlap_low: Option<f64>,
    #[arg(long)]
    overlap_high: Option<f64>,
    #[arg(long)]
    response_format: Option<PromptFormat>,
    #[arg(long)]
    ablate_topic: bool,
}

impl ConfigArgs {
    fn load(&self) -> Result<MsdpConfig, Error> {
        let mut c = MsdpConfig::load(&self.config)?;
        if let Some(p) = &self.database {
            c.run.database = Some(std::path::absolute(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?);
        }
        if let Some(v) = self.mode {
            c.run.mode = v;
        }
        if let Some(v) = self.strategy {
            c.selection.strategy = v;
        }
        if let Some(v) = self.n_knowledge {
            c.selection.n_knowledge = v;
        }
        if let Some(v) = self.n_response {
            c.selection.n_response = v;
        }
        if let Some(v) = self.seed {
            c.selection.rng_seed = v;
        }
        if let Some(v) = self.overlap_low {
            c.selection.overlap_low = v;
        }
        if let Some(v) = self.overlap_high {
            c.selection.overlap_high = v;
        }
        if let Some(v) = self.response_format {
            c.run.response_format = v;
        }
        if self.ablate_topic {
            c.run.ablate_topic = true;
        }
        c.validate()?;
        Ok(c)
    }
}

enum Failure {
    Core(Error),
    Api(ApiError),
    Mismatch(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<ApiError> for Failure {
    fn from(e: ApiError) -> Self {
        Failure::Api(e)
    }
}

impl Failure {
    fn report(&self) -> (u8, String) {
        match self {
            Failure::Core(e) => {
                let code = match e.kind() {
                    ErrorKind::Config => 1,
                    ErrorKind::Provider => 2,
                    ErrorKind::Validation => 3,
                };
                (code, e.to_string())
            }
            Failure::Api(ApiError::Provider(m)) => (2, m.clone()),
            Failure::Api(ApiError::Validation(m) | ApiError::NotFound(m)) => (3, m.clone()),
            Failure::Api(ApiError::Internal(m)) => (1, m.clone()),
            Failure::Mismatch(m) => (3, m.clone()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

fn print_json(v: &impl serde::Serialize) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(v).map_err(|e| Error::Validation(e.to_string()))?;
    emit(&format!("{text}\n"));
    Ok(())
}

/// Write to stdout; a closed pipe (`msdp ... | head`) just ends the output.
fn emit(text: &str) {
    let mut out = std::io::stdout().lock();
    if let Err(e) = out.write_all(text.as_bytes()).and_then(|()| out.flush()) {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            eprintln!("error: writing stdout: {e}");
        }
    }
}

fn query(q: &QueryArgs) -> Result<QueryContext, Error> {
    QueryContext::new(q.topic.clone(), q.turns.clone())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Convert { from, input, out } => {
            let corpus = load_corpus(&input, from)?;
            corpus.save(&out)?;
            eprintln!("wrote {} records ({} exemplars) to {}", corpus.len(), corpus.exemplars().count(), out.display());
        }
        Cmd::Synth { n, seed, prefix, out } => {
            let corpus = Corpus::new(prefix.clone(), synthetic::samples(&prefix, n, seed))?;
            corpus.save(&out)?;
        }
        Cmd::Index { cfg, out } => {
            let mut c = cfg.load()?;
            if out.is_some() {
                c.run.index = out;
            }
            if c.run.index.is_none() {
                return Err(Error::Config("no index path: set run.index or pass --out".into()).into());
            }
            let mut p = Prepared::new(c)?;
            let (idx, _) = p.index()?;
            print_json(idx.manifest())?;
        }
        Cmd::Select { cfg, query: q } => {
            let c = cfg.load()?;
            let mut p = Prepared::new(c.clone())?;
            let pipeline = p.pipeline(c.pipeline_config())?;
            let knowledge = pipeline.inspect_selection(&query(&q)?)?;
            print_json(&serde_json::json!({
                "knowledge_exemplars": knowledge,
                "response_exemplar_ids": pipeline.response_exemplar_ids(),
            }))?;
        }
        Cmd::Prompt {
            cmd: PromptCmd::Render { cfg, query: q, stage, knowledge },
        } => {
            let c = cfg.load()?;
            let mut p = Prepared::new(c.clone())?;
            let pipeline = p.pipeline(c.pipeline_config())?;
            let q = query(&q)?;
            let prompt = match stage.as_str() {
                "knowledge" => pipeline
                    .preview_knowledge_prompt(&q)?
                    .ok_or_else(|| Error::Validation("ssdp mode has no knowledge prompt".into()))?,
                "response" => pipeline.preview_response_prompt(&q, &knowledge)?,
                other => return Err(Error::Config(format!("unknown stage {other:?}; use knowledge or response")).into()),
            };
            emit(&prompt.text);
            std::io::stdout().flush().map_err(|e| Error::Config(e.to_string()))?;
        }
        Cmd::Run {
            cfg,
            test,
            test_format,
            out,
            no_report,
        } => {
            let c = cfg.load()?;
            let mut p = Prepared::new(c.clone())?;
            let report = out.join("report.json");
            let m = execute_run(&mut p, &c, &test, test_format, &out.join("traces.jsonl"), (!no_report).then_some(report.as_path()))?;
            eprintln!("{} records written, {} skipped", m.summary.written, m.summary.skipped.len());
        }
        Cmd::Score {
            traces,
            test,
            test_format,
            out,
        } => {
            let test = test.map(|t| load_corpus(&t, test_format)).transpose()?;
            let report = score_traces(&traces, test.as_ref())?;
            match out {
                Some(p) => write_json(&p, &report)?,
                None => print_json(&report)?,
            }
        }
        Cmd::Sweep { spec, out, parallel } => {
            let spec = SweepSpec::load(&spec)?;
            let base = MsdpConfig::load(&spec.config)?;
            let outcomes = run_sweep(&spec, &base, &out, parallel)?;
            eprintln!("{} grid points written to {}", outcomes.len(), out.display());
            let summary = out.join("summary.md");
            emit(&std::fs::read_to_string(&summary).map_err(|e| io_err(&summary, e))?);
        }
        Cmd::Rerun { manifest, out } => {
            let checks = rerun(&manifest, &out)?;
            for c in &checks {
                emit(&format!("{} {} {}\n", if c.matches() { "ok" } else { "MISMATCH" }, c.path.display(), c.actual));
            }
            if let Some(bad) = checks.iter().find(|c| !c.matches()) {
                return Err(Failure::Mismatch(format!("{} differs from the recorded run", bad.path.display())));
            }
        }
        Cmd::Report { reports } => {
            if reports.is_empty() {
                return Err(Error::Validation("need at least one report".into()).into());
            }
            let loaded = reports
                .iter()
                .map(|p| {
                    let name = p
                        .parent()
                        .and_then(|d| d.file_name())
                        .map(|n| n.to_string_lossy().into_owned())
                        .unwrap_or_else(|| p.display().to_string());
                    read_json::<EvalReport>(p).map(|r| (name, r))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let arms: Vec<(String, &EvalReport)> = loaded.iter().map(|(n, r)| (n.clone(), r)).collect();
            emit(&render_report_md(&arms));
        }
        Cmd::Overlap { test, database, format, n } => {
            let test = load_corpus(&test, format)?;
            let db = load_corpus(&database, format)?;
            let knowledge: Vec<String> = test.samples().iter().map(|s| s.knowledge.clone()).collect();
            print_json(&serde_json::json!({
                "topic_overlap": topic_overlap(&test, &db)?,
                "contamination": ngram_contamination(&knowledge, &db, n)?,
            }))?;
        }
        Cmd::Serve { cfg, host, port } => {
            let c = cfg.load()?;
            let state = AppState::new(Prepared::new(c)?)?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Config(e.to_string()))?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                    .await
                    .map_err(|e| Error::Config(format!("bind {host}:{port}: {e}")))?;
                let addr = listener.local_addr().map_err(|e| Error::Config(e.to_string()))?;
                println!("listening on http://{addr}");
                std::io::stdout().flush().ok();
                msdp_service::serve(listener, state).await.map_err(|e| Error::Config(e.to_string()))
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            e.print().ok();
            return ExitCode::from(code);
        }
    };
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("MSDP_LOG").unwrap_or_else(|_| "warn".into()))
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = f.report();
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}

//! Batch runs, scoring, sweeps and reproducible manifests.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::{Embedder, MsdpConfig};
use crate::corpus::{load_corpus, Corpus, CorpusFormat};
use crate::embedding::{build_index, SampleIndex};
use crate::error::{Error, Result};
use crate::lm::LmProvider;
use crate::metrics::{score_batch, MetricReport, ScoreRow, ScoreTarget};
use crate::pipeline::{read_batch_rows, BatchRow, BatchSummary, Mode, Pipeline, PipelineConfig, ProviderIds, Resources};
use crate::prompt::PromptFormat;
use crate::selection::{PerplexityScores, Strategy};

pub const TOOL_VERSION: &str = concat!("msdp ", env!("CARGO_PKG_VERSION"));

fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(crate::sha256_hex(bytes))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    text.push('\n');
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Database, providers and lazily built selection artifacts shared by every
/// pipeline built from one configuration.
pub struct Prepared {
    pub config: MsdpConfig,
    pub database: Arc<Corpus>,
    pub lm: Arc<dyn LmProvider>,
    embedder: Option<Embedder>,
    index: Option<Arc<SampleIndex>>,
    perplexity: Option<Arc<PerplexityScores>>,
}

impl Prepared {
    pub fn new(config: MsdpConfig) -> Result<Self> {
        config.validate()?;
        let path = config
            .run
            .database
            .clone()
            .ok_or_else(|| Error::Config("run.database is not set".into()))?;
        let database = Arc::new(load_corpus(&path, config.run.database_format)?.exemplar_view()?);
        let lm = config.build_lm()?;
        Ok(Prepared {
            config,
            database,
            lm,
            embedder: None,
            index: None,
            perplexity: None,
        })
    }

    /// Build, or load from `run.index`, the similarity index for the database.
    pub fn index(&mut self) -> Result<(Arc<SampleIndex>, &Embedder)> {
        if self.embedder.is_none() {
            self.embedder = Some(self.config.build_embedder()?);
        }
        let embedder = self.embedder.as_ref().expect("embedder just built");
        if self.index.is_none() {
            let encoder = embedder.provider.encoder_id();
            let prefix = self.config.run.index.clone();
            let mut loaded = None;
            if let Some(p) = prefix.as_deref().filter(|p| SampleIndex::exists(p)) {
                let idx = SampleIndex::load(p)?;
                if idx.encoder_id() == encoder && idx.verify(&self.database).is_ok() {
                    loaded = Some(idx);
                } else {
                    tracing::warn!(prefix = %p.display(), "index does not match the database or encoder; rebuilding");
                }
            }
            let idx = match loaded {
                Some(i) => i,
                None => {
                    let idx = build_index(&self.database, embedder.provider.as_ref(), self.config.build_options())?;
                    embedder.save_cache()?;
                    if let Some(p) = prefix.as_deref() {
                        idx.save(p)?;
                    }
                    idx
                }
            };
            self.index = Some(Arc::new(idx));
        }
        Ok((self.index.clone().expect("index just built"), embedder))
    }

    pub fn perplexity(&mut self) -> Result<Arc<PerplexityScores>> {
        if self.perplexity.is_none() {
            let in_flight = self.config.provider.lm.in_flight;
            let scores = match self.config.run.ppl_cache.as_deref() {
                Some(p) => PerplexityScores::load_or_compute(p, &self.database, self.lm.as_ref(), &self.config.templates, in_flight)?,
                None => PerplexityScores::compute(&self.database, self.lm.as_ref(), &self.config.templates, in_flight)?,
            };
            self.perplexity = Some(Arc::new(scores));
        }
        Ok(self.perplexity.clone().expect("scores just computed"))
    }

    pub fn pipeline(&mut self, cfg: PipelineConfig) -> Result<Pipeline> {
        let mut res = Resources {
            database: self.database.clone(),
            lm: self.lm.clone(),
            embedder: None,
            index: None,
            perplexity: None,
        };
        if cfg.mode == Mode::Msdp {
            match cfg.selection.strategy {
                Strategy::Query => {
                    let (index, embedder) = self.index()?;
                    res.embedder = Some(embedder.provider.clone());
                    res.index = Some(index);
                }
                Strategy::Perplexity => res.perplexity = Some(self.perplexity()?),
                Strategy::Random => {}
            }
        }
        Pipeline::new(cfg, res)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// File name relative to the manifest's directory.
    pub path: PathBuf,
    pub sha256: String,
}

/// Everything needed to repeat a run: the full (redacted) configuration,
/// input hashes, provider ids, and hashes of every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: MsdpConfig,
    pub seed: u64,
    pub test: PathBuf,
    pub test_format: CorpusFormat,
    pub test_sha256: String,
    pub database_corpus_hash: String,
    pub provider_ids: ProviderIds,
    pub response_exemplar_ids: Vec<String>,
    pub summary: BatchSummary,
    pub traces: Artifact,
    pub report: Option<Artifact>,
}

/// `dir/traces.jsonl` -> `dir/traces.manifest.json`.
pub fn manifest_path_for(traces: &Path) -> PathBuf {
    let stem = traces.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    traces.with_file_name(format!("{stem}.manifest.json"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub response: MetricReport,
    pub knowledge: MetricReport,
}

/// Score batch rows. With `test`, gold text comes from the test corpus by
/// record id; otherwise from the rows themselves.
pub fn score_rows(rows: &[BatchRow], test: Option<&Corpus>) -> Result<EvalReport> {
    let mut inputs = Vec::with_capacity(rows.len());
    for row in rows {
        let (gold_k, gold_r) = match test {
            Some(t) => {
                let s = t
                    .get(&row.record_id)
                    .ok_or_else(|| Error::Validation(format!("trace record {:?} is not in the test corpus", row.record_id)))?;
                (s.knowledge.as_str(), s.response.as_str())
            }
            None => (row.gold_knowledge.as_str(), row.gold_response.as_str()),
        };
        inputs.push(ScoreRow {
            id: &row.record_id,
            generated_knowledge: &row.trace.knowledge,
            generated_response: &row.trace.response,
            gold_knowledge: gold_k,
            gold_response: gold_r,
        });
    }
    Ok(EvalReport {
        response: score_batch(&inputs, ScoreTarget::Response),
        knowledge: score_batch(&inputs, ScoreTarget::Knowledge),
    })
}

pub fn score_traces(traces: &Path, test: Option<&Corpus>) -> Result<EvalReport> {
    score_rows(&read_batch_rows(traces)?, test)
}

/// Run `config` over a test corpus, write traces (and the report, if asked)
/// plus a manifest next to the traces.
pub fn execute_run(
    prepared: &mut Prepared,
    config: &MsdpConfig,
    test_path: &Path,
    test_format: CorpusFormat,
    traces_out: &Path,
    report_out: Option<&Path>,
) -> Result<RunManifest> {
    let test = load_corpus(test_path, test_format)?;
    let pipeline = prepared.pipeline(config.pipeline_config())?;
    run_with_pipeline(&pipeline, config, &test, test_path, test_format, traces_out, report_out)
}

fn run_with_pipeline(
    pipeline: &Pipeline,
    config: &MsdpConfig,
    test: &Corpus,
    test_path: &Path,
    test_format: CorpusFormat,
    traces_out: &Path,
    report_out: Option<&Path>,
) -> Result<RunManifest> {
    let dir = traces_out.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file = fs::File::create(traces_out).map_err(|e| Error::io(traces_out, e))?;
    let mut out = BufWriter::new(file);
    let summary = pipeline.run_batch_jsonl(test, config.run.in_flight, &mut out)?;
    out.flush().map_err(|e| Error::io(traces_out, e))?;
    drop(out);
    if !summary.skipped.is_empty() {
        tracing::warn!(skipped = summary.skipped.len(), written = summary.written, "some records were skipped");
    }

    let report = match report_out {
        Some(p) => {
            let r = score_traces(traces_out, Some(test))?;
            write_json(p, &r)?;
            Some(artifact(dir, p)?)
        }
        None => None,
    };
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        config: config.redacted(),
        seed: config.selection.rng_seed,
        test: fs::canonicalize(test_path).map_err(|e| Error::io(test_path, e))?,
        test_format,
        test_sha256: file_sha256(test_path)?,
        database_corpus_hash: pipeline.database().content_hash(),
        provider_ids: pipeline.provider_ids(),
        response_exemplar_ids: pipeline.response_exemplar_ids().into_iter().map(String::from).collect(),
        summary,
        traces: artifact(dir, traces_out)?,
        report,
    };
    write_json(&manifest_path_for(traces_out), &manifest)?;
    Ok(manifest)
}

fn artifact(dir: &Path, path: &Path) -> Result<Artifact> {
    let rel = path.strip_prefix(dir).unwrap_or(path);
    Ok(Artifact {
        path: rel.to_path_buf(),
        sha256: file_sha256(path)?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactCheck {
    pub path: PathBuf,
    pub expected: String,
    pub actual: String,
}

impl ArtifactCheck {
    pub fn matches(&self) -> bool {
        self.expected == self.actual
    }
}

/// Re-execute a manifest into `out_dir` and compare output hashes.
pub fn rerun(manifest_path: &Path, out_dir: &Path) -> Result<Vec<ArtifactCheck>> {
    let manifest: RunManifest = read_json(manifest_path)?;
    let mut config = manifest.config.clone();
    config.apply_env(|k| std::env::var(k).ok());
    if test_changed(&manifest)? {
        return Err(Error::Validation(format!("test corpus {} changed since the run", manifest.test.display())));
    }
    let traces = out_dir.join(&manifest.traces.path);
    let report = manifest.report.as_ref().map(|r| out_dir.join(&r.path));
    let mut prepared = Prepared::new(config.clone())?;
    let fresh = execute_run(&mut prepared, &config, &manifest.test, manifest.test_format, &traces, report.as_deref())?;
    if fresh.database_corpus_hash != manifest.database_corpus_hash {
        tracing::warn!("database content differs from the recorded run");
    }
    let mut checks = vec![ArtifactCheck {
        path: manifest.traces.path.clone(),
        expected: manifest.traces.sha256.clone(),
        actual: fresh.traces.sha256,
    }];
    if let (Some(want), Some(got)) = (&manifest.report, fresh.report) {
        checks.push(ArtifactCheck {
            path: want.path.clone(),
            expected: want.sha256.clone(),
            actual: got.sha256,
        });
    }
    Ok(checks)
}

fn test_changed(m: &RunManifest) -> Result<bool> {
    Ok(file_sha256(&m.test)? != m.test_sha256)
}

/// Axes of a sweep; unset axes keep the base configuration's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepAxes {
    pub n_knowledge: Option<Vec<usize>>,
    pub n_response: Option<Vec<usize>>,
    pub strategy: Option<Vec<Strategy>>,
    pub mode: Option<Vec<Mode>>,
    pub ablate_topic: Option<Vec<bool>>,
    pub response_format: Option<Vec<PromptFormat>>,
}

/// ```toml
/// config = "msdp.toml"
/// test = "test.jsonl"
/// [axes]
/// n_knowledge = [1, 5, 10, 20]
/// mode = ["msdp", "ssdp"]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub config: PathBuf,
    pub test: PathBuf,
    #[serde(default = "jsonl")]
    pub test_format: CorpusFormat,
    #[serde(default)]
    pub axes: SweepAxes,
}

fn jsonl() -> CorpusFormat {
    CorpusFormat::Jsonl
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut spec: SweepSpec = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut spec.config, &mut spec.test] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub name: String,
    pub config: MsdpConfig,
}

fn axis<T: Clone>(name: &str, values: &Option<Vec<T>>) -> Result<Option<Vec<T>>> {
    match values {
        Some(v) if v.is_empty() => Err(Error::Config(format!("sweep axis {name} has no values"))),
        other => Ok(other.clone()),
    }
}

fn format_name(f: PromptFormat) -> String {
    serde_json::to_value(f)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}

/// Cartesian product of the axes, in a fixed axis order. Point names list
/// only swept axes, e.g. `n_knowledge=5,mode=ssdp`.
pub fn sweep_grid(base: &MsdpConfig, axes: &SweepAxes) -> Result<Vec<SweepPoint>> {
    type Apply = Box<dyn Fn(&mut MsdpConfig)>;
    let mut dims: Vec<Vec<(String, Apply)>> = Vec::new();
    if let Some(v) = axis("n_knowledge", &axes.n_knowledge)? {
        dims.push(v.into_iter().map(|n| (format!("n_knowledge={n}"), Box::new(move |c: &mut MsdpConfig| c.selection.n_knowledge = n) as Apply)).collect());
    }
    if let Some(v) = axis("n_response", &axes.n_response)? {
        dims.push(v.into_iter().map(|n| (format!("n_response={n}"), Box::new(move |c: &mut MsdpConfig| c.selection.n_response = n) as Apply)).collect());
    }
    if let Some(v) = axis("strategy", &axes.strategy)? {
        dims.push(
            v.into_iter()
                .map(|s| {
                    let name = format!("strategy={}", format!("{s:?}").to_lowercase());
                    (name, Box::new(move |c: &mut MsdpConfig| c.selection.strategy = s) as Apply)
                })
                .collect(),
        );
    }
    if let Some(v) = axis("mode", &axes.mode)? {
        dims.push(
            v.into_iter()
                .map(|m| {
                    let name = format!("mode={}", format!("{m:?}").to_lowercase());
                    (name, Box::new(move |c: &mut MsdpConfig| c.run.mode = m) as Apply)
                })
                .collect(),
        );
    }
    if let Some(v) = axis("ablate_topic", &axes.ablate_topic)? {
        dims.push(v.into_iter().map(|b| (format!("ablate_topic={b}"), Box::new(move |c: &mut MsdpConfig| c.run.ablate_topic = b) as Apply)).collect());
    }
    if let Some(v) = axis("response_format", &axes.response_format)? {
        dims.push(
            v.into_iter()
                .map(|f| (format!("response_format={}", format_name(f)), Box::new(move |c: &mut MsdpConfig| c.run.response_format = f) as Apply))
                .collect(),
        );
    }

    let mut points = vec![(Vec::<String>::new(), base.clone())];
    for dim in &dims {
        let mut next = Vec::with_capacity(points.len() * dim.len());
        for (names, cfg) in &points {
            for (name, apply) in dim {
                let mut c = cfg.clone();
                apply(&mut c);
                let mut n = names.clone();
                n.push(name.clone());
                next.push((n, c));
            }
        }
        points = next;
    }
    let out: Vec<SweepPoint> = points
        .into_iter()
        .map(|(names, config)| SweepPoint {
            name: if names.is_empty() { "base".into() } else { names.join(",") },
            config,
        })
        .collect();
    for p in &out {
        p.config
            .validate()
            .map_err(|e| Error::Config(format!("sweep point {}: {e}", p.name)))?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub name: String,
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub report: EvalReport,
}

/// Run every grid point into `out_dir/<point>/` and write `summary.md`.
pub fn run_sweep(spec: &SweepSpec, base: &MsdpConfig, out_dir: &Path, parallel: usize) -> Result<Vec<SweepOutcome>> {
    let grid = sweep_grid(base, &spec.axes)?;
    let test = load_corpus(&spec.test, spec.test_format)?;
    let mut prepared = Prepared::new(base.clone())?;
    let mut jobs = Vec::with_capacity(grid.len());
    for point in grid {
        let pipeline = prepared.pipeline(point.config.pipeline_config())?;
        jobs.push((point, pipeline));
    }

    let results: Vec<std::sync::Mutex<Option<Result<SweepOutcome>>>> = jobs.iter().map(|_| Default::default()).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..parallel.max(1).min(jobs.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                let Some((point, pipeline)) = jobs.get(i) else { return };
                let dir = out_dir.join(&point.name);
                let traces = dir.join("traces.jsonl");
                let report_path = dir.join("report.json");
                let out = run_with_pipeline(pipeline, &point.config, &test, &spec.test, spec.test_format, &traces, Some(&report_path))
                    .and_then(|manifest| {
                        Ok(SweepOutcome {
                            name: point.name.clone(),
                            dir: dir.clone(),
                            report: read_json(&report_path)?,
                            manifest,
                        })
                    });
                *results[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(out);
            });
        }
    });
    let outcomes = results
        .into_iter()
        .map(|m| m.into_inner().unwrap_or_else(|e| e.into_inner()).expect("every job ran"))
        .collect::<Result<Vec<_>>>()?;
    let arms: Vec<(String, &EvalReport)> = outcomes.iter().map(|o| (o.name.clone(), &o.report)).collect();
    let summary = out_dir.join("summary.md");
    fs::write(&summary, render_report_md(&arms)).map_err(|e| Error::io(&summary, e))?;
    Ok(outcomes)
}

/// Response-stage table in percent: one row per arm, sorted by arm name.
pub fn render_report_md(arms: &[(String, &EvalReport)]) -> String {
    let mut sorted: Vec<&(String, &EvalReport)> = arms.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut out = String::from("| Arm | B | M | R-L | F1 | KF1 |\n|---|---|---|---|---|---|\n");
    for (name, r) in sorted {
        let m = &r.response;
        out.push_str(&format!(
            "| {} | {:.2} | {:.2} | {:.2} | {:.2} | {:.2} |\n",
            name.replace('|', "\\|"),
            m.avg_bleu.mean * 100.0,
            m.meteor.mean * 100.0,
            m.rouge_l.mean * 100.0,
            m.f1.mean * 100.0,
            m.kf1.mean * 100.0
        ));
    }
    out
}

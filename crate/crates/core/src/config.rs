//! TOML configuration and provider construction.
//!
//! ```toml
//! [provider.lm]
//! kind = "mock"            # mock | http
//! fallback = "digest"      # digest | copy_knowledge | fail | fixed:<text>
//! script = "script.json"   # optional, prompt SHA-256 -> completion
//!
//! [provider.embed]
//! kind = "mock"
//! dim = 64
//!
//! [selection]
//! strategy = "query"
//! n_knowledge = 10
//!
//! [run]
//! database = "db.jsonl"
//! mode = "msdp"
//! ```
//!
//! Relative paths are resolved against the directory of the config file.
//! `MSDP_LM_ENDPOINT`, `MSDP_LM_API_KEY`, `MSDP_EMBED_ENDPOINT` and
//! `MSDP_EMBED_API_KEY` override the matching provider fields.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusFormat;
use crate::embedding::{BuildOptions, CachedEmbedder, EmbeddingProvider, HashEmbedder, HttpEmbedder};
use crate::error::{Error, Result};
use crate::lm::{Fallback, HttpLm, HttpLmConfig, LmProvider, ScriptedLm, DEFAULT_MAX_TOKENS_KNOWLEDGE, DEFAULT_MAX_TOKENS_RESPONSE};
use crate::pipeline::{Mode, PipelineConfig};
use crate::prompt::{PromptFormat, PromptTemplateConfig};
use crate::retry::RetryPolicy;
use crate::selection::SelectionConfig;

pub const REDACTED: &str = "<redacted>";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LmSection {
    pub kind: ProviderKind,
    pub fallback: String,
    pub script: Option<PathBuf>,
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
    pub model: Option<String>,
    pub score_endpoint: Option<String>,
    pub timeout_ms: u64,
    pub in_flight: usize,
    pub max_prompt_chars: Option<usize>,
    pub retry: RetryPolicy,
}

impl Default for LmSection {
    fn default() -> Self {
        LmSection {
            kind: ProviderKind::Mock,
            fallback: "digest".into(),
            script: None,
            endpoint: None,
            api_key: None,
            model: None,
            score_endpoint: None,
            timeout_ms: 60_000,
            in_flight: 8,
            max_prompt_chars: None,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSection {
    pub kind: ProviderKind,
    pub dim: usize,
    pub encoder_id: Option<String>,
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
    pub timeout_ms: u64,
    pub batch_size: usize,
    pub in_flight: usize,
    pub cache: Option<PathBuf>,
    pub retry: RetryPolicy,
}

impl Default for EmbedSection {
    fn default() -> Self {
        EmbedSection {
            kind: ProviderKind::Mock,
            dim: 64,
            encoder_id: None,
            endpoint: None,
            api_key: None,
            timeout_ms: 30_000,
            batch_size: 64,
            in_flight: 4,
            cache: None,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    pub lm: LmSection,
    pub embed: EmbedSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub database: Option<PathBuf>,
    pub database_format: CorpusFormat,
    pub mode: Mode,
    pub response_format: PromptFormat,
    pub ablate_topic: bool,
    pub max_tokens_knowledge: usize,
    pub max_tokens_response: usize,
    /// Index path prefix; built and written on first use.
    pub index: Option<PathBuf>,
    pub ppl_cache: Option<PathBuf>,
    /// Records processed concurrently by batch runs.
    pub in_flight: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            database: None,
            database_format: CorpusFormat::Jsonl,
            mode: Mode::Msdp,
            response_format: PromptFormat::ResponseFmt3,
            ablate_topic: false,
            max_tokens_knowledge: DEFAULT_MAX_TOKENS_KNOWLEDGE,
            max_tokens_response: DEFAULT_MAX_TOKENS_RESPONSE,
            index: None,
            ppl_cache: None,
            in_flight: 4,
        }
    }
}

/// Settings for `msdp serve`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceSection {
    /// Session database file. Sessions live in memory when unset.
    pub store: Option<PathBuf>,
    /// Traces kept per session; older ones are dropped.
    pub trace_cap: usize,
    /// Static files served under `/ui`.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServiceSection {
    fn default() -> Self {
        ServiceSection {
            store: None,
            trace_cap: 200,
            ui_dir: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsdpConfig {
    pub provider: ProviderSection,
    pub selection: SelectionConfig,
    pub templates: PromptTemplateConfig,
    pub run: RunSection,
    pub service: ServiceSection,
}

/// Parse `digest`, `copy_knowledge`, `fail` or `fixed:<text>`.
pub fn parse_fallback(s: &str) -> Result<Fallback> {
    match s {
        "digest" => Ok(Fallback::Digest),
        "copy_knowledge" => Ok(Fallback::CopyKnowledge),
        "fail" => Ok(Fallback::Fail),
        other => match other.strip_prefix("fixed:") {
            Some(text) => Ok(Fallback::Fixed(text.to_owned())),
            None => Err(Error::Config(format!("unknown mock fallback {other:?}"))),
        },
    }
}

fn absolutize(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(path) = p {
        if path.is_relative() {
            *path = base.join(&*path);
        }
    }
}

impl MsdpConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: MsdpConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    /// Read a config file and apply environment overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path
            .canonicalize()
            .map_err(|e| Error::io(path, e))?
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let mut cfg = Self::from_toml(&text, &base)?;
        cfg.apply_env(|k| std::env::var(k).ok());
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        absolutize(base, &mut self.provider.lm.script);
        absolutize(base, &mut self.provider.embed.cache);
        absolutize(base, &mut self.run.database);
        absolutize(base, &mut self.run.index);
        absolutize(base, &mut self.run.ppl_cache);
        absolutize(base, &mut self.service.store);
        absolutize(base, &mut self.service.ui_dir);
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) {
        if let Some(v) = var("MSDP_LM_ENDPOINT") {
            self.provider.lm.endpoint = Some(v);
        }
        if let Some(v) = var("MSDP_LM_API_KEY") {
            self.provider.lm.api_key = Some(v);
        }
        if let Some(v) = var("MSDP_EMBED_ENDPOINT") {
            self.provider.embed.endpoint = Some(v);
        }
        if let Some(v) = var("MSDP_EMBED_API_KEY") {
            self.provider.embed.api_key = Some(v);
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            selection: self.selection.clone(),
            templates: self.templates.clone(),
            mode: self.run.mode,
            response_format: self.run.response_format,
            ablate_topic: self.run.ablate_topic,
            max_tokens_knowledge: self.run.max_tokens_knowledge,
            max_tokens_response: self.run.max_tokens_response,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline_config().validate()?;
        parse_fallback(&self.provider.lm.fallback)?;
        if self.provider.lm.kind == ProviderKind::Http && self.provider.lm.endpoint.is_none() {
            return Err(Error::Config("provider.lm.endpoint is required for kind = \"http\"".into()));
        }
        let e = &self.provider.embed;
        if e.dim == 0 {
            return Err(Error::Config("provider.embed.dim must be >= 1".into()));
        }
        if e.kind == ProviderKind::Http && e.endpoint.is_none() {
            return Err(Error::Config("provider.embed.endpoint is required for kind = \"http\"".into()));
        }
        if e.batch_size == 0 {
            return Err(Error::Config("provider.embed.batch_size must be >= 1".into()));
        }
        if self.service.trace_cap == 0 {
            return Err(Error::Config("service.trace_cap must be >= 1".into()));
        }
        Ok(())
    }

    /// Copy safe to write into manifests and session snapshots.
    pub fn redacted(&self) -> Self {
        let mut c = self.clone();
        for key in [&mut c.provider.lm.api_key, &mut c.provider.embed.api_key] {
            if key.is_some() {
                *key = Some(REDACTED.into());
            }
        }
        c
    }

    pub fn build_lm(&self) -> Result<Arc<dyn LmProvider>> {
        let lm = &self.provider.lm;
        match lm.kind {
            ProviderKind::Mock => {
                let fallback = parse_fallback(&lm.fallback)?;
                let mock = match &lm.script {
                    Some(p) => ScriptedLm::from_file(p, fallback)?,
                    None => ScriptedLm::new(Default::default(), fallback),
                };
                Ok(Arc::new(mock))
            }
            ProviderKind::Http => {
                let endpoint = lm
                    .endpoint
                    .clone()
                    .ok_or_else(|| Error::Config("provider.lm.endpoint is required".into()))?;
                let http = HttpLm::new(HttpLmConfig {
                    endpoint,
                    api_key: lm.api_key.clone().filter(|k| k != REDACTED),
                    model: lm.model.clone(),
                    score_endpoint: lm.score_endpoint.clone(),
                    timeout_ms: lm.timeout_ms,
                    retry: lm.retry,
                    in_flight: lm.in_flight,
                    max_prompt_chars: lm.max_prompt_chars,
                })?;
                Ok(Arc::new(http))
            }
        }
    }

    pub fn build_embedder(&self) -> Result<Embedder> {
        let e = &self.provider.embed;
        match e.kind {
            ProviderKind::Mock => Ok(Embedder {
                provider: Arc::new(HashEmbedder::new(e.dim)),
                cache: None,
            }),
            ProviderKind::Http => {
                let endpoint = e
                    .endpoint
                    .clone()
                    .ok_or_else(|| Error::Config("provider.embed.endpoint is required".into()))?;
                let id = e.encoder_id.clone().unwrap_or_else(|| format!("http:{endpoint}"));
                let http = HttpEmbedder::new(
                    id,
                    e.dim,
                    endpoint,
                    e.api_key.clone().filter(|k| k != REDACTED),
                    Duration::from_millis(e.timeout_ms),
                    e.retry,
                    e.in_flight,
                )?;
                match &e.cache {
                    None => Ok(Embedder {
                        provider: Arc::new(http),
                        cache: None,
                    }),
                    Some(path) => {
                        let cached = Arc::new(CachedEmbedder::new(http));
                        cached.load(path)?;
                        Ok(Embedder {
                            provider: cached.clone(),
                            cache: Some((cached, path.clone())),
                        })
                    }
                }
            }
        }
    }

    pub fn build_options(&self) -> BuildOptions {
        BuildOptions {
            batch_size: self.provider.embed.batch_size,
            in_flight: self.provider.embed.in_flight,
        }
    }
}

/// An embedding provider plus the on-disk cache behind it, if any.
pub struct Embedder {
    pub provider: Arc<dyn EmbeddingProvider>,
    cache: Option<(Arc<CachedEmbedder<HttpEmbedder>>, PathBuf)>,
}

impl Embedder {
    pub fn save_cache(&self) -> Result<()> {
        match &self.cache {
            Some((c, path)) => c.save(path),
            None => Ok(()),
        }
    }
}

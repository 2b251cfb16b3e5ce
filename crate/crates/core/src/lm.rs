//! Language-model provider contract, the scripted mock used in tests, and an
//! HTTP adapter for completion-style APIs.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::limit::InFlightLimit;
use crate::retry::RetryPolicy;
use crate::sha256_hex;

pub const DEFAULT_MAX_TOKENS_KNOWLEDGE: usize = 128;
pub const DEFAULT_MAX_TOKENS_RESPONSE: usize = 96;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LmError {
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("max_new_tokens must be >= 1")]
    ZeroBudget,
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("transient provider failure: {0}")]
    Transient(String),
    #[error("prompt exceeds the model context: {0}")]
    ContextOverflow(String),
    #[error("provider does not support sequence scoring")]
    ScoringUnsupported,
    #[error("text has no tokens to score")]
    ZeroTokens,
    #[error("no scripted completion for prompt sha256 {0}")]
    Unscripted(String),
    #[error("provider error: {0}")]
    Provider(String),
}

impl LmError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, LmError::Timeout(_) | LmError::RateLimited(_) | LmError::Transient(_))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decoding {
    #[default]
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_new_tokens: usize,
    pub stop: Vec<String>,
    pub decoding: Decoding,
}

impl CompletionRequest {
    pub fn greedy(prompt: impl Into<String>, max_new_tokens: usize) -> Self {
        CompletionRequest {
            prompt: prompt.into(),
            max_new_tokens,
            stop: vec!["\n".to_owned()],
            decoding: Decoding::Greedy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    ProviderEnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    /// Continuation only, before any stop truncation.
    pub text: String,
    pub finish_reason: FinishReason,
    pub latency: Duration,
    pub provider_id: String,
}

/// A text-completion backend. Greedy completion must be deterministic for a
/// fixed `provider_id`, and implementations must accept concurrent calls.
pub trait LmProvider: Send + Sync {
    fn provider_id(&self) -> &str;

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, LmError>;

    /// Per-token natural-log probabilities of `text`.
    fn score(&self, _text: &str) -> Result<Vec<f64>, LmError> {
        Err(LmError::ScoringUnsupported)
    }

    fn supports_scoring(&self) -> bool {
        false
    }

    /// Largest prompt, in characters, the backend accepts.
    fn context_budget(&self) -> Option<usize> {
        None
    }

    fn ping(&self) -> Result<(), LmError> {
        Ok(())
    }
}

/// Validate and issue a completion request.
pub fn complete(provider: &dyn LmProvider, req: &CompletionRequest) -> Result<CompletionResult, LmError> {
    if req.prompt.is_empty() {
        return Err(LmError::EmptyPrompt);
    }
    if req.max_new_tokens == 0 {
        return Err(LmError::ZeroBudget);
    }
    provider.complete(req)
}

/// `exp(-mean log p)` over the provider's tokenization.
pub fn perplexity(provider: &dyn LmProvider, text: &str) -> Result<f64, LmError> {
    if !provider.supports_scoring() {
        return Err(LmError::ScoringUnsupported);
    }
    perplexity_from_logprobs(&provider.score(text)?)
}

pub fn perplexity_from_logprobs(logprobs: &[f64]) -> Result<f64, LmError> {
    if logprobs.is_empty() {
        return Err(LmError::ZeroTokens);
    }
    let mean = logprobs.iter().sum::<f64>() / logprobs.len() as f64;
    Ok((-mean).exp())
}

/// Cut `text` after its first `max_tokens` whitespace-delimited tokens.
fn limit_tokens(text: &str, max_tokens: usize) -> (&str, bool) {
    let mut seen = 0;
    let mut in_token = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            in_token = false;
        } else if !in_token {
            in_token = true;
            seen += 1;
            if seen > max_tokens {
                return (text[..i].trim_end(), true);
            }
        }
    }
    (text, false)
}

/// What the scripted mock does for prompts missing from its script.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "text")]
pub enum Fallback {
    /// Pick words from the prompt's final block, chosen by the prompt hash,
    /// then emit a newline and a stray continuation.
    Digest,
    /// Copy the knowledge slot of the final block (response prompts), the
    /// first exemplar's knowledge (knowledge prompts), or the last user turn
    /// (prompts without a knowledge slot).
    CopyKnowledge,
    Fixed(String),
    Fail,
}

impl std::fmt::Display for Fallback {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Fallback::Digest => f.write_str("digest"),
            Fallback::CopyKnowledge => f.write_str("copy_knowledge"),
            Fallback::Fixed(_) => f.write_str("fixed"),
            Fallback::Fail => f.write_str("fail"),
        }
    }
}

/// Deterministic mock backed by a map from prompt SHA-256 to completion.
#[derive(Debug, Clone)]
pub struct ScriptedLm {
    id: String,
    script: HashMap<String, String>,
    fallback: Fallback,
}

const KNOWLEDGE_LABEL: &str = "We know that:";
const SLOT_ENDS: [&str; 3] = [" System replies:", " System:", " User:"];

impl ScriptedLm {
    pub fn new(script: HashMap<String, String>, fallback: Fallback) -> Self {
        let mut keys: Vec<_> = script.iter().collect();
        keys.sort();
        let digest = sha256_hex(serde_json::to_vec(&keys).expect("script serializes"));
        let fixed = match &fallback {
            Fallback::Fixed(t) => format!(":{}", &sha256_hex(t)[..8]),
            _ => String::new(),
        };
        ScriptedLm {
            id: format!("mock-scripted/{fallback}{fixed}/{}", &digest[..12]),
            script,
            fallback,
        }
    }

    /// Script keyed by prompt text rather than hash.
    pub fn from_prompts<I, P, C>(pairs: I, fallback: Fallback) -> Self
    where
        I: IntoIterator<Item = (P, C)>,
        P: AsRef<str>,
        C: Into<String>,
    {
        Self::new(
            pairs.into_iter().map(|(p, c)| (sha256_hex(p.as_ref()), c.into())).collect(),
            fallback,
        )
    }

    pub fn from_file(path: &Path, fallback: Fallback) -> crate::Result<Self> {
        let bytes = fs::read(path).map_err(|e| crate::Error::io(path, e))?;
        let script: HashMap<String, String> =
            serde_json::from_slice(&bytes).map_err(|e| crate::Error::json(path.display().to_string(), e))?;
        Ok(Self::new(script, fallback))
    }

    fn fallback_text(&self, prompt: &str, hash: &str) -> Result<String, LmError> {
        let last = prompt.rsplit('\n').next().unwrap_or(prompt);
        match &self.fallback {
            Fallback::Fixed(t) => Ok(t.clone()),
            Fallback::Fail => Err(LmError::Unscripted(hash.to_owned())),
            Fallback::Digest => {
                let words: Vec<&str> = last.split_whitespace().collect();
                let bytes = hex::decode(hash).unwrap_or_default();
                let picked: Vec<&str> = if words.is_empty() {
                    vec!["ok"]
                } else {
                    let take = 3 + (bytes[0] as usize % 6);
                    bytes[1..=take].iter().map(|b| words[*b as usize % words.len()]).collect()
                };
                Ok(format!("{}.\nUser: {}", picked.join(" "), &hash[..8]))
            }
            Fallback::CopyKnowledge => {
                if let Some(start) = last.rfind(KNOWLEDGE_LABEL) {
                    let rest = &last[start + KNOWLEDGE_LABEL.len()..];
                    let end = SLOT_ENDS.iter().filter_map(|l| rest.find(l)).min().unwrap_or(rest.len());
                    return Ok(format!("{}\nextra", rest[..end].trim()));
                }
                if last.trim_end().ends_with("=>") {
                    let first = prompt.split('\n').next().unwrap_or("");
                    let k = first.split_once(" => ").map(|(_, k)| k).unwrap_or("");
                    return Ok(format!("{}\n", k.trim()));
                }
                let user = last
                    .rfind("User:")
                    .map(|i| &last[i + "User:".len()..])
                    .map(|r| r.split(" System replies:").next().unwrap_or(r))
                    .unwrap_or("");
                Ok(format!("{}\n", user.trim()))
            }
        }
    }
}

impl LmProvider for ScriptedLm {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, LmError> {
        let hash = sha256_hex(&req.prompt);
        let raw = match self.script.get(&hash) {
            Some(t) => t.clone(),
            None => self.fallback_text(&req.prompt, &hash)?,
        };
        let (text, truncated) = limit_tokens(&raw, req.max_new_tokens);
        let finish_reason = if truncated {
            FinishReason::Length
        } else if req.stop.iter().any(|s| text.contains(s.as_str())) {
            FinishReason::Stop
        } else {
            FinishReason::ProviderEnd
        };
        Ok(CompletionResult {
            text: text.to_owned(),
            finish_reason,
            latency: Duration::ZERO,
            provider_id: self.id.clone(),
        })
    }

    /// Log-probabilities derived from hashes of adjacent token pairs, all in
    /// `[-5, -0.05]`.
    fn score(&self, text: &str) -> Result<Vec<f64>, LmError> {
        let mut prev = "<s>";
        let mut out = Vec::new();
        for tok in text.split_whitespace() {
            let h = sha256_hex(format!("{prev}\u{1f}{tok}"));
            let v = u16::from_str_radix(&h[..4], 16).unwrap_or(0) as f64 / 65535.0;
            out.push(-(0.05 + 4.95 * v));
            prev = tok;
        }
        if out.is_empty() {
            return Err(LmError::ZeroTokens);
        }
        Ok(out)
    }

    fn supports_scoring(&self) -> bool {
        true
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    prompt: &'a str,
    max_tokens: usize,
    stop: &'a [String],
    temperature: f64,
}

#[derive(Deserialize)]
struct WireResponse {
    text: String,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    text: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    logprobs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpLmConfig {
    pub endpoint: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub score_endpoint: Option<String>,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_in_flight")]
    pub in_flight: usize,
    #[serde(default)]
    pub max_prompt_chars: Option<usize>,
}

fn default_timeout_ms() -> u64 {
    60_000
}

fn default_in_flight() -> usize {
    8
}

/// Adapter for completion APIs speaking
/// `{prompt, max_tokens, stop, temperature: 0} -> {text, finish_reason}`.
///
/// Status mapping: 429 is a rate limit, 408/504 a timeout, other 5xx are
/// transient (all retried with backoff); 413, or a 400 whose body mentions the
/// context, is a context overflow. Scoring posts `{text}` to
/// `score_endpoint` and expects `{logprobs: [..]}`.
pub struct HttpLm {
    id: String,
    cfg: HttpLmConfig,
    client: reqwest::blocking::Client,
    limit: InFlightLimit,
}

impl HttpLm {
    pub fn new(cfg: HttpLmConfig) -> Result<Self, LmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(cfg.timeout_ms))
            .build()
            .map_err(|e| LmError::Provider(e.to_string()))?;
        let id = format!("http:{}@{}", cfg.model.as_deref().unwrap_or("default"), cfg.endpoint);
        Ok(HttpLm {
            id,
            limit: InFlightLimit::new(cfg.in_flight),
            cfg,
            client,
        })
    }

    fn post<T: Serialize, R: for<'de> Deserialize<'de>>(&self, url: &str, body: &T) -> Result<R, LmError> {
        let _permit = self.limit.acquire();
        let mut req = self.client.post(url).json(body);
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                LmError::Timeout(e.to_string())
            } else {
                LmError::Transient(e.to_string())
            }
        })?;
        let status = resp.status();
        if status.is_success() {
            return resp.json().map_err(|e| LmError::Provider(format!("bad response body: {e}")));
        }
        let body = resp.text().unwrap_or_default();
        let detail = format!("HTTP {status}: {}", body.chars().take(200).collect::<String>());
        Err(match status.as_u16() {
            429 => LmError::RateLimited(detail),
            408 | 504 => LmError::Timeout(detail),
            413 => LmError::ContextOverflow(detail),
            400 if body.to_lowercase().contains("context") => LmError::ContextOverflow(detail),
            s if s >= 500 => LmError::Transient(detail),
            _ => LmError::Provider(detail),
        })
    }
}

impl LmProvider for HttpLm {
    fn provider_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, LmError> {
        let wire = WireRequest {
            model: self.cfg.model.as_deref(),
            prompt: &req.prompt,
            max_tokens: req.max_new_tokens,
            stop: &req.stop,
            temperature: 0.0,
        };
        let started = Instant::now();
        let resp: WireResponse = self
            .cfg
            .retry
            .run(|| self.post(&self.cfg.endpoint, &wire), LmError::is_retryable)?;
        let finish_reason = match resp.finish_reason.as_deref() {
            Some("stop") => FinishReason::Stop,
            Some("length") => FinishReason::Length,
            _ => FinishReason::ProviderEnd,
        };
        Ok(CompletionResult {
            text: resp.text,
            finish_reason,
            latency: started.elapsed(),
            provider_id: self.id.clone(),
        })
    }

    fn score(&self, text: &str) -> Result<Vec<f64>, LmError> {
        let url = self.cfg.score_endpoint.as_deref().ok_or(LmError::ScoringUnsupported)?;
        let body = ScoreRequest {
            model: self.cfg.model.as_deref(),
            text,
        };
        let resp: ScoreResponse = self.cfg.retry.run(|| self.post(url, &body), LmError::is_retryable)?;
        Ok(resp.logprobs)
    }

    fn supports_scoring(&self) -> bool {
        self.cfg.score_endpoint.is_some()
    }

    fn context_budget(&self) -> Option<usize> {
        self.cfg.max_prompt_chars
    }

    fn ping(&self) -> Result<(), LmError> {
        self.client
            .get(&self.cfg.endpoint)
            .send()
            .map(|_| ())
            .map_err(|e| LmError::Transient(e.to_string()))
    }
}

//! Exemplar selection for both prompting stages.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DialogueSample, QueryContext};
use crate::embedding::{encode_query_text, EmbeddingProvider, SampleIndex};
use crate::error::{Error, Result};
use crate::lm::{perplexity_from_logprobs, LmError, LmProvider};
use crate::metrics::{normalize, overlap_count};
use crate::prompt::{render_knowledge_exemplar, PromptTemplateConfig};

/// RNG stream ids: each selection draws from its own stream of the run seed.
const STREAM_RESPONSE: u64 = 1;
const STREAM_RANDOM_KNOWLEDGE: u64 = 2;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    #[default]
    Query,
    Perplexity,
    Random,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "query" => Ok(Strategy::Query),
            "perplexity" => Ok(Strategy::Perplexity),
            "random" => Ok(Strategy::Random),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub strategy: Strategy,
    pub n_knowledge: usize,
    pub n_response: usize,
    pub overlap_low: f64,
    pub overlap_high: f64,
    pub rng_seed: u64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            strategy: Strategy::Query,
            n_knowledge: 10,
            n_response: 20,
            overlap_low: 0.6,
            overlap_high: 0.9,
            rng_seed: 1234,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.overlap_low && self.overlap_low < self.overlap_high && self.overlap_high <= 1.0) {
            return Err(Error::Config(format!(
                "overlap thresholds must satisfy 0 <= low < high <= 1, got [{}, {}]",
                self.overlap_low, self.overlap_high
            )));
        }
        if self.n_knowledge == 0 || self.n_response == 0 {
            return Err(Error::Config("n_knowledge and n_response must be >= 1".into()));
        }
        Ok(())
    }
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Seeded uniform draw of `n` distinct indices out of `len`, in draw order.
pub fn draw_indices(seed: u64, stream: u64, len: usize, n: usize) -> Result<Vec<usize>> {
    if n > len {
        return Err(Error::NotEnoughSamples { needed: n, available: len });
    }
    Ok(rand::seq::index::sample(&mut rng(seed, stream), len, n).into_vec())
}

/// Share of response tokens covered by the knowledge (multiset counts).
pub fn knowledge_overlap_ratio(sample: &DialogueSample) -> Result<f64> {
    let response = normalize(&sample.response);
    if response.is_empty() {
        return Err(Error::InvalidSample {
            id: sample.id.clone(),
            message: "response has no tokens".into(),
        });
    }
    let knowledge = normalize(&sample.knowledge);
    Ok(overlap_count(&response, &knowledge) as f64 / response.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub id: String,
    pub ratio: f64,
}

/// Database samples whose overlap ratio lies in `[overlap_low, overlap_high]`,
/// in corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseExemplarPool {
    entries: Vec<PoolEntry>,
    samples: Vec<DialogueSample>,
}

impl ResponseExemplarPool {
    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn samples(&self) -> &[DialogueSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn build_response_pool(corpus: &Corpus, cfg: &SelectionConfig) -> Result<ResponseExemplarPool> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus(corpus.name().into()));
    }
    let mut entries = Vec::new();
    let mut samples = Vec::new();
    for s in corpus.exemplars() {
        let Ok(ratio) = knowledge_overlap_ratio(s) else { continue };
        if ratio >= cfg.overlap_low && ratio <= cfg.overlap_high {
            entries.push(PoolEntry { id: s.id.clone(), ratio });
            samples.push(s.clone());
        }
    }
    if entries.is_empty() {
        return Err(Error::EmptyPool {
            low: cfg.overlap_low,
            high: cfg.overlap_high,
        });
    }
    Ok(ResponseExemplarPool { entries, samples })
}

/// Query-independent draw of `n_response` pool samples.
pub fn select_response_exemplars(pool: &ResponseExemplarPool, cfg: &SelectionConfig) -> Result<Vec<DialogueSample>> {
    let idx = draw_indices(cfg.rng_seed, STREAM_RESPONSE, pool.len(), cfg.n_response)?;
    Ok(idx.into_iter().map(|i| pool.samples[i].clone()).collect())
}

/// A selected exemplar with the score that ranked it (similarity or
/// perplexity; none for random draws).
#[derive(Debug, Clone, PartialEq)]
pub struct Scored {
    pub sample: DialogueSample,
    pub score: Option<f64>,
}

/// The `n_knowledge` database samples most similar to the query (topic plus
/// full history), best first.
pub fn select_knowledge_exemplars(
    query: &QueryContext,
    corpus: &Corpus,
    index: &SampleIndex,
    provider: &dyn EmbeddingProvider,
    cfg: &SelectionConfig,
) -> Result<Vec<Scored>> {
    if index.len() != corpus.len() {
        return Err(Error::IndexMismatch(format!(
            "index has {} rows, corpus {} samples",
            index.len(),
            corpus.len()
        )));
    }
    let text = encode_query_text(query);
    let mut vecs = provider.embed(std::slice::from_ref(&text))?;
    let qv = vecs
        .pop()
        .ok_or_else(|| Error::Embedding("provider returned no vector for the query".into()))?;
    let hits = index.top_n(&qv, provider.encoder_id(), cfg.n_knowledge)?;
    Ok(hits
        .into_iter()
        .map(|h| Scored {
            sample: corpus.samples()[h.position].clone(),
            score: Some(h.score),
        })
        .collect())
}

pub fn select_random_knowledge_exemplars(corpus: &Corpus, cfg: &SelectionConfig) -> Result<Vec<DialogueSample>> {
    let pool: Vec<&DialogueSample> = corpus.exemplars().collect();
    let idx = draw_indices(cfg.rng_seed, STREAM_RANDOM_KNOWLEDGE, pool.len(), cfg.n_knowledge)?;
    Ok(idx.into_iter().map(|i| pool[i].clone()).collect())
}

/// Per-sample perplexity of the single-exemplar knowledge prompt, computed
/// once per (provider, corpus, templates) and reusable for every query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityScores {
    pub provider_id: String,
    pub corpus_hash: String,
    pub template_hash: String,
    pub scores: BTreeMap<String, f64>,
}

fn template_hash(t: &PromptTemplateConfig) -> String {
    crate::sha256_hex(serde_json::to_vec(t).expect("templates serialize"))
}

impl PerplexityScores {
    pub fn compute(
        corpus: &Corpus,
        lm: &dyn LmProvider,
        templates: &PromptTemplateConfig,
        in_flight: usize,
    ) -> Result<Self> {
        if !lm.supports_scoring() {
            return Err(LmError::ScoringUnsupported.into());
        }
        let samples: Vec<&DialogueSample> = corpus.exemplars().collect();
        let out: Mutex<BTreeMap<String, f64>> = Mutex::new(BTreeMap::new());
        let failure: Mutex<Option<LmError>> = Mutex::new(None);
        let next = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..in_flight.max(1).min(samples.len().max(1)) {
                s.spawn(|| loop {
                    if failure.lock().unwrap_or_else(|e| e.into_inner()).is_some() {
                        return;
                    }
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(sample) = samples.get(i) else { return };
                    let text = render_knowledge_exemplar(sample, templates);
                    match lm.score(&text).and_then(|lp| perplexity_from_logprobs(&lp)) {
                        Ok(p) => {
                            out.lock().unwrap_or_else(|e| e.into_inner()).insert(sample.id.clone(), p);
                        }
                        Err(e) => {
                            failure.lock().unwrap_or_else(|e| e.into_inner()).get_or_insert(e);
                            return;
                        }
                    }
                });
            }
        });
        if let Some(e) = failure.into_inner().unwrap_or_else(|e| e.into_inner()) {
            return Err(e.into());
        }
        Ok(PerplexityScores {
            provider_id: lm.provider_id().to_owned(),
            corpus_hash: corpus.content_hash(),
            template_hash: template_hash(templates),
            scores: out.into_inner().unwrap_or_else(|e| e.into_inner()),
        })
    }

    pub fn matches(&self, corpus: &Corpus, lm: &dyn LmProvider, templates: &PromptTemplateConfig) -> bool {
        self.provider_id == lm.provider_id()
            && self.corpus_hash == corpus.content_hash()
            && self.template_hash == template_hash(templates)
    }

    /// Load the cache at `path` if it matches, otherwise compute and write it.
    pub fn load_or_compute(
        path: &Path,
        corpus: &Corpus,
        lm: &dyn LmProvider,
        templates: &PromptTemplateConfig,
        in_flight: usize,
    ) -> Result<Self> {
        if let Ok(bytes) = fs::read(path) {
            match serde_json::from_slice::<PerplexityScores>(&bytes) {
                Ok(cached) if cached.matches(corpus, lm, templates) => return Ok(cached),
                Ok(_) => tracing::info!(path = %path.display(), "perplexity cache is stale; recomputing"),
                Err(e) => tracing::warn!(path = %path.display(), error = %e, "unreadable perplexity cache; recomputing"),
            }
        }
        let fresh = Self::compute(corpus, lm, templates, in_flight)?;
        let json = serde_json::to_vec_pretty(&fresh).map_err(|e| Error::json("perplexity cache", e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))?;
        Ok(fresh)
    }

    /// The `n` lowest-perplexity samples, ties broken by corpus position.
    pub fn lowest(&self, corpus: &Corpus, n: usize) -> Result<Vec<Scored>> {
        let mut ranked: Vec<(f64, usize)> = self
            .scores
            .iter()
            .filter_map(|(id, p)| corpus.position(id).map(|pos| (*p, pos)))
            .collect();
        if n > ranked.len() {
            return Err(Error::NotEnoughSamples {
                needed: n,
                available: ranked.len(),
            });
        }
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        Ok(ranked
            .into_iter()
            .take(n)
            .map(|(p, pos)| Scored {
                sample: corpus.samples()[pos].clone(),
                score: Some(p),
            })
            .collect())
    }
}

pub fn select_knowledge_exemplars_ppl(
    corpus: &Corpus,
    lm: &dyn LmProvider,
    templates: &PromptTemplateConfig,
    cfg: &SelectionConfig,
) -> Result<Vec<Scored>> {
    PerplexityScores::compute(corpus, lm, templates, 1)?.lowest(corpus, cfg.n_knowledge)
}

//! Sentence-encoder providers and an exact dot-product index over database
//! samples.
//!
//! Similarity is the raw dot product of provider vectors; nothing is
//! normalized here. Search is an exhaustive scan, which is fine for
//! databases of tens of thousands of samples.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, DialogueSample, QueryContext};
use crate::error::{Error, Result};
use crate::limit::InFlightLimit;
use crate::retry::RetryPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f32>);

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::DimensionMismatch { expected: 1, actual: 0 });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(EmbeddingVector(values))
    }

    pub fn zeros(dim: usize) -> Self {
        EmbeddingVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    pub fn dot(&self, other: &[f32]) -> f64 {
        dot(&self.0, other)
    }
}

/// Dot product accumulated in f64. Starts from +0.0 so a zero query scores
/// every row +0.0 and ties stay in corpus order.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + f64::from(*x) * f64::from(*y))
}

/// A sentence encoder. Implementations must be deterministic: the same text
/// always maps to the same vector.
pub trait EmbeddingProvider: Send + Sync {
    fn encoder_id(&self) -> &str;
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>>;

    fn ping(&self) -> Result<()> {
        Ok(())
    }
}

/// Text fed to the encoder for a database sample: topic, then every history
/// turn, single-space separated.
pub fn encode_sample_text(sample: &DialogueSample) -> String {
    join_topic_history(&sample.topic, &sample.history)
}

/// Same concatenation for the live query.
pub fn encode_query_text(query: &QueryContext) -> String {
    join_topic_history(&query.topic, &query.history)
}

fn join_topic_history(topic: &str, history: &[String]) -> String {
    std::iter::once(topic)
        .chain(history.iter().map(String::as_str))
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Deterministic mock encoder: each text seeds a ChaCha8 stream through its
/// SHA-256 digest, yielding a unit-norm vector.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    id: String,
    dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        HashEmbedder {
            id: format!("mock-bow-{dim}"),
            dim: dim.max(1),
        }
    }

    /// Sum of one seeded random direction per lowercased word, normalised.
    /// Texts sharing words land near each other; empty text is the zero vector.
    pub fn vector_for(&self, text: &str) -> EmbeddingVector {
        let mut v = vec![0f32; self.dim];
        for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let seed: [u8; 32] = Sha256::digest(word.to_lowercase().as_bytes()).into();
            let mut rng = ChaCha8Rng::from_seed(seed);
            v.iter_mut().for_each(|x| *x += rng.random_range(-1.0f32..1.0));
        }
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        EmbeddingVector(v)
    }
}

impl EmbeddingProvider for HashEmbedder {
    fn encoder_id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        Ok(texts.iter().map(|t| self.vector_for(t)).collect())
    }
}

/// Fixed text → vector table, for tests and fixtures. Unknown texts are an error.
#[derive(Debug, Clone)]
pub struct LookupEmbedder {
    id: String,
    dim: usize,
    table: HashMap<String, Vec<f32>>,
}

impl LookupEmbedder {
    pub fn new(id: impl Into<String>, dim: usize, table: HashMap<String, Vec<f32>>) -> Self {
        LookupEmbedder {
            id: id.into(),
            dim,
            table,
        }
    }
}

impl EmbeddingProvider for LookupEmbedder {
    fn encoder_id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        texts
            .iter()
            .map(|t| {
                let v = self
                    .table
                    .get(t)
                    .ok_or_else(|| Error::Embedding(format!("no vector for text {t:?}")))?;
                EmbeddingVector::new(v.clone())
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    encoder_id: String,
    entries: Vec<(String, Vec<f32>)>,
}

/// Memoizes another provider by exact text, so repeated runs make no
/// external calls.
pub struct CachedEmbedder<P> {
    inner: P,
    cache: Mutex<HashMap<String, EmbeddingVector>>,
}

impl<P: EmbeddingProvider> CachedEmbedder<P> {
    pub fn new(inner: P) -> Self {
        CachedEmbedder {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.cache.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Load entries written by [`CachedEmbedder::save`]. Entries for another
    /// encoder are ignored.
    pub fn load(&self, path: &Path) -> Result<usize> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(0),
            Err(e) => return Err(Error::io(path, e)),
        };
        let file: CacheFile = serde_json::from_slice(&bytes).map_err(|e| Error::json(path.display().to_string(), e))?;
        if file.encoder_id != self.inner.encoder_id() {
            tracing::warn!(path = %path.display(), cached = %file.encoder_id, "embedding cache belongs to another encoder; ignoring");
            return Ok(0);
        }
        let mut cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        let n = file.entries.len();
        for (text, v) in file.entries {
            cache.insert(text, EmbeddingVector::new(v)?);
        }
        Ok(n)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        let mut entries: Vec<(String, Vec<f32>)> = cache.iter().map(|(k, v)| (k.clone(), v.0.clone())).collect();
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let file = CacheFile {
            encoder_id: self.inner.encoder_id().to_owned(),
            entries,
        };
        let json = serde_json::to_vec(&file).map_err(|e| Error::json("embedding cache", e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedEmbedder<P> {
    fn encoder_id(&self) -> &str {
        self.inner.encoder_id()
    }

    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let missing: Vec<String> = {
            let cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
            let mut seen = std::collections::HashSet::new();
            texts
                .iter()
                .filter(|t| !cache.contains_key(*t) && seen.insert(t.as_str()))
                .cloned()
                .collect()
        };
        if !missing.is_empty() {
            let fresh = self.inner.embed(&missing)?;
            let mut cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
            for (t, v) in missing.into_iter().zip(fresh) {
                cache.insert(t, v);
            }
        }
        let cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
        Ok(texts.iter().map(|t| cache[t].clone()).collect())
    }

    fn ping(&self) -> Result<()> {
        self.inner.ping()
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [String],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f32>>,
}

/// Remote encoder speaking `{texts} -> {vectors}` JSON over HTTP.
pub struct HttpEmbedder {
    id: String,
    dim: usize,
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    limit: InFlightLimit,
}

#[derive(Debug)]
enum EmbedCallError {
    Transient(String),
    Fatal(String),
}

impl HttpEmbedder {
    pub fn new(
        encoder_id: impl Into<String>,
        dim: usize,
        endpoint: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
        retry: RetryPolicy,
        in_flight: usize,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Embedding(e.to_string()))?;
        Ok(HttpEmbedder {
            id: encoder_id.into(),
            dim,
            endpoint: endpoint.into(),
            api_key,
            client,
            retry,
            limit: InFlightLimit::new(in_flight),
        })
    }

    fn call(&self, texts: &[String]) -> std::result::Result<EmbedResponse, EmbedCallError> {
        let _permit = self.limit.acquire();
        let mut req = self.client.post(&self.endpoint).json(&EmbedRequest { texts });
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| EmbedCallError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(EmbedCallError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(EmbedCallError::Fatal(format!("HTTP {status}")));
        }
        resp.json().map_err(|e| EmbedCallError::Fatal(format!("bad response body: {e}")))
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn encoder_id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>> {
        let body = self
            .retry
            .run(|| self.call(texts), |e| matches!(e, EmbedCallError::Transient(_)))
            .map_err(|e| match e {
                EmbedCallError::Transient(m) | EmbedCallError::Fatal(m) => Error::Embedding(m),
            })?;
        if body.vectors.len() != texts.len() {
            return Err(Error::Embedding(format!(
                "asked for {} vectors, got {}",
                texts.len(),
                body.vectors.len()
            )));
        }
        body.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dim {
                    return Err(Error::DimensionMismatch {
                        expected: self.dim,
                        actual: v.len(),
                    });
                }
                EmbeddingVector::new(v)
            })
            .collect()
    }

    fn ping(&self) -> Result<()> {
        self.embed(&["ping".to_owned()]).map(|_| ())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BuildOptions {
    pub batch_size: usize,
    pub in_flight: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            batch_size: 64,
            in_flight: 4,
        }
    }
}

/// One search result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub position: usize,
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexManifest {
    pub dim: usize,
    pub count: usize,
    pub encoder_id: String,
    pub corpus_name: String,
    pub corpus_hash: String,
    pub ids: Vec<String>,
}

/// Row-major matrix of sample embeddings aligned with corpus order.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleIndex {
    manifest: IndexManifest,
    data: Vec<f32>,
}

#[derive(PartialEq)]
struct Ranked {
    score: f64,
    position: usize,
}

impl Eq for Ranked {}

// "Greater" means better: higher score, then earlier position.
impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| other.position.cmp(&self.position))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn sidecar(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(prefix.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

impl SampleIndex {
    pub fn from_vectors(corpus: &Corpus, encoder_id: &str, vectors: Vec<EmbeddingVector>) -> Result<Self> {
        if vectors.len() != corpus.len() {
            return Err(Error::IndexMismatch(format!(
                "{} vectors for {} samples",
                vectors.len(),
                corpus.len()
            )));
        }
        let dim = vectors.first().map(EmbeddingVector::dim).unwrap_or(0);
        let mut data = Vec::with_capacity(dim * vectors.len());
        for v in &vectors {
            if v.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.dim(),
                });
            }
            data.extend_from_slice(v.values());
        }
        Ok(SampleIndex {
            manifest: IndexManifest {
                dim,
                count: vectors.len(),
                encoder_id: encoder_id.to_owned(),
                corpus_name: corpus.name().to_owned(),
                corpus_hash: corpus.content_hash(),
                ids: corpus.samples().iter().map(|s| s.id.clone()).collect(),
            },
            data,
        })
    }

    pub fn manifest(&self) -> &IndexManifest {
        &self.manifest
    }

    pub fn dim(&self) -> usize {
        self.manifest.dim
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    pub fn encoder_id(&self) -> &str {
        &self.manifest.encoder_id
    }

    pub fn row(&self, position: usize) -> &[f32] {
        let d = self.manifest.dim;
        &self.data[position * d..(position + 1) * d]
    }

    /// The `n` highest-scoring samples by dot product, best first. Equal
    /// scores keep corpus order.
    pub fn top_n(&self, query: &EmbeddingVector, query_encoder: &str, n: usize) -> Result<Vec<Hit>> {
        if query_encoder != self.manifest.encoder_id {
            return Err(Error::EncoderMismatch {
                index: self.manifest.encoder_id.clone(),
                query: query_encoder.to_owned(),
            });
        }
        if query.dim() != self.manifest.dim {
            return Err(Error::DimensionMismatch {
                expected: self.manifest.dim,
                actual: query.dim(),
            });
        }
        if n == 0 || n > self.len() {
            return Err(Error::OutOfRange { n, max: self.len() });
        }
        // min-heap of the best n seen so far
        let mut heap: BinaryHeap<std::cmp::Reverse<Ranked>> = BinaryHeap::with_capacity(n + 1);
        for position in 0..self.len() {
            let r = Ranked {
                score: query.dot(self.row(position)),
                position,
            };
            if heap.len() < n {
                heap.push(std::cmp::Reverse(r));
            } else if heap.peek().is_some_and(|worst| r > worst.0) {
                heap.pop();
                heap.push(std::cmp::Reverse(r));
            }
        }
        let mut best: Vec<Ranked> = heap.into_iter().map(|r| r.0).collect();
        best.sort_by(|a, b| b.cmp(a));
        Ok(best
            .into_iter()
            .map(|r| Hit {
                position: r.position,
                id: self.manifest.ids[r.position].clone(),
                score: r.score,
            })
            .collect())
    }

    /// Check that this index was built over exactly `corpus`.
    pub fn verify(&self, corpus: &Corpus) -> Result<()> {
        if self.manifest.count != corpus.len() || self.manifest.corpus_hash != corpus.content_hash() {
            return Err(Error::IndexMismatch(format!(
                "index over {:?} ({} rows) does not match corpus {:?} ({} samples)",
                self.manifest.corpus_name,
                self.manifest.count,
                corpus.name(),
                corpus.len()
            )));
        }
        Ok(())
    }

    /// Write `<prefix>.vec` (little-endian f32, row-major) and
    /// `<prefix>.manifest.json`.
    pub fn save(&self, prefix: &Path) -> Result<()> {
        let vec_path = sidecar(prefix, ".vec");
        let manifest_path = sidecar(prefix, ".manifest.json");
        if let Some(dir) = vec_path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(&vec_path, bytes).map_err(|e| Error::io(&vec_path, e))?;
        let json = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::json("index manifest", e))?;
        fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))
    }

    pub fn load(prefix: &Path) -> Result<Self> {
        let vec_path = sidecar(prefix, ".vec");
        let manifest_path = sidecar(prefix, ".manifest.json");
        let mtext = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: IndexManifest =
            serde_json::from_slice(&mtext).map_err(|e| Error::json(manifest_path.display().to_string(), e))?;
        let bytes = fs::read(&vec_path).map_err(|e| Error::io(&vec_path, e))?;
        if bytes.len() != manifest.dim * manifest.count * 4 || manifest.ids.len() != manifest.count {
            return Err(Error::IndexMismatch(format!(
                "{} holds {} bytes, manifest says {} x {} floats",
                vec_path.display(),
                bytes.len(),
                manifest.count,
                manifest.dim
            )));
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(pos));
        }
        Ok(SampleIndex { manifest, data })
    }

    pub fn exists(prefix: &Path) -> bool {
        sidecar(prefix, ".vec").exists() && sidecar(prefix, ".manifest.json").exists()
    }
}

/// Embed every sample of `corpus` in batches, with up to `in_flight` batches
/// outstanding. Rows keep corpus order.
pub fn build_index(corpus: &Corpus, provider: &dyn EmbeddingProvider, opts: BuildOptions) -> Result<SampleIndex> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus(corpus.name().into()));
    }
    let texts: Vec<String> = corpus.samples().iter().map(encode_sample_text).collect();
    let batch = opts.batch_size.max(1);
    let chunks: Vec<&[String]> = texts.chunks(batch).collect();
    let results: Mutex<Vec<Option<Vec<EmbeddingVector>>>> = Mutex::new(vec![None; chunks.len()]);
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    let next = AtomicUsize::new(0);
    let workers = opts.in_flight.max(1).min(chunks.len());
    let expected_dim = provider.dim();

    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                if first_error.lock().unwrap_or_else(|e| e.into_inner()).is_some() {
                    return;
                }
                let i = next.fetch_add(1, AtomicOrdering::SeqCst);
                let Some(chunk) = chunks.get(i) else { return };
                let outcome = provider.embed(chunk).and_then(|vs| {
                    if vs.len() != chunk.len() {
                        return Err(Error::Embedding(format!("batch of {} returned {} vectors", chunk.len(), vs.len())));
                    }
                    match vs.iter().find(|v| v.dim() != expected_dim) {
                        Some(bad) => Err(Error::DimensionMismatch {
                            expected: expected_dim,
                            actual: bad.dim(),
                        }),
                        None => Ok(vs),
                    }
                });
                match outcome {
                    Ok(vs) => results.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(vs),
                    Err(e) => {
                        first_error.lock().unwrap_or_else(|e| e.into_inner()).get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });

    if let Some(e) = first_error.into_inner().unwrap_or_else(|e| e.into_inner()) {
        return Err(e);
    }
    let vectors: Vec<EmbeddingVector> = results
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .flat_map(|c| c.unwrap_or_default())
        .collect();
    SampleIndex::from_vectors(corpus, provider.encoder_id(), vectors)
}

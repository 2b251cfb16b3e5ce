//! Two-stage orchestration: knowledge generation, then response generation.

use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, DialogueSample, QueryContext};
use crate::embedding::{EmbeddingProvider, SampleIndex};
use crate::error::{Error, Result, Stage};
use crate::lm::{self, CompletionRequest, FinishReason, LmError, LmProvider, DEFAULT_MAX_TOKENS_KNOWLEDGE, DEFAULT_MAX_TOKENS_RESPONSE};
use crate::prompt::{
    render_knowledge_prompt, render_response_prompt, truncate_at_newline, PromptFormat, PromptTemplateConfig,
    RenderedPrompt,
};
use crate::selection::{
    build_response_pool, select_knowledge_exemplars, select_random_knowledge_exemplars, select_response_exemplars,
    PerplexityScores, Scored, SelectionConfig, Strategy,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Msdp,
    /// Single stage: no knowledge generation, no knowledge slot.
    Ssdp,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "msdp" => Ok(Mode::Msdp),
            "ssdp" => Ok(Mode::Ssdp),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub selection: SelectionConfig,
    pub templates: PromptTemplateConfig,
    pub mode: Mode,
    pub response_format: PromptFormat,
    pub ablate_topic: bool,
    pub max_tokens_knowledge: usize,
    pub max_tokens_response: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            selection: SelectionConfig::default(),
            templates: PromptTemplateConfig::default(),
            mode: Mode::Msdp,
            response_format: PromptFormat::ResponseFmt3,
            ablate_topic: false,
            max_tokens_knowledge: DEFAULT_MAX_TOKENS_KNOWLEDGE,
            max_tokens_response: DEFAULT_MAX_TOKENS_RESPONSE,
        }
    }
}

impl PipelineConfig {
    /// The format actually rendered: ssdp always uses the knowledge-free one.
    pub fn effective_response_format(&self) -> PromptFormat {
        match self.mode {
            Mode::Ssdp => PromptFormat::ResponseSsdp,
            Mode::Msdp => self.response_format,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.selection.validate()?;
        self.templates.validate()?;
        if self.max_tokens_knowledge == 0 || self.max_tokens_response == 0 {
            return Err(Error::Config("max token budgets must be >= 1".into()));
        }
        match (self.mode, self.response_format) {
            (_, PromptFormat::KnowledgeDefault) => {
                Err(Error::Config("knowledge_default is not a response format".into()))
            }
            (Mode::Msdp, PromptFormat::ResponseSsdp) => {
                Err(Error::Config("response_ssdp requires mode = ssdp".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredExemplar {
    pub id: String,
    pub score: Option<f64>,
}

/// Provider-reported latency per stage, in microseconds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTimings {
    pub knowledge_us: u64,
    pub response_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderIds {
    pub lm: String,
    pub embedding: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedExemplars {
    pub stage: Stage,
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnTrace {
    pub query: QueryContext,
    pub mode: Mode,
    pub strategy: Option<Strategy>,
    pub knowledge_exemplars: Vec<ScoredExemplar>,
    pub knowledge_prompt: Option<RenderedPrompt>,
    pub raw_knowledge: String,
    pub knowledge: String,
    pub knowledge_finish: Option<FinishReason>,
    pub response_exemplar_ids: Vec<String>,
    pub response_prompt: RenderedPrompt,
    pub raw_response: String,
    pub response: String,
    pub response_finish: FinishReason,
    pub timings: StageTimings,
    pub provider_ids: ProviderIds,
    pub dropped: Vec<DroppedExemplars>,
    pub warnings: Vec<String>,
}

impl TurnTrace {
    pub fn knowledge_exemplar_ids(&self) -> Vec<&str> {
        self.knowledge_exemplars.iter().map(|e| e.id.as_str()).collect()
    }
}

/// Providers and prepared artifacts a pipeline runs against.
#[derive(Clone)]
pub struct Resources {
    pub database: Arc<Corpus>,
    pub lm: Arc<dyn LmProvider>,
    pub embedder: Option<Arc<dyn EmbeddingProvider>>,
    pub index: Option<Arc<SampleIndex>>,
    pub perplexity: Option<Arc<PerplexityScores>>,
}

enum KnowledgeSource {
    None,
    Query {
        index: Arc<SampleIndex>,
        embedder: Arc<dyn EmbeddingProvider>,
    },
    /// Query-independent selections fixed for the run.
    Fixed(Vec<Scored>),
}

/// A configured pipeline over one database. Response exemplars are drawn
/// once here and reused for every turn.
pub struct Pipeline {
    cfg: PipelineConfig,
    database: Arc<Corpus>,
    lm: Arc<dyn LmProvider>,
    knowledge: KnowledgeSource,
    response_exemplars: Vec<DialogueSample>,
}

impl std::fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Pipeline")
            .field("cfg", &self.cfg)
            .field("database", &self.database.name())
            .field("lm", &self.lm.provider_id())
            .finish_non_exhaustive()
    }
}

fn without_topic(samples: Vec<DialogueSample>) -> Vec<DialogueSample> {
    samples
        .into_iter()
        .map(|mut s| {
            s.topic.clear();
            s
        })
        .collect()
}

impl Pipeline {
    /// `res.database` must already be the exemplar view the index and
    /// perplexity scores were built from.
    pub fn new(cfg: PipelineConfig, res: Resources) -> Result<Self> {
        cfg.validate()?;
        let db = res.database;
        let pool = build_response_pool(&db, &cfg.selection)?;
        let response_exemplars = select_response_exemplars(&pool, &cfg.selection)?;

        let knowledge = match (cfg.mode, cfg.selection.strategy) {
            (Mode::Ssdp, _) => KnowledgeSource::None,
            (Mode::Msdp, Strategy::Query) => {
                let (Some(index), Some(embedder)) = (res.index, res.embedder) else {
                    return Err(Error::Config("query strategy needs an index and an embedding provider".into()));
                };
                index.verify(&db)?;
                if cfg.selection.n_knowledge > index.len() {
                    return Err(Error::OutOfRange {
                        n: cfg.selection.n_knowledge,
                        max: index.len(),
                    });
                }
                KnowledgeSource::Query { index, embedder }
            }
            (Mode::Msdp, Strategy::Perplexity) => {
                let Some(scores) = res.perplexity else {
                    return Err(Error::Config("perplexity strategy needs perplexity scores".into()));
                };
                if !scores.matches(&db, res.lm.as_ref(), &cfg.templates) {
                    return Err(Error::IndexMismatch(
                        "perplexity scores were computed for another provider, corpus or template set".into(),
                    ));
                }
                KnowledgeSource::Fixed(scores.lowest(&db, cfg.selection.n_knowledge)?)
            }
            (Mode::Msdp, Strategy::Random) => KnowledgeSource::Fixed(
                select_random_knowledge_exemplars(&db, &cfg.selection)?
                    .into_iter()
                    .map(|sample| Scored { sample, score: None })
                    .collect(),
            ),
        };
        Ok(Pipeline {
            cfg,
            database: db,
            lm: res.lm,
            knowledge,
            response_exemplars,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn database(&self) -> &Corpus {
        &self.database
    }

    pub fn response_exemplar_ids(&self) -> Vec<&str> {
        self.response_exemplars.iter().map(|s| s.id.as_str()).collect()
    }

    pub fn provider_ids(&self) -> ProviderIds {
        ProviderIds {
            lm: self.lm.provider_id().to_owned(),
            embedding: match &self.knowledge {
                KnowledgeSource::Query { embedder, .. } => Some(embedder.encoder_id().to_owned()),
                _ => None,
            },
        }
    }

    fn select_knowledge(&self, query: &QueryContext) -> Result<Vec<Scored>> {
        match &self.knowledge {
            KnowledgeSource::None => Ok(Vec::new()),
            KnowledgeSource::Fixed(v) => Ok(v.clone()),
            KnowledgeSource::Query { index, embedder } => {
                select_knowledge_exemplars(query, &self.database, index, embedder.as_ref(), &self.cfg.selection)
            }
        }
    }

    /// Render with as many exemplars as fit, complete, and on a context
    /// overflow drop one more exemplar from the end and retry.
    fn complete_fitted(
        &self,
        stage: Stage,
        exemplars: &[DialogueSample],
        max_new_tokens: usize,
        render: impl Fn(&[DialogueSample]) -> Result<RenderedPrompt>,
        dropped: &mut Vec<DroppedExemplars>,
    ) -> Result<(RenderedPrompt, lm::CompletionResult)> {
        let mut keep = exemplars.len();
        if let Some(budget) = self.lm.context_budget() {
            while keep > 0 && render(&exemplars[..keep])?.text.chars().count() > budget {
                keep -= 1;
            }
        }
        loop {
            let prompt = render(&exemplars[..keep])?;
            let req = CompletionRequest::greedy(prompt.text.clone(), max_new_tokens);
            match lm::complete(self.lm.as_ref(), &req) {
                Ok(done) => {
                    if keep < exemplars.len() {
                        dropped.push(DroppedExemplars {
                            stage,
                            ids: exemplars[keep..].iter().map(|s| s.id.clone()).collect(),
                        });
                    }
                    return Ok((prompt, done));
                }
                Err(LmError::ContextOverflow(_)) if keep > 0 => keep -= 1,
                Err(source) => return Err(Error::Lm { stage, source }),
            }
        }
    }

    fn rendered_query(&self, query: &QueryContext) -> QueryContext {
        if self.cfg.ablate_topic {
            QueryContext {
                topic: String::new(),
                history: query.history.clone(),
            }
        } else {
            query.clone()
        }
    }

    fn for_rendering(&self, samples: Vec<DialogueSample>) -> Vec<DialogueSample> {
        if self.cfg.ablate_topic {
            without_topic(samples)
        } else {
            samples
        }
    }

    /// Knowledge exemplars chosen for `query`, best first. Empty in ssdp mode.
    pub fn inspect_selection(&self, query: &QueryContext) -> Result<Vec<ScoredExemplar>> {
        Ok(self
            .select_knowledge(query)?
            .into_iter()
            .map(|s| ScoredExemplar {
                id: s.sample.id,
                score: s.score,
            })
            .collect())
    }

    /// The knowledge prompt a turn would send, before any length guard.
    pub fn preview_knowledge_prompt(&self, query: &QueryContext) -> Result<Option<RenderedPrompt>> {
        if self.cfg.mode == Mode::Ssdp {
            return Ok(None);
        }
        let samples = self.for_rendering(self.select_knowledge(query)?.into_iter().map(|s| s.sample).collect());
        Ok(Some(render_knowledge_prompt(&samples, &self.rendered_query(query), &self.cfg.templates)))
    }

    /// The response prompt a turn would send given `knowledge`.
    pub fn preview_response_prompt(&self, query: &QueryContext, knowledge: &str) -> Result<RenderedPrompt> {
        render_response_prompt(
            &self.for_rendering(self.response_exemplars.clone()),
            &self.rendered_query(query),
            knowledge,
            self.cfg.effective_response_format(),
            &self.cfg.templates,
        )
    }

    pub fn run_turn(&self, query: &QueryContext) -> Result<TurnTrace> {
        if query.history.is_empty() {
            return Err(Error::Validation("query history must be non-empty".into()));
        }
        let cfg = &self.cfg;
        let mut warnings = Vec::new();
        let mut dropped = Vec::new();
        let mut timings = StageTimings::default();

        let rendered_query = self.rendered_query(query);

        let mut knowledge_exemplars = Vec::new();
        let mut knowledge_prompt = None;
        let mut raw_knowledge = String::new();
        let mut knowledge = String::new();
        let mut knowledge_finish = None;
        if cfg.mode == Mode::Msdp {
            // The selection query keeps the topic even when renderings drop it.
            let selected = self.select_knowledge(query)?;
            knowledge_exemplars = selected
                .iter()
                .map(|s| ScoredExemplar {
                    id: s.sample.id.clone(),
                    score: s.score,
                })
                .collect();
            let samples = self.for_rendering(selected.into_iter().map(|s| s.sample).collect());
            let (prompt, done) = self.complete_fitted(
                Stage::Knowledge,
                &samples,
                cfg.max_tokens_knowledge,
                |ex| Ok(render_knowledge_prompt(ex, &rendered_query, &cfg.templates)),
                &mut dropped,
            )?;
            timings.knowledge_us = done.latency.as_micros() as u64;
            knowledge = truncate_at_newline(&done.text).to_owned();
            if knowledge.trim().is_empty() {
                warnings.push("knowledge generation produced no text; response stage ran with empty knowledge".into());
            }
            if done.finish_reason == FinishReason::Length {
                warnings.push("knowledge generation hit the token cap".into());
            }
            raw_knowledge = done.text;
            knowledge_finish = Some(done.finish_reason);
            knowledge_prompt = Some(prompt);
        }

        let format = cfg.effective_response_format();
        let response_samples = self.for_rendering(self.response_exemplars.clone());
        let (response_prompt, done) = self.complete_fitted(
            Stage::Response,
            &response_samples,
            cfg.max_tokens_response,
            |ex| render_response_prompt(ex, &rendered_query, &knowledge, format, &cfg.templates),
            &mut dropped,
        )?;
        timings.response_us = done.latency.as_micros() as u64;
        let response = truncate_at_newline(&done.text).to_owned();
        if response.trim().is_empty() {
            warnings.push("response generation produced no text".into());
        }
        if done.finish_reason == FinishReason::Length {
            warnings.push("response generation hit the token cap".into());
        }

        Ok(TurnTrace {
            query: query.clone(),
            mode: cfg.mode,
            strategy: (cfg.mode == Mode::Msdp).then_some(cfg.selection.strategy),
            knowledge_exemplars,
            knowledge_prompt,
            raw_knowledge,
            knowledge,
            knowledge_finish,
            response_exemplar_ids: self.response_exemplars.iter().map(|s| s.id.clone()).collect(),
            response_prompt,
            raw_response: done.text,
            response,
            response_finish: done.finish_reason,
            timings,
            provider_ids: self.provider_ids(),
            dropped,
            warnings,
        })
    }

    /// Drive a conversation: each user utterance and each generated reply
    /// joins the history for later turns.
    pub fn run_dialogue(&self, topic: &str, utterances: &[String]) -> Result<Vec<TurnTrace>> {
        if utterances.is_empty() {
            return Err(Error::Validation("a dialogue needs at least one utterance".into()));
        }
        let mut history = Vec::new();
        let mut traces = Vec::with_capacity(utterances.len());
        for u in utterances {
            history.push(u.clone());
            let trace = self.run_turn(&QueryContext::new(topic, history.clone())?)?;
            history.push(trace.response.clone());
            traces.push(trace);
        }
        Ok(traces)
    }

    /// Run every test record, up to `in_flight` at a time, and hand results to
    /// `sink` in corpus order. Failed records are logged and skipped.
    pub fn run_batch_with(
        &self,
        test: &Corpus,
        in_flight: usize,
        mut sink: impl FnMut(BatchRow) -> Result<()>,
    ) -> Result<BatchSummary> {
        let workers = in_flight.max(1);
        let chunk_len = workers * 8;
        let mut summary = BatchSummary::default();
        for chunk in test.samples().chunks(chunk_len) {
            let slots: Vec<std::sync::Mutex<Option<Result<TurnTrace>>>> =
                chunk.iter().map(|_| std::sync::Mutex::new(None)).collect();
            let next = AtomicUsize::new(0);
            std::thread::scope(|s| {
                for _ in 0..workers.min(chunk.len()) {
                    s.spawn(|| loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        let Some(record) = chunk.get(i) else { return };
                        let out = self.run_turn(&record.query());
                        *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(out);
                    });
                }
            });
            for (record, slot) in chunk.iter().zip(slots) {
                let outcome = slot
                    .into_inner()
                    .unwrap_or_else(|e| e.into_inner())
                    .unwrap_or_else(|| Err(Error::Validation("record was not processed".into())));
                match outcome {
                    Ok(trace) => {
                        sink(BatchRow {
                            record_id: record.id.clone(),
                            trace,
                            gold_knowledge: record.knowledge.clone(),
                            gold_response: record.response.clone(),
                        })?;
                        summary.written += 1;
                    }
                    Err(e) => {
                        tracing::warn!(record = %record.id, error = %e, "skipping record");
                        summary.skipped.push(SkippedRecord {
                            record_id: record.id.clone(),
                            error: e.to_string(),
                        });
                    }
                }
            }
        }
        Ok(summary)
    }

    pub fn run_batch(&self, test: &Corpus, in_flight: usize) -> Result<(Vec<BatchRow>, BatchSummary)> {
        let mut rows = Vec::with_capacity(test.len());
        let summary = self.run_batch_with(test, in_flight, |row| {
            rows.push(row);
            Ok(())
        })?;
        Ok((rows, summary))
    }

    /// Stream batch rows as JSON Lines.
    pub fn run_batch_jsonl(&self, test: &Corpus, in_flight: usize, out: &mut dyn Write) -> Result<BatchSummary> {
        self.run_batch_with(test, in_flight, |row| {
            let line = serde_json::to_string(&row).map_err(|e| Error::json("batch row", e))?;
            writeln!(out, "{line}").map_err(|e| Error::io("<batch output>", e))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRow {
    pub record_id: String,
    pub trace: TurnTrace,
    pub gold_knowledge: String,
    pub gold_response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedRecord {
    pub record_id: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub written: usize,
    pub skipped: Vec<SkippedRecord>,
}

/// Read rows written by [`Pipeline::run_batch_jsonl`].
pub fn read_batch_rows(path: &std::path::Path) -> Result<Vec<BatchRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::json(format!("{} line {}", path.display(), i + 1), e)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{build_index, BuildOptions, HashEmbedder};
    use crate::lm::{CompletionResult, Fallback, ScriptedLm};
    use std::collections::HashMap;
    use std::time::Duration;

    fn sample(i: usize) -> DialogueSample {
        let k = format!("fact{i} alpha beta gamma delta epsilon");
        DialogueSample {
            id: format!("db{i}"),
            topic: format!("topic{i}"),
            history: vec![format!("question {i}")],
            // 4 of 5 response tokens come from the knowledge: ratio 0.8
            response: format!("alpha beta gamma delta reply{i}"),
            knowledge: k,
        }
    }

    fn database(n: usize) -> Arc<Corpus> {
        Arc::new(Corpus::new("db", (0..n).map(sample).collect()).unwrap())
    }

    fn resources(lm: Arc<dyn LmProvider>, db: Arc<Corpus>) -> Resources {
        let emb = Arc::new(HashEmbedder::new(16));
        let index = Arc::new(build_index(&db, emb.as_ref(), BuildOptions::default()).unwrap());
        Resources {
            database: db,
            lm,
            embedder: Some(emb),
            index: Some(index),
            perplexity: None,
        }
    }

    fn small_cfg() -> PipelineConfig {
        PipelineConfig {
            selection: SelectionConfig {
                n_knowledge: 2,
                n_response: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn scripted_plumbing() {
        let db = database(6);
        let cfg = small_cfg();
        let query = QueryContext::new("Kyoto", vec!["Tell me about Kyoto".into()]).unwrap();
        // Discover the exact prompts with a first pass, then script them.
        let probe = Pipeline::new(cfg.clone(), resources(Arc::new(ScriptedLm::new(HashMap::new(), Fallback::Fixed("K.".into()))), db.clone())).unwrap();
        let t = probe.run_turn(&query).unwrap();
        let kp = t.knowledge_prompt.unwrap().text;
        let rp = t.response_prompt.text;
        let lm = ScriptedLm::from_prompts([(kp.as_str(), "K.\nmore"), (rp.as_str(), "R.\nUser: x")], Fallback::Fail);
        let p = Pipeline::new(cfg, resources(Arc::new(lm), db)).unwrap();
        let t = p.run_turn(&query).unwrap();
        assert_eq!(t.knowledge, "K.");
        assert_eq!(t.raw_knowledge, "K.\nmore");
        assert_eq!(t.response, "R.");
        assert!(t.warnings.is_empty());
        assert_eq!(t.knowledge_exemplars.len(), 2);
    }

    #[test]
    fn ssdp_has_no_knowledge_stage() {
        let lm: Arc<dyn LmProvider> = Arc::new(ScriptedLm::new(HashMap::new(), Fallback::Fixed("R.".into())));
        let mut cfg = small_cfg();
        let msdp = Pipeline::new(cfg.clone(), resources(lm.clone(), database(6))).unwrap();
        cfg.mode = Mode::Ssdp;
        let ssdp = Pipeline::new(cfg, resources(lm, database(6))).unwrap();
        let q = QueryContext::new("t", vec!["hi".into()]).unwrap();
        let t = ssdp.run_turn(&q).unwrap();
        assert!(t.knowledge.is_empty() && t.raw_knowledge.is_empty());
        assert!(t.knowledge_prompt.is_none() && t.knowledge_exemplars.is_empty());
        assert!(!t.response_prompt.text.contains("We know that:"));
        assert_eq!(t.response_prompt.format, PromptFormat::ResponseSsdp);
        assert_eq!(t.response_exemplar_ids, msdp.run_turn(&q).unwrap().response_exemplar_ids);
    }

    #[test]
    fn dialogue_accumulates_history() {
        let lm: Arc<dyn LmProvider> = Arc::new(ScriptedLm::new(HashMap::new(), Fallback::Fixed("ok".into())));
        let p = Pipeline::new(small_cfg(), resources(lm, database(6))).unwrap();
        let one = p.run_dialogue("t", &["u1".into()]).unwrap();
        assert_eq!(one[0].query.history, ["u1"]);
        let two = p.run_dialogue("t", &["u1".into(), "u2".into()]).unwrap();
        assert_eq!(two[1].query.history, ["u1", "ok", "u2"]);
        assert!(p.run_dialogue("t", &[]).is_err());
    }

    #[test]
    fn empty_knowledge_warns_and_continues() {
        let lm: Arc<dyn LmProvider> = Arc::new(ScriptedLm::new(HashMap::new(), Fallback::Fixed(String::new())));
        let p = Pipeline::new(small_cfg(), resources(lm, database(6))).unwrap();
        let t = p.run_turn(&QueryContext::new("t", vec!["hi".into()]).unwrap()).unwrap();
        assert_eq!(t.knowledge, "");
        assert!(t.response_prompt.text.ends_with("We know that: System replies: "));
        assert!(t.warnings.iter().any(|w| w.contains("knowledge")));
    }

    #[test]
    fn ablate_topic_clears_renderings_only() {
        let lm: Arc<dyn LmProvider> = Arc::new(ScriptedLm::new(HashMap::new(), Fallback::Fixed("x".into())));
        let cfg = PipelineConfig {
            ablate_topic: true,
            ..small_cfg()
        };
        let p = Pipeline::new(cfg, resources(lm, database(6))).unwrap();
        let t = p.run_turn(&QueryContext::new("Kyoto", vec!["hi".into()]).unwrap()).unwrap();
        let kp = t.knowledge_prompt.unwrap().text;
        assert!(!kp.contains("topic") && !kp.contains("Kyoto"), "{kp}");
        assert!(kp.ends_with("( hi ) =>"));
        assert!(!t.response_prompt.text.contains("topic"));
        assert_eq!(t.query.topic, "Kyoto");
    }

    struct Failing;
    impl LmProvider for Failing {
        fn provider_id(&self) -> &str {
            "failing"
        }
        fn complete(&self, req: &CompletionRequest) -> std::result::Result<CompletionResult, LmError> {
            if req.prompt.contains("( boom )") {
                return Err(LmError::Provider("boom".into()));
            }
            Ok(CompletionResult {
                text: "fine".into(),
                finish_reason: FinishReason::Stop,
                latency: Duration::ZERO,
                provider_id: "failing".into(),
            })
        }
    }

    #[test]
    fn errors_carry_stage_and_batch_skips() {
        let p = Pipeline::new(small_cfg(), resources(Arc::new(Failing), database(6))).unwrap();
        let err = p.run_turn(&QueryContext::new("t", vec!["boom".into()]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Lm { stage: Stage::Knowledge, .. }));

        let mk = |id: &str, turn: &str| DialogueSample {
            id: id.into(),
            topic: "t".into(),
            history: vec![turn.into()],
            knowledge: "k".into(),
            response: "r".into(),
        };
        let test = Corpus::new("test", vec![mk("a", "one"), mk("b", "boom"), mk("c", "three")]).unwrap();
        let (rows, summary) = p.run_batch(&test, 2).unwrap();
        assert_eq!(rows.iter().map(|r| r.record_id.as_str()).collect::<Vec<_>>(), ["a", "c"]);
        assert_eq!(summary.written, 2);
        assert_eq!(summary.skipped.len(), 1);
        assert_eq!(summary.skipped[0].record_id, "b");
    }

    /// Rejects prompts longer than `limit` characters.
    struct Tight {
        limit: usize,
        advertise: bool,
    }
    impl LmProvider for Tight {
        fn provider_id(&self) -> &str {
            "tight"
        }
        fn complete(&self, req: &CompletionRequest) -> std::result::Result<CompletionResult, LmError> {
            if req.prompt.chars().count() > self.limit {
                return Err(LmError::ContextOverflow("too long".into()));
            }
            Ok(CompletionResult {
                text: "ok".into(),
                finish_reason: FinishReason::Stop,
                latency: Duration::ZERO,
                provider_id: "tight".into(),
            })
        }
        fn context_budget(&self) -> Option<usize> {
            self.advertise.then_some(self.limit)
        }
    }

    #[test]
    fn context_guard_drops_from_the_end() {
        let cfg = PipelineConfig {
            selection: SelectionConfig {
                n_knowledge: 5,
                n_response: 5,
                ..Default::default()
            },
            ..Default::default()
        };
        for advertise in [true, false] {
            let lm = Arc::new(Tight { limit: 260, advertise });
            let p = Pipeline::new(cfg.clone(), resources(lm, database(10))).unwrap();
            let t = p.run_turn(&QueryContext::new("t", vec!["hi".into()]).unwrap()).unwrap();
            assert!(!t.dropped.is_empty());
            let kp = t.knowledge_prompt.as_ref().unwrap();
            assert!(kp.text.chars().count() <= 260);
            let all = t.knowledge_exemplar_ids();
            assert_eq!(kp.exemplar_ids, all[..kp.exemplar_ids.len()]);
            for d in &t.dropped {
                let stage_all: Vec<String> = match d.stage {
                    Stage::Knowledge => all.iter().map(|s| s.to_string()).collect(),
                    _ => t.response_exemplar_ids.clone(),
                };
                assert_eq!(d.ids, stage_all[stage_all.len() - d.ids.len()..]);
            }
        }
    }

    #[test]
    fn config_invariants() {
        let mut cfg = PipelineConfig {
            mode: Mode::Ssdp,
            ..Default::default()
        };
        assert_eq!(cfg.effective_response_format(), PromptFormat::ResponseSsdp);
        cfg.mode = Mode::Msdp;
        cfg.response_format = PromptFormat::ResponseSsdp;
        assert!(cfg.validate().is_err());
        cfg.response_format = PromptFormat::KnowledgeDefault;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn query_strategy_requires_index() {
        let lm: Arc<dyn LmProvider> = Arc::new(ScriptedLm::new(HashMap::new(), Fallback::Digest));
        let mut res = resources(lm, database(4));
        res.index = None;
        assert!(matches!(Pipeline::new(small_cfg(), res), Err(Error::Config(_))));
    }
}

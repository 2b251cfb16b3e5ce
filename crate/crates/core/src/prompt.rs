//! Prompt rendering for the knowledge and response stages.
//!
//! Blocks are joined with `"\n"`, one block per exemplar followed by the query
//! block, and the model is expected to write until the next newline. Field
//! text has embedded newlines replaced by spaces so the block structure holds.

use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueSample, QueryContext};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptTemplateConfig {
    pub system_label: String,
    pub user_label: String,
    pub knowledge_label: String,
    pub reply_label: String,
    pub knowledge_arrow: String,
}

impl Default for PromptTemplateConfig {
    fn default() -> Self {
        PromptTemplateConfig {
            system_label: "System:".into(),
            user_label: "User:".into(),
            knowledge_label: "We know that:".into(),
            reply_label: "System replies:".into(),
            knowledge_arrow: "=>".into(),
        }
    }
}

impl PromptTemplateConfig {
    pub fn validate(&self) -> Result<()> {
        let labels = [
            ("system_label", &self.system_label),
            ("user_label", &self.user_label),
            ("knowledge_label", &self.knowledge_label),
            ("reply_label", &self.reply_label),
            ("knowledge_arrow", &self.knowledge_arrow),
        ];
        for (name, v) in labels {
            if v.trim().is_empty() || v.contains('\n') {
                return Err(Error::Config(format!("template {name} must be a non-empty single-line string")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStage {
    Knowledge,
    Response,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptFormat {
    KnowledgeDefault,
    /// `<topic> <history> <knowledge> => <response>`
    ResponseFmt1,
    /// Knowledge ahead of the labeled history.
    ResponseFmt2,
    /// Labeled history, then knowledge, then reply.
    ResponseFmt3,
    /// Format 3 with the knowledge slot removed.
    ResponseSsdp,
}

impl std::str::FromStr for PromptFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| Error::Config(format!("unknown prompt format {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub text: String,
    pub stage: PromptStage,
    pub format: PromptFormat,
    pub exemplar_ids: Vec<String>,
}

fn one_line(s: &str) -> String {
    s.replace(['\r', '\n'], " ")
}

fn join_parts<'a>(parts: impl IntoIterator<Item = &'a str>) -> String {
    parts.into_iter().filter(|p| !p.is_empty()).collect::<Vec<_>>().join(" ")
}

/// `( <last turn> ) <topic> => <knowledge>`
pub fn render_knowledge_exemplar(sample: &DialogueSample, cfg: &PromptTemplateConfig) -> String {
    let last = one_line(sample.last_turn());
    let topic = one_line(&sample.topic);
    let knowledge = one_line(&sample.knowledge);
    join_parts(["(", &last, ")", &topic, &cfg.knowledge_arrow, &knowledge])
}

/// `( <last turn> ) <topic> =>`, with nothing after the arrow.
pub fn render_knowledge_query(query: &QueryContext, cfg: &PromptTemplateConfig) -> String {
    let last = one_line(query.last_turn());
    let topic = one_line(&query.topic);
    join_parts(["(", &last, ")", &topic, &cfg.knowledge_arrow])
}

pub fn render_knowledge_prompt(
    exemplars: &[DialogueSample],
    query: &QueryContext,
    cfg: &PromptTemplateConfig,
) -> RenderedPrompt {
    let mut lines: Vec<String> = exemplars.iter().map(|s| render_knowledge_exemplar(s, cfg)).collect();
    lines.push(render_knowledge_query(query, cfg));
    RenderedPrompt {
        text: lines.join("\n"),
        stage: PromptStage::Knowledge,
        format: PromptFormat::KnowledgeDefault,
        exemplar_ids: exemplars.iter().map(|s| s.id.clone()).collect(),
    }
}

/// History turns with speaker labels. The last turn is the user's; labels
/// alternate going backwards.
pub fn labeled_history(history: &[String], cfg: &PromptTemplateConfig) -> String {
    let n = history.len();
    history
        .iter()
        .enumerate()
        .map(|(i, turn)| {
            let label = if (n - 1 - i) % 2 == 0 { &cfg.user_label } else { &cfg.system_label };
            join_parts([label.as_str(), &one_line(turn)])
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// One response-stage block. `response = None` renders the query block, which
/// ends with the reply cue and a single space.
pub fn render_response_block(
    topic: &str,
    history: &[String],
    knowledge: &str,
    response: Option<&str>,
    format: PromptFormat,
    cfg: &PromptTemplateConfig,
) -> Result<String> {
    let topic = one_line(topic);
    let knowledge = one_line(knowledge);
    let (body, cue) = match format {
        PromptFormat::ResponseFmt3 => (
            join_parts([
                topic.as_str(),
                &labeled_history(history, cfg),
                &cfg.knowledge_label,
                &knowledge,
            ]),
            cfg.reply_label.as_str(),
        ),
        PromptFormat::ResponseFmt2 => (
            join_parts([
                topic.as_str(),
                &cfg.knowledge_label,
                &knowledge,
                &labeled_history(history, cfg),
            ]),
            cfg.reply_label.as_str(),
        ),
        PromptFormat::ResponseFmt1 => {
            let plain: Vec<String> = history.iter().map(|t| one_line(t)).collect();
            (
                join_parts([topic.as_str(), &plain.join(" "), &knowledge]),
                cfg.knowledge_arrow.as_str(),
            )
        }
        PromptFormat::ResponseSsdp => (join_parts([topic.as_str(), &labeled_history(history, cfg)]), cfg.reply_label.as_str()),
        PromptFormat::KnowledgeDefault => {
            return Err(Error::Config("knowledge_default is not a response format".into()));
        }
    };
    Ok(match response {
        Some(r) => join_parts([body.as_str(), cue, &one_line(r)]),
        None => format!("{} ", join_parts([body.as_str(), cue])),
    })
}

/// Response-stage prompt. For [`PromptFormat::ResponseSsdp`] the generated
/// knowledge is ignored.
pub fn render_response_prompt(
    exemplars: &[DialogueSample],
    query: &QueryContext,
    generated_knowledge: &str,
    format: PromptFormat,
    cfg: &PromptTemplateConfig,
) -> Result<RenderedPrompt> {
    let mut lines = Vec::with_capacity(exemplars.len() + 1);
    for s in exemplars {
        lines.push(render_response_block(&s.topic, &s.history, &s.knowledge, Some(&s.response), format, cfg)?);
    }
    lines.push(render_response_block(&query.topic, &query.history, generated_knowledge, None, format, cfg)?);
    Ok(RenderedPrompt {
        text: lines.join("\n"),
        stage: PromptStage::Response,
        format,
        exemplar_ids: exemplars.iter().map(|s| s.id.clone()).collect(),
    })
}

/// Text before the first newline.
pub fn truncate_at_newline(raw: &str) -> &str {
    raw.split('\n').next().unwrap_or("")
}

/// Cut at the earliest occurrence of any stop string.
pub fn truncate_at_stops<'a>(raw: &'a str, stops: &[String]) -> &'a str {
    let end = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| raw.find(s.as_str()))
        .min()
        .unwrap_or(raw.len());
    &raw[..end]
}

use serde::{Deserialize, Serialize};

use msdp_core::{Mode, PipelineConfig, PromptFormat, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    User,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
}

/// Stored form of a session. `config` is frozen at creation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub topic: String,
    /// Alternates user and system, starting with user.
    pub history: Vec<Turn>,
    /// Oldest first; at most the service's trace cap.
    pub trace_ids: Vec<String>,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
    pub config: PipelineConfig,
}

impl Session {
    pub fn turns_answered(&self) -> usize {
        self.history.len() / 2
    }

    pub fn utterances(&self) -> Vec<String> {
        self.history.iter().map(|t| t.text.clone()).collect()
    }
}

/// Per-session changes to the service's base pipeline config.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionOverrides {
    pub mode: Option<Mode>,
    pub strategy: Option<Strategy>,
    pub n_knowledge: Option<usize>,
    pub n_response: Option<usize>,
    pub ablate_topic: Option<bool>,
    pub response_format: Option<PromptFormat>,
    pub seed: Option<u64>,
}

impl SessionOverrides {
    pub fn apply(&self, base: &PipelineConfig) -> msdp_core::Result<PipelineConfig> {
        let mut c = base.clone();
        if let Some(m) = self.mode {
            c.mode = m;
        }
        if let Some(s) = self.strategy {
            c.selection.strategy = s;
        }
        if let Some(n) = self.n_knowledge {
            c.selection.n_knowledge = n;
        }
        if let Some(n) = self.n_response {
            c.selection.n_response = n;
        }
        if let Some(a) = self.ablate_topic {
            c.ablate_topic = a;
        }
        if let Some(f) = self.response_format {
            c.response_format = f;
        }
        if let Some(s) = self.seed {
            c.selection.rng_seed = s;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    #[serde(default)]
    pub topic: String,
    #[serde(default)]
    pub overrides: SessionOverrides,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PostMessage {
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnReply {
    pub knowledge: String,
    pub response: String,
    pub trace_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub topic: String,
    pub mode: Mode,
    pub history: Vec<Turn>,
    pub trace_ids: Vec<String>,
    pub turns_answered: usize,
    pub created_at_ms: u64,
    pub updated_at_ms: u64,
    pub config: PipelineConfig,
}

impl From<Session> for SessionSummary {
    fn from(s: Session) -> Self {
        SessionSummary {
            mode: s.config.mode,
            turns_answered: s.turns_answered(),
            id: s.id,
            topic: s.topic,
            history: s.history,
            trace_ids: s.trace_ids,
            created_at_ms: s.created_at_ms,
            updated_at_ms: s.updated_at_ms,
            config: s.config,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_validate() {
        let base = PipelineConfig::default();
        let o: SessionOverrides = serde_json::from_str(r#"{"mode":"ssdp","n_knowledge":3,"seed":9}"#).unwrap();
        let c = o.apply(&base).unwrap();
        assert_eq!((c.mode, c.selection.n_knowledge, c.selection.rng_seed), (Mode::Ssdp, 3, 9));
        assert_eq!(c.selection.n_response, base.selection.n_response);
        assert!(SessionOverrides { n_knowledge: Some(0), ..Default::default() }.apply(&base).is_err());
        assert!(serde_json::from_str::<SessionOverrides>(r#"{"temperature":1}"#).is_err());
    }
}

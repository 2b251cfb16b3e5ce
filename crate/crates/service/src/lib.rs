//! Multi-turn chat sessions over the two-stage pipeline, served as JSON.
//!
//! | route | body | reply |
//! |---|---|---|
//! | `POST /sessions` | `{topic, overrides}` | `{id}` |
//! | `POST /sessions/{id}/messages` | `{text}` | `{knowledge, response, trace_id}` |
//! | `GET /sessions/{id}` | | [`SessionSummary`] |
//! | `GET /sessions/{id}/traces/{tid}` | | `TurnTrace` |
//! | `GET /exemplars/{id}` | | database sample |
//! | `GET /healthz` | | `{status, providers}` |

pub mod session;
pub mod store;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;

use msdp_core::error::ErrorKind;
use msdp_core::harness::Prepared;
use msdp_core::pipeline::ProviderIds;
use msdp_core::{Pipeline, PipelineConfig, QueryContext};

pub use session::{CreateSession, Created, PostMessage, Session, SessionOverrides, SessionSummary, Speaker, Turn, TurnReply};
pub use store::SessionStore;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ApiError {
    NotFound(String),
    Validation(String),
    Provider(String),
    Internal(String),
}

impl From<msdp_core::Error> for ApiError {
    fn from(e: msdp_core::Error) -> Self {
        match e.kind() {
            ErrorKind::Provider => ApiError::Provider(e.to_string()),
            ErrorKind::Validation => ApiError::Validation(e.to_string()),
            ErrorKind::Config => ApiError::Internal(e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind, message) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, "not_found", m),
            ApiError::Validation(m) => (StatusCode::UNPROCESSABLE_ENTITY, "validation", m),
            ApiError::Provider(m) => (StatusCode::BAD_GATEWAY, "provider", m),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, "internal", m),
        };
        (status, Json(json!({ "error": kind, "message": message }))).into_response()
    }
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0)
}

struct Inner {
    base: PipelineConfig,
    trace_cap: usize,
    prepared: Mutex<Prepared>,
    /// Keyed by the serialized config, so sessions with equal snapshots share one.
    pipelines: Mutex<HashMap<String, Arc<Pipeline>>>,
    store: SessionStore,
    providers: Mutex<Option<ProviderIds>>,
    turn_locks: Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    /// Sessions go to `service.store` when set, otherwise to memory. The base
    /// pipeline is built here so a bad database or index fails at startup.
    pub fn new(prepared: Prepared) -> Result<Self, ApiError> {
        let store = match prepared.config.service.store.as_deref() {
            Some(p) => SessionStore::open(p)?,
            None => SessionStore::in_memory()?,
        };
        Self::with_store(prepared, store)
    }

    pub fn with_store(prepared: Prepared, store: SessionStore) -> Result<Self, ApiError> {
        let base = prepared.config.pipeline_config();
        let state = AppState(Arc::new(Inner {
            trace_cap: prepared.config.service.trace_cap.max(1),
            base: base.clone(),
            prepared: Mutex::new(prepared),
            pipelines: Mutex::new(HashMap::new()),
            store,
            providers: Mutex::new(None),
            turn_locks: Mutex::new(HashMap::new()),
        }));
        let ids = state.pipeline(&base)?.provider_ids();
        *state.0.providers.lock().expect("provider ids") = Some(ids);
        Ok(state)
    }

    pub fn store(&self) -> &SessionStore {
        &self.0.store
    }

    /// Blocking: may build an index or score perplexities on first use.
    fn pipeline(&self, cfg: &PipelineConfig) -> Result<Arc<Pipeline>, ApiError> {
        let key = serde_json::to_string(cfg).map_err(|e| ApiError::Internal(e.to_string()))?;
        if let Some(p) = self.0.pipelines.lock().expect("pipeline cache").get(&key) {
            return Ok(p.clone());
        }
        let p = Arc::new(self.0.prepared.lock().expect("prepared").pipeline(cfg.clone())?);
        Ok(self.0.pipelines.lock().expect("pipeline cache").entry(key).or_insert(p).clone())
    }

    async fn pipeline_async(&self, cfg: PipelineConfig) -> Result<Arc<Pipeline>, ApiError> {
        let s = self.clone();
        blocking(move || s.pipeline(&cfg)).await
    }

    fn turn_lock(&self, id: &str) -> Arc<tokio::sync::Mutex<()>> {
        self.0.turn_locks.lock().expect("turn locks").entry(id.to_owned()).or_default().clone()
    }

    fn session(&self, id: &str) -> Result<Session, ApiError> {
        self.0.store.get(id)?.ok_or_else(|| ApiError::NotFound(format!("session {id}")))
    }

    pub async fn create_session(&self, req: CreateSession) -> Result<Created, ApiError> {
        let config = req.overrides.apply(&self.0.base).map_err(|e| ApiError::Validation(e.to_string()))?;
        if req.topic.trim().is_empty() && !config.ablate_topic {
            return Err(ApiError::Validation("topic must be non-empty unless ablate_topic is set".into()));
        }
        self.pipeline_async(config.clone()).await?;
        let now = now_ms();
        let session = Session {
            id: uuid::Uuid::new_v4().to_string(),
            topic: req.topic,
            history: Vec::new(),
            trace_ids: Vec::new(),
            created_at_ms: now,
            updated_at_ms: now,
            config,
        };
        self.0.store.insert(&session)?;
        Ok(Created { id: session.id })
    }

    /// Run one turn. The utterance, reply and trace are stored together or
    /// not at all; turns within a session run one at a time.
    pub async fn post_message(&self, id: &str, text: String) -> Result<TurnReply, ApiError> {
        if text.trim().is_empty() {
            return Err(ApiError::Validation("message text must be non-empty".into()));
        }
        let lock = self.turn_lock(id);
        let _guard = lock.lock().await;
        let mut session = self.session(id)?;
        let pipeline = self.pipeline_async(session.config.clone()).await?;
        let mut utterances = session.utterances();
        utterances.push(text.clone());
        let query = QueryContext::new(session.topic.clone(), utterances)?;
        let trace = blocking(move || pipeline.run_turn(&query).map_err(ApiError::from)).await?;
        let trace_json = serde_json::to_string(&trace).map_err(|e| ApiError::Internal(e.to_string()))?;

        let trace_id = uuid::Uuid::new_v4().to_string();
        session.history.push(Turn { speaker: Speaker::User, text });
        session.history.push(Turn {
            speaker: Speaker::System,
            text: trace.response.clone(),
        });
        session.trace_ids.push(trace_id.clone());
        let excess = session.trace_ids.len().saturating_sub(self.0.trace_cap);
        let evicted: Vec<String> = session.trace_ids.drain(..excess).collect();
        session.updated_at_ms = now_ms();
        self.0.store.commit_turn(&session, &trace_id, &trace_json, &evicted)?;
        Ok(TurnReply {
            knowledge: trace.knowledge,
            response: trace.response,
            trace_id,
        })
    }

    pub fn summary(&self, id: &str) -> Result<SessionSummary, ApiError> {
        self.session(id).map(SessionSummary::from)
    }

    /// The trace JSON exactly as serialized when the turn ran.
    pub fn trace_json(&self, id: &str, trace_id: &str) -> Result<String, ApiError> {
        self.session(id)?;
        self.0
            .store
            .trace(id, trace_id)?
            .ok_or_else(|| ApiError::NotFound(format!("trace {trace_id} in session {id}")))
    }

    pub fn exemplar(&self, id: &str) -> Result<msdp_core::DialogueSample, ApiError> {
        let p = self.0.prepared.lock().expect("prepared");
        p.database.get(id).cloned().ok_or_else(|| ApiError::NotFound(format!("exemplar {id}")))
    }

    pub async fn health(&self) -> serde_json::Value {
        let s = self.clone();
        let ping = blocking(move || {
            let lm = s.0.prepared.lock().expect("prepared").lm.clone();
            Ok(lm.ping())
        })
        .await;
        let ids = self.0.providers.lock().expect("provider ids").clone();
        let lm_id = ids.as_ref().map(|i| i.lm.clone());
        let embedding = ids.and_then(|i| i.embedding);
        let (status, lm) = match ping {
            Ok(Ok(())) => ("ok", json!({ "id": lm_id, "reachable": true })),
            Ok(Err(e)) => ("degraded", json!({ "id": lm_id, "reachable": false, "error": e.to_string() })),
            Err(e) => ("degraded", json!({ "id": lm_id, "reachable": false, "error": format!("{e:?}") })),
        };
        json!({ "status": status, "providers": { "lm": lm, "embedding": { "id": embedding } } })
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(format!("worker panicked: {e}")))?
}

fn body<T>(b: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    b.map(|Json(v)| v).map_err(|e| ApiError::Validation(e.body_text()))
}

async fn create_session(State(s): State<AppState>, b: Result<Json<CreateSession>, JsonRejection>) -> Result<impl IntoResponse, ApiError> {
    let created = s.create_session(body(b)?).await?;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn post_message(
    State(s): State<AppState>,
    Path(id): Path<String>,
    b: Result<Json<PostMessage>, JsonRejection>,
) -> Result<Json<TurnReply>, ApiError> {
    let msg = body(b)?;
    s.post_message(&id, msg.text).await.map(Json)
}

async fn get_session(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionSummary>, ApiError> {
    s.summary(&id).map(Json)
}

async fn get_trace(State(s): State<AppState>, Path((id, tid)): Path<(String, String)>) -> Result<Response, ApiError> {
    let text = s.trace_json(&id, &tid)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], text).into_response())
}

async fn get_exemplar(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<msdp_core::DialogueSample>, ApiError> {
    s.exemplar(&id).map(Json)
}

async fn healthz(State(s): State<AppState>) -> Json<serde_json::Value> {
    Json(s.health().await)
}

pub fn router(state: AppState) -> Router {
    let ui = state.0.prepared.lock().expect("prepared").config.service.ui_dir.clone();
    let mut app = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/traces/{tid}", get(get_trace))
        .route("/exemplars/{id}", get(get_exemplar))
        .route("/healthz", get(healthz));
    if let Some(dir) = ui {
        app = app.nest_service("/ui", tower_http::services::ServeDir::new(dir));
    }
    app.with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

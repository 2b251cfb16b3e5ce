use std::fs;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use msdp_core::config::MsdpConfig;
use msdp_core::harness::Prepared;
use msdp_core::{synthetic, CompletionRequest, CompletionResult, Corpus, LmError, LmProvider, QueryContext};
use msdp_service::{AppState, SessionStore, SessionSummary, Speaker, TurnReply};
use reqwest::StatusCode;
use serde_json::{json, Value};

/// Fails response-stage calls while `down` is set; knowledge prompts still pass.
struct Outage {
    inner: Arc<dyn LmProvider>,
    down: AtomicBool,
}

impl LmProvider for Outage {
    fn provider_id(&self) -> &str {
        self.inner.provider_id()
    }

    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, LmError> {
        if self.down.load(Ordering::SeqCst) && !req.prompt.trim_end().ends_with("=>") {
            return Err(LmError::Transient("backend offline".into()));
        }
        self.inner.complete(req)
    }

    fn ping(&self) -> Result<(), LmError> {
        if self.down.load(Ordering::SeqCst) {
            return Err(LmError::Transient("backend offline".into()));
        }
        Ok(())
    }
}

struct Env {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Env {
    fn new(service: &str) -> Env {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        Corpus::new("db", synthetic::samples("db", 120, 5)).unwrap().save(&root.join("db.jsonl")).unwrap();
        let text = format!(
            "[provider.lm]\nfallback = \"copy_knowledge\"\n[provider.embed]\ndim = 32\n[run]\ndatabase = \"db.jsonl\"\nindex = \"idx/db\"\n[service]\n{service}"
        );
        fs::write(root.join("msdp.toml"), text).unwrap();
        Env { _dir: dir, root }
    }

    fn config(&self) -> MsdpConfig {
        MsdpConfig::load(&self.root.join("msdp.toml")).unwrap()
    }

    fn state(&self) -> AppState {
        AppState::new(Prepared::new(self.config()).unwrap()).unwrap()
    }
}

async fn spawn(state: AppState) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr: SocketAddr = listener.local_addr().unwrap();
    tokio::spawn(msdp_service::serve(listener, state));
    format!("http://{addr}")
}

struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    async fn new(state: AppState) -> Client {
        Client {
            base: spawn(state).await,
            http: reqwest::Client::new(),
        }
    }

    async fn create(&self, body: Value) -> (StatusCode, Value) {
        let r = self.http.post(format!("{}/sessions", self.base)).json(&body).send().await.unwrap();
        (r.status(), r.json().await.unwrap())
    }

    async fn session(&self, topic: &str) -> String {
        let (status, v) = self.create(json!({ "topic": topic })).await;
        assert_eq!(status, StatusCode::CREATED, "{v}");
        v["id"].as_str().unwrap().to_owned()
    }

    async fn say(&self, id: &str, text: &str) -> (StatusCode, Value) {
        let r = self
            .http
            .post(format!("{}/sessions/{id}/messages", self.base))
            .json(&json!({ "text": text }))
            .send()
            .await
            .unwrap();
        (r.status(), r.json().await.unwrap())
    }

    async fn reply(&self, id: &str, text: &str) -> TurnReply {
        let (status, v) = self.say(id, text).await;
        assert_eq!(status, StatusCode::OK, "{v}");
        serde_json::from_value(v).unwrap()
    }

    async fn get(&self, path: &str) -> (StatusCode, String) {
        let r = self.http.get(format!("{}{path}", self.base)).send().await.unwrap();
        (r.status(), r.text().await.unwrap())
    }

    async fn summary(&self, id: &str) -> SessionSummary {
        let (status, text) = self.get(&format!("/sessions/{id}")).await;
        assert_eq!(status, StatusCode::OK, "{text}");
        serde_json::from_str(&text).unwrap()
    }
}

fn utterance(session: usize, turn: usize) -> String {
    let words = ["history", "music", "island", "culture", "garden", "market", "river", "festival"];
    format!("tell me {} {} please", words[(session * 3 + turn) % words.len()], words[turn % words.len()])
}

#[tokio::test(flavor = "multi_thread")]
async fn create_validates_topic_and_overrides() {
    let env = Env::new("");
    let c = Client::new(env.state()).await;
    let id = c.session("Kyoto").await;
    let s = c.summary(&id).await;
    assert_eq!(s.topic, "Kyoto");
    assert!(s.history.is_empty() && s.trace_ids.is_empty());
    assert_eq!(s.config.mode, msdp_core::Mode::Msdp);

    let (status, v) = c.create(json!({ "topic": "  " })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "validation");
    let (status, _) = c.create(json!({ "topic": "", "overrides": { "ablate_topic": true } })).await;
    assert_eq!(status, StatusCode::CREATED);
    let (status, _) = c.create(json!({ "topic": "Tea", "overrides": { "n_knowledge": 0 } })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = c.create(json!({ "topic": "Tea", "overrides": { "temperature": 0.7 } })).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, v) = c.create(json!({ "topic": "Tea", "overrides": { "mode": "ssdp" } })).await;
    assert_eq!(status, StatusCode::CREATED);
    let ssdp = c.summary(v["id"].as_str().unwrap()).await;
    assert_eq!(ssdp.mode, msdp_core::Mode::Ssdp);
    assert_eq!(ssdp.config.mode, msdp_core::Mode::Ssdp);

    assert_eq!(c.get("/sessions/nope").await.0, StatusCode::NOT_FOUND);
    assert_eq!(c.say("nope", "hi").await.0, StatusCode::NOT_FOUND);
    assert_eq!(c.say(&id, " ").await.0, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test(flavor = "multi_thread")]
async fn turns_accumulate_and_traces_round_trip() {
    let env = Env::new("");
    let state = env.state();
    let c = Client::new(state.clone()).await;
    let id = c.session("Pizza").await;
    let r1 = c.reply(&id, "hi there pizza").await;
    assert!(!r1.knowledge.is_empty());
    // the mock copies the generated knowledge into the reply
    assert_eq!(r1.response, r1.knowledge);
    let r2 = c.reply(&id, "what about cheese").await;

    let s = c.summary(&id).await;
    assert_eq!(s.turns_answered, 2);
    assert_eq!(s.trace_ids, [r1.trace_id.clone(), r2.trace_id.clone()]);
    let speakers: Vec<_> = s.history.iter().map(|t| t.speaker).collect();
    assert_eq!(speakers, [Speaker::User, Speaker::System, Speaker::User, Speaker::System]);

    let (status, body) = c.get(&format!("/sessions/{id}/traces/{}", r2.trace_id)).await;
    assert_eq!(status, StatusCode::OK);
    let trace: msdp_core::TurnTrace = serde_json::from_str(&body).unwrap();
    assert_eq!(trace.query.history, ["hi there pizza", r1.response.as_str(), "what about cheese"]);
    assert_eq!(trace.knowledge, r2.knowledge);

    // same bytes as the pipeline writes for the same query
    let mut prepared = Prepared::new(env.config()).unwrap();
    let p = prepared.pipeline(env.config().pipeline_config()).unwrap();
    let direct = p.run_turn(&QueryContext::new("Pizza", trace.query.history.clone()).unwrap()).unwrap();
    assert_eq!(body, serde_json::to_string(&direct).unwrap());

    assert_eq!(c.get(&format!("/sessions/{id}/traces/bogus")).await.0, StatusCode::NOT_FOUND);
    let other = c.session("Tea").await;
    assert_eq!(c.get(&format!("/sessions/{other}/traces/{}", r2.trace_id)).await.0, StatusCode::NOT_FOUND);

    let eid = &trace.knowledge_exemplars[0].id;
    let (status, body) = c.get(&format!("/exemplars/{eid}")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_str::<Value>(&body).unwrap()["id"], json!(eid));
    assert_eq!(c.get("/exemplars/none").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread")]
async fn interleaved_sessions_match_isolated_runs() {
    let env = Env::new("");
    let shared = Client::new(env.state()).await;
    let a = shared.session("Jazz").await;
    let b = shared.session("Chess").await;
    for turn in 0..10 {
        let (ua, ub) = (utterance(0, turn), utterance(1, turn));
        let (ra, rb) = tokio::join!(shared.reply(&a, &ua), shared.reply(&b, &ub));
        assert_ne!(ra.trace_id, rb.trace_id);
    }
    for (k, (id, topic)) in [(a, "Jazz"), (b, "Chess")].into_iter().enumerate() {
        let alone = Client::new(env.state()).await;
        let solo = alone.session(topic).await;
        for turn in 0..10 {
            alone.reply(&solo, &utterance(k, turn)).await;
        }
        assert_eq!(shared.summary(&id).await.history, alone.summary(&solo).await.history);
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn provider_outage_leaves_history_unchanged() {
    let env = Env::new("");
    let mut prepared = Prepared::new(env.config()).unwrap();
    let outage = Arc::new(Outage {
        inner: prepared.lm.clone(),
        down: AtomicBool::new(false),
    });
    prepared.lm = outage.clone();
    let c = Client::new(AppState::new(prepared).unwrap()).await;
    let id = c.session("Tea").await;
    c.reply(&id, "green tea history").await;
    let before = c.summary(&id).await;

    outage.down.store(true, Ordering::SeqCst);
    let (status, v) = c.say(&id, "and black tea").await;
    assert_eq!(status, StatusCode::BAD_GATEWAY, "{v}");
    assert_eq!(v["error"], "provider");
    let during = c.summary(&id).await;
    assert_eq!(during.history, before.history);
    assert_eq!(during.trace_ids, before.trace_ids);
    let (_, health) = c.get("/healthz").await;
    let health: Value = serde_json::from_str(&health).unwrap();
    assert_eq!(health["status"], "degraded");
    assert_eq!(health["providers"]["lm"]["reachable"], false);

    outage.down.store(false, Ordering::SeqCst);
    c.reply(&id, "and black tea").await;
    assert_eq!(c.summary(&id).await.history.len(), 4);
}

#[tokio::test(flavor = "multi_thread")]
async fn concurrent_creates_get_distinct_ids() {
    let env = Env::new("");
    let state = env.state();
    let c = Arc::new(Client::new(state.clone()).await);
    let tasks: Vec<_> = (0..100)
        .map(|i| {
            let c = c.clone();
            tokio::spawn(async move { c.session(&format!("topic {i}")).await })
        })
        .collect();
    let mut ids = std::collections::BTreeSet::new();
    for t in tasks {
        ids.insert(t.await.unwrap());
    }
    assert_eq!(ids.len(), 100);
    assert_eq!(state.store().len().unwrap(), 100);
}

#[tokio::test(flavor = "multi_thread")]
async fn sessions_survive_restart_and_traces_are_capped() {
    let env = Env::new("store = \"state/sessions.redb\"\ntrace_cap = 2");
    let create = |topic: &str| msdp_service::CreateSession {
        topic: topic.into(),
        overrides: Default::default(),
    };
    let id;
    let last;
    {
        let state = env.state();
        id = state.create_session(create("Opera")).await.unwrap().id;
        let first = state.post_message(&id, "famous opera music".into()).await.unwrap().trace_id;
        state.post_message(&id, "which city".into()).await.unwrap();
        last = state.post_message(&id, "how old".into()).await.unwrap().trace_id;
        let s = state.summary(&id).unwrap();
        assert_eq!(s.history.len(), 6);
        assert_eq!(s.trace_ids.len(), 2);
        assert!(!s.trace_ids.contains(&first));
        assert!(matches!(state.trace_json(&id, &first), Err(msdp_service::ApiError::NotFound(_))));
    }
    let state = env.state();
    let s = state.summary(&id).unwrap();
    assert_eq!(s.history.len(), 6);
    assert!(state.trace_json(&id, &last).is_ok());
    state.post_message(&id, "and now".into()).await.unwrap();
    assert_eq!(state.summary(&id).unwrap().history[6].text, "and now");
    drop(state);
    let store = SessionStore::open(&env.root.join("state/sessions.redb")).unwrap();
    assert_eq!(store.len().unwrap(), 1);
}

#[tokio::test(flavor = "multi_thread")]
async fn healthz_and_static_ui() {
    let env = Env::new("ui_dir = \"ui\"");
    fs::create_dir_all(env.root.join("ui")).unwrap();
    fs::write(env.root.join("ui/index.html"), "<p>chat</p>").unwrap();
    let c = Client::new(env.state()).await;
    let (status, body) = c.get("/healthz").await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_str(&body).unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["providers"]["lm"]["reachable"], true);
    assert_eq!(v["providers"]["embedding"]["id"], "mock-bow-32");
    assert_eq!(c.get("/ui/index.html").await, (StatusCode::OK, "<p>chat</p>".to_owned()));
}

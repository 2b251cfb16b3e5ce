//! Sessions and traces in an embedded redb database.

use std::path::Path;

use redb::backends::InMemoryBackend;
use redb::{Database, ReadableTable, ReadableTableMetadata, TableDefinition};

use crate::session::Session;
use crate::ApiError;

const SESSIONS: TableDefinition<&str, &[u8]> = TableDefinition::new("sessions");
/// Keyed by `<session id>/<trace id>`; values are the trace JSON exactly as serialized.
const TRACES: TableDefinition<&str, &str> = TableDefinition::new("traces");

fn store_err(e: impl std::fmt::Display) -> ApiError {
    ApiError::Internal(format!("session store: {e}"))
}

fn trace_key(session: &str, trace: &str) -> String {
    format!("{session}/{trace}")
}

pub struct SessionStore {
    db: Database,
}

impl SessionStore {
    pub fn open(path: &Path) -> Result<Self, ApiError> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(store_err)?;
        }
        Self::init(Database::create(path).map_err(store_err)?)
    }

    pub fn in_memory() -> Result<Self, ApiError> {
        Self::init(Database::builder().create_with_backend(InMemoryBackend::new()).map_err(store_err)?)
    }

    fn init(db: Database) -> Result<Self, ApiError> {
        let w = db.begin_write().map_err(store_err)?;
        w.open_table(SESSIONS).map_err(store_err)?;
        w.open_table(TRACES).map_err(store_err)?;
        w.commit().map_err(store_err)?;
        Ok(SessionStore { db })
    }

    pub fn insert(&self, session: &Session) -> Result<(), ApiError> {
        let bytes = serde_json::to_vec(session).map_err(store_err)?;
        let w = self.db.begin_write().map_err(store_err)?;
        {
            let mut t = w.open_table(SESSIONS).map_err(store_err)?;
            if t.get(session.id.as_str()).map_err(store_err)?.is_some() {
                return Err(ApiError::Internal(format!("session id collision {}", session.id)));
            }
            t.insert(session.id.as_str(), bytes.as_slice()).map_err(store_err)?;
        }
        w.commit().map_err(store_err)
    }

    pub fn get(&self, id: &str) -> Result<Option<Session>, ApiError> {
        let r = self.db.begin_read().map_err(store_err)?;
        let t = r.open_table(SESSIONS).map_err(store_err)?;
        match t.get(id).map_err(store_err)? {
            Some(v) => Ok(Some(serde_json::from_slice(v.value()).map_err(store_err)?)),
            None => Ok(None),
        }
    }

    pub fn trace(&self, session: &str, trace: &str) -> Result<Option<String>, ApiError> {
        let r = self.db.begin_read().map_err(store_err)?;
        let t = r.open_table(TRACES).map_err(store_err)?;
        Ok(t.get(trace_key(session, trace).as_str()).map_err(store_err)?.map(|v| v.value().to_owned()))
    }

    /// Write the updated session, its new trace and the eviction of traces
    /// past the cap in one transaction.
    pub fn commit_turn(&self, session: &Session, trace_id: &str, trace_json: &str, evicted: &[String]) -> Result<(), ApiError> {
        let bytes = serde_json::to_vec(session).map_err(store_err)?;
        let w = self.db.begin_write().map_err(store_err)?;
        {
            let mut traces = w.open_table(TRACES).map_err(store_err)?;
            traces.insert(trace_key(&session.id, trace_id).as_str(), trace_json).map_err(store_err)?;
            for old in evicted {
                traces.remove(trace_key(&session.id, old).as_str()).map_err(store_err)?;
            }
            let mut sessions = w.open_table(SESSIONS).map_err(store_err)?;
            sessions.insert(session.id.as_str(), bytes.as_slice()).map_err(store_err)?;
        }
        w.commit().map_err(store_err)
    }

    pub fn len(&self) -> Result<usize, ApiError> {
        let r = self.db.begin_read().map_err(store_err)?;
        let t = r.open_table(SESSIONS).map_err(store_err)?;
        Ok(t.len().map_err(store_err)? as usize)
    }

    pub fn is_empty(&self) -> Result<bool, ApiError> {
        Ok(self.len()? == 0)
    }
}

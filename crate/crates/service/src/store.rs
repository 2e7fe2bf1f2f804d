use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, Mutex, RwLock};

use latentcrs::conversation::Session;

pub type SessionHandle = Arc<Mutex<Session>>;

/// Where live sessions are kept. Each session sits behind its own mutex so
/// messages to one session are serialised while others proceed.
pub trait SessionStore: Send + Sync {
    fn insert(&self, session: Session) -> SessionHandle;
    fn get(&self, id: &str) -> Option<SessionHandle>;
    /// All sessions, ordered by id.
    fn snapshot(&self) -> Vec<Session>;
}

#[derive(Default)]
pub struct MemoryStore {
    sessions: RwLock<HashMap<String, SessionHandle>>,
}

impl MemoryStore {
    pub fn new() -> Self {
        Self::default()
    }
}

impl SessionStore for MemoryStore {
    fn insert(&self, session: Session) -> SessionHandle {
        let id = session.id.clone();
        let handle = Arc::new(Mutex::new(session));
        self.sessions
            .write()
            .expect("session map poisoned")
            .insert(id, handle.clone());
        handle
    }

    fn get(&self, id: &str) -> Option<SessionHandle> {
        self.sessions.read().expect("session map poisoned").get(id).cloned()
    }

    fn snapshot(&self) -> Vec<Session> {
        let map = self.sessions.read().expect("session map poisoned");
        let mut out: Vec<Session> = map
            .values()
            .map(|h| h.lock().unwrap_or_else(|p| p.into_inner()).clone())
            .collect();
        out.sort_by(|a, b| a.id.cmp(&b.id));
        out
    }
}

/// Writes `store`'s sessions as a JSON array.
pub fn write_snapshot(store: &dyn SessionStore, path: &Path) -> std::io::Result<()> {
    let body = serde_json::to_vec_pretty(&store.snapshot()).map_err(std::io::Error::other)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, body)?;
    std::fs::rename(tmp, path)
}

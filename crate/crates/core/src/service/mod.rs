//! Interactive retrieval sessions and their HTTP front end.

mod http;
mod session;

pub use http::router;
pub use session::{
    replay, Action, Candidate, Engine, ImageInput, Pending, ReplayReport, Session, SessionState,
    Transcript, TranscriptEntry, TurnResponse, UserInput, UPLOAD_ID_BASE,
};

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::Serialize;
use thiserror::Error;

use crate::eval::EvalError;
use crate::sequence::{ChatDialogue, ImageId};

#[derive(Debug, Clone, Error, Serialize)]
#[error("{code}: {message}")]
pub struct ServiceError {
    /// Stable machine-readable code.
    pub code: &'static str,
    pub message: String,
}

impl ServiceError {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn session_not_found(id: &str) -> Self {
        Self::new("session_not_found", format!("no session {id}"))
    }

    pub fn image_not_found(id: ImageId) -> Self {
        Self::new("image_not_found", format!("no image {id}"))
    }

    pub fn candidates_pending() -> Self {
        Self::new("candidates_pending", "select or dismiss the pending candidates first")
    }

    pub fn no_pending() -> Self {
        Self::new("no_pending_candidates", "there are no pending candidates")
    }

    pub fn not_a_candidate(id: ImageId) -> Self {
        Self::new("not_a_candidate", format!("image {id} is not among the pending candidates"))
    }

    pub fn invalid_turn(m: impl Into<String>) -> Self {
        Self::new("invalid_turn", m)
    }

    pub fn bad_request(m: impl Into<String>) -> Self {
        Self::new("bad_request", m)
    }

    pub fn internal(m: impl Into<String>) -> Self {
        Self::new("internal", m)
    }

    /// HTTP status for the code.
    pub fn status(&self) -> u16 {
        match self.code {
            "session_not_found" | "image_not_found" => 404,
            "candidates_pending" | "no_pending_candidates" => 409,
            "not_a_candidate" | "invalid_turn" | "bad_request" => 400,
            _ => 500,
        }
    }
}

impl From<EvalError> for ServiceError {
    fn from(e: EvalError) -> Self {
        Self::internal(e.to_string())
    }
}

/// Read-only view of a session.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionView {
    pub session_id: String,
    pub state: SessionState,
    pub turns: u64,
    pub history: ChatDialogue,
    pub pending: Option<Pending>,
}

impl SessionView {
    fn of(s: &Session) -> Self {
        Self {
            session_id: s.id.clone(),
            state: s.state(),
            turns: s.turns,
            history: s.history.clone(),
            pending: s.pending.clone(),
        }
    }
}

/// All live sessions over one engine. Each session has its own lock, so
/// operations on one session are serialized while others proceed.
pub struct SessionService {
    pub engine: Arc<Engine>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Session>>>>,
    dir: Option<PathBuf>,
}

impl SessionService {
    /// In-memory service.
    pub fn new(engine: Arc<Engine>) -> Self {
        Self {
            engine,
            sessions: Mutex::new(HashMap::new()),
            dir: None,
        }
    }

    /// Service persisting every session as `<dir>/<id>.json`; sessions
    /// already there are loaded.
    pub fn open(engine: Arc<Engine>, dir: &Path) -> Result<Self, ServiceError> {
        let io = |e: std::io::Error| ServiceError::internal(format!("session store: {e}"));
        std::fs::create_dir_all(dir).map_err(io)?;
        let mut map = HashMap::new();
        for entry in std::fs::read_dir(dir).map_err(io)? {
            let path = entry.map_err(io)?.path();
            if path.extension().is_some_and(|e| e == "json") {
                let text = std::fs::read_to_string(&path).map_err(io)?;
                let s: Session = serde_json::from_str(&text)
                    .map_err(|e| ServiceError::internal(format!("{}: {e}", path.display())))?;
                map.insert(s.id.clone(), Arc::new(Mutex::new(s)));
            }
        }
        Ok(Self {
            engine,
            sessions: Mutex::new(map),
            dir: Some(dir.to_path_buf()),
        })
    }

    fn persist(&self, s: &Session) -> Result<(), ServiceError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let json = serde_json::to_vec_pretty(s).map_err(|e| ServiceError::internal(e.to_string()))?;
        let tmp = dir.join(format!("{}.json.tmp", s.id));
        std::fs::write(&tmp, json)
            .and_then(|_| std::fs::rename(&tmp, dir.join(format!("{}.json", s.id))))
            .map_err(|e| ServiceError::internal(format!("session store: {e}")))
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ServiceError> {
        self.sessions
            .lock()
            .expect("session map")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::session_not_found(id))
    }

    fn with<T>(&self, id: &str, f: impl FnOnce(&mut Session) -> Result<T, ServiceError>) -> Result<T, ServiceError> {
        let s = self.session(id)?;
        let mut s = s.lock().expect("session");
        let out = f(&mut s)?;
        self.persist(&s)?;
        Ok(out)
    }

    pub fn create(&self) -> Result<SessionView, ServiceError> {
        let s = Session::new(uuid::Uuid::new_v4().simple().to_string());
        self.persist(&s)?;
        let view = SessionView::of(&s);
        self.sessions
            .lock()
            .expect("session map")
            .insert(s.id.clone(), Arc::new(Mutex::new(s)));
        Ok(view)
    }

    pub fn get(&self, id: &str) -> Result<SessionView, ServiceError> {
        let s = self.session(id)?;
        let s = s.lock().expect("session");
        Ok(SessionView::of(&s))
    }

    pub fn post_turn(&self, id: &str, input: UserInput) -> Result<TurnResponse, ServiceError> {
        self.with(id, |s| s.post_user_turn(&self.engine, input))
    }

    pub fn select(&self, id: &str, image_id: ImageId) -> Result<SessionView, ServiceError> {
        self.with(id, |s| {
            s.select(image_id)?;
            Ok(SessionView::of(s))
        })
    }

    pub fn dismiss(&self, id: &str) -> Result<SessionView, ServiceError> {
        self.with(id, |s| {
            s.dismiss()?;
            Ok(SessionView::of(s))
        })
    }

    pub fn transcript(&self, id: &str) -> Result<Transcript, ServiceError> {
        let s = self.session(id)?;
        let s = s.lock().expect("session");
        Ok(s.transcript(&self.engine))
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut v: Vec<String> = self.sessions.lock().expect("session map").keys().cloned().collect();
        v.sort();
        v
    }
}

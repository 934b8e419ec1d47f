//! HTTP chat sessions over one loaded model.
//!
//! | method | path                      | body                                   |
//! |--------|---------------------------|----------------------------------------|
//! | POST   | `/sessions`               | `{persona_a, persona_b?, decode?}`     |
//! | POST   | `/sessions/{id}/messages` | `{text}`                               |
//! | GET    | `/sessions/{id}`          |                                        |
//! | DELETE | `/sessions/{id}`          |                                        |
//!
//! Errors are `{code, message}` with a 400 or 404 status. With a transcript
//! directory every session is mirrored to an append-only JSON-lines file and
//! rebuilt by replay on startup.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use perchat::data::{Caps, Vocabulary};
use perchat::session::{ChatSession, Reply, SessionSnapshot};
use perchat::training::Checkpoint;
use perchat::{DecodeConfig, Error, Model};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

#[derive(Clone, Debug, Default)]
pub struct ServeConfig {
    pub caps: Caps,
    pub decode: DecodeConfig,
    pub transcript_dir: Option<PathBuf>,
    pub ui_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub persona_a: Vec<String>,
    #[serde(default)]
    pub persona_b: Vec<String>,
    #[serde(default)]
    pub decode: Option<DecodeConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostMessage {
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub id: String,
    #[serde(flatten)]
    pub state: SessionSnapshot,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    pub code: String,
    pub message: String,
    #[serde(skip)]
    pub status: u16,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
            status: status.as_u16(),
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("no session {id}"))
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Contract(m) | Error::Config(m) => Self::new(StatusCode::BAD_REQUEST, "bad_request", m),
            other => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
enum LogEvent {
    Create(CreateSession),
    Message { text: String },
}

struct Entry {
    session: ChatSession,
    log: Option<PathBuf>,
}

pub struct AppState {
    model: Model,
    vocab: Vocabulary,
    config: ServeConfig,
    sessions: RwLock<HashMap<String, Arc<Mutex<Entry>>>>,
}

fn append(path: &Path, event: &LogEvent) -> std::io::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let line = serde_json::to_string(event).map_err(std::io::Error::other)?;
    writeln!(f, "{line}")?;
    f.sync_data()
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
}

impl AppState {
    pub fn new(model: Model, vocab: Vocabulary, config: ServeConfig) -> std::io::Result<Arc<Self>> {
        if let Some(dir) = &config.transcript_dir {
            fs::create_dir_all(dir)?;
        }
        let state = Arc::new(Self {
            model,
            vocab,
            config,
            sessions: RwLock::new(HashMap::new()),
        });
        state.restore()?;
        Ok(state)
    }

    pub fn from_checkpoint(path: impl AsRef<Path>, config: ServeConfig) -> Result<Arc<Self>, Error> {
        let ck = Checkpoint::load(path)?;
        let model = ck.model()?;
        AppState::new(model, ck.vocab, config).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn session_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.sessions.read().expect("session map lock").keys().cloned().collect();
        ids.sort();
        ids
    }

    /// Replays every transcript file in the configured directory.
    fn restore(&self) -> std::io::Result<()> {
        let Some(dir) = &self.config.transcript_dir else {
            return Ok(());
        };
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_none_or(|e| e != "jsonl") {
                continue;
            }
            let Some(id) = path.file_stem().map(|s| s.to_string_lossy().into_owned()) else {
                continue;
            };
            let mut lines = BufReader::new(File::open(&path)?).lines();
            let Some(first) = lines.next().transpose()? else {
                continue;
            };
            let bad = |m: String| std::io::Error::new(std::io::ErrorKind::InvalidData, format!("{}: {m}", path.display()));
            let LogEvent::Create(req) = serde_json::from_str(&first).map_err(|e| bad(e.to_string()))? else {
                return Err(bad("transcript does not start with a create event".into()));
            };
            let mut turns = Vec::new();
            for line in lines {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str(&line).map_err(|e| bad(e.to_string()))? {
                    LogEvent::Message { text } => turns.push(text),
                    LogEvent::Create(_) => return Err(bad("duplicate create event".into())),
                }
            }
            let decode = req.decode.clone().unwrap_or_else(|| self.config.decode.clone());
            let (session, _) = ChatSession::replay(
                &self.model,
                &self.vocab,
                req.persona_a,
                req.persona_b,
                decode,
                self.config.caps,
                &turns,
            )
            .map_err(|e| bad(e.to_string()))?;
            self.sessions.write().expect("session map lock").insert(
                id,
                Arc::new(Mutex::new(Entry {
                    session,
                    log: Some(path),
                })),
            );
        }
        Ok(())
    }

    pub fn create(&self, req: CreateSession) -> Result<SessionView, ApiError> {
        let decode = req.decode.clone().unwrap_or_else(|| self.config.decode.clone());
        let session = ChatSession::new(
            &self.model,
            &self.vocab,
            req.persona_a.clone(),
            req.persona_b.clone(),
            decode,
            self.config.caps,
        )?;
        let id = uuid::Uuid::new_v4().simple().to_string();
        let log = match &self.config.transcript_dir {
            Some(dir) => {
                let path = dir.join(format!("{id}.jsonl"));
                append(&path, &LogEvent::Create(req)).map_err(internal)?;
                Some(path)
            }
            None => None,
        };
        let view = SessionView {
            id: id.clone(),
            state: session.snapshot(),
        };
        self.sessions
            .write()
            .expect("session map lock")
            .insert(id, Arc::new(Mutex::new(Entry { session, log })));
        Ok(view)
    }

    fn entry(&self, id: &str) -> Result<Arc<Mutex<Entry>>, ApiError> {
        self.sessions
            .read()
            .expect("session map lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    /// Requests to one session are serialized by its mutex.
    pub fn post(&self, id: &str, text: &str) -> Result<Reply, ApiError> {
        let entry = self.entry(id)?;
        let mut guard = entry.lock().map_err(internal)?;
        let entry = &mut *guard;
        let reply = entry.session.post_message(&self.model, &self.vocab, text)?;
        if let Some(path) = &entry.log {
            append(path, &LogEvent::Message { text: text.into() }).map_err(internal)?;
        }
        Ok(reply)
    }

    pub fn get(&self, id: &str) -> Result<SessionView, ApiError> {
        let entry = self.entry(id)?;
        let guard = entry.lock().map_err(internal)?;
        Ok(SessionView {
            id: id.into(),
            state: guard.session.snapshot(),
        })
    }

    pub fn delete(&self, id: &str) -> Result<(), ApiError> {
        let entry = self
            .sessions
            .write()
            .expect("session map lock")
            .remove(id)
            .ok_or_else(|| ApiError::not_found(id))?;
        let guard = entry.lock().map_err(internal)?;
        if let Some(path) = &guard.log {
            match fs::remove_file(path) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(internal(e)),
                _ => {}
            }
        }
        Ok(())
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(internal)?
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let view = blocking(move || app.create(req)).await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn post_message(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<PostMessage>,
) -> Result<Json<Reply>, ApiError> {
    blocking(move || app.post(&id, &req.text)).await.map(Json)
}

async fn get_session(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<SessionView>, ApiError> {
    blocking(move || app.get(&id)).await.map(Json)
}

async fn delete_session(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<StatusCode, ApiError> {
    blocking(move || app.delete(&id)).await?;
    Ok(StatusCode::NO_CONTENT)
}

pub fn router(app: Arc<AppState>) -> Router {
    let ui = app.config.ui_dir.clone();
    let mut router = Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/messages", post(post_message))
        .with_state(app);
    if let Some(dir) = ui {
        router = router.nest_service("/ui", ServeDir::new(dir).append_index_html_on_directories(true));
    }
    router
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, app: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

/// [`serve`] on a fresh multi-threaded runtime.
pub fn serve_blocking(addr: SocketAddr, app: Arc<AppState>) -> std::io::Result<()> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?
        .block_on(serve(addr, app))
}

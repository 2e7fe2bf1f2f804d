//! HTTP session service.
//!
//! - `POST /v1/sessions` → 201 `{"session_id","variant"}`
//! - `POST /v1/sessions/{id}/messages` → 200 turn payload
//! - `GET /v1/items/{id}` → item
//! - `GET /healthz` → 503 while the checkpoint loads, then its fingerprint

mod config;
mod store;

use std::future::Future;
use std::path::Path;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use latentcrs::conversation::{
    ConversationError, Engine, RemoteExtractor, RemoteReranker, Session, SystemTurn, Variant,
};
use latentcrs::corpus::{load_items, ItemIdx};
use latentcrs::pipeline::{Bundle, EvalConfig, PipelineError};
use latentcrs::remote::JsonClient;

pub use config::{ConfigError, ServiceConfig};
pub use store::{write_snapshot, MemoryStore, SessionHandle, SessionStore};

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("catalog {0}")]
    Catalog(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// The loaded model: an engine plus the checkpoint fingerprint.
pub struct Ready {
    pub engine: Engine,
    pub fingerprint: String,
}

struct Inner {
    ready: OnceLock<Ready>,
    store: Arc<dyn SessionStore>,
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

impl AppState {
    pub fn new(store: Arc<dyn SessionStore>) -> Self {
        Self {
            inner: Arc::new(Inner {
                ready: OnceLock::new(),
                store,
            }),
        }
    }

    /// Marks the service ready; later calls are ignored.
    pub fn set_ready(&self, ready: Ready) {
        let _ = self.inner.ready.set(ready);
    }

    pub fn ready(&self) -> Option<&Ready> {
        self.inner.ready.get()
    }

    pub fn store(&self) -> &dyn SessionStore {
        self.inner.store.as_ref()
    }
}

/// Loads the checkpoint and builds the engine described by `config`.
pub fn load_ready(config: &ServiceConfig) -> Result<Ready, ServiceError> {
    let (bundle, fingerprint) = Bundle::load(&config.checkpoint)?;
    let embedder = config.embed.build().map_err(PipelineError::from)?;
    let limits = EvalConfig {
        top_k: config.top_k,
        max_turns: config.max_turns,
        ..EvalConfig::default()
    };
    let mut engine = bundle.engine(&embedder, &limits)?;
    if let Some(path) = &config.catalog {
        let catalog = load_items(path, Some(bundle.schema.clone())).map_err(|e| ServiceError::Catalog(e.to_string()))?;
        let same = catalog.len() == bundle.items.len()
            && catalog.items().iter().zip(&bundle.items).all(|(a, b)| a.id == b.id);
        if !same {
            return Err(ServiceError::Catalog(format!(
                "{} does not list the checkpoint's items in order",
                path.display()
            )));
        }
        engine.catalog = Arc::new(catalog);
    }
    let timeout = Duration::from_secs(config.remote_timeout_secs);
    let token = config.embed.token.clone();
    if let Some(ep) = &config.extractor_endpoint {
        engine = engine.with_extractor(Arc::new(RemoteExtractor::new(JsonClient::new(ep.clone(), token.clone(), timeout))));
    }
    if let Some(ep) = &config.reranker_endpoint {
        engine = engine.with_reranker(Arc::new(RemoteReranker::new(JsonClient::new(ep.clone(), token, timeout))));
    }
    Ok(Ready { engine, fingerprint })
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(health))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}/messages", post(post_message))
        .route("/v1/items/{id}", get(get_item))
        .with_state(state)
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn not_ready() -> Response {
    error(StatusCode::SERVICE_UNAVAILABLE, "checkpoint is still loading")
}

async fn health(State(state): State<AppState>) -> Response {
    match state.ready() {
        Some(r) => Json(json!({ "status": "ok", "fingerprint": r.fingerprint })).into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "loading" }))).into_response(),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub variant: String,
    /// Optional behaviour history as item ids, oldest first.
    #[serde(default)]
    pub history: Option<Vec<String>>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub variant: Variant,
}

async fn create_session(State(state): State<AppState>, body: Result<Json<CreateSession>, JsonRejection>) -> Response {
    let Some(ready) = state.ready() else {
        return not_ready();
    };
    let Json(req) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let variant: Variant = match req.variant.parse() {
        Ok(v) => v,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    let behavior = match req.history {
        Some(ids) => {
            let catalog = &ready.engine.catalog;
            let mut seq: Vec<ItemIdx> = Vec::with_capacity(ids.len());
            for id in &ids {
                match catalog.lookup(id) {
                    Some(i) => seq.push(i),
                    None => return error(StatusCode::BAD_REQUEST, format!("unknown item `{id}` in history")),
                }
            }
            Some(seq)
        }
        None => None,
    };
    let id = uuid::Uuid::new_v4().to_string();
    state.store().insert(Session::new(id.clone(), variant, behavior));
    (StatusCode::CREATED, Json(SessionCreated { session_id: id, variant })).into_response()
}

#[derive(Debug, Deserialize)]
pub struct PostMessage {
    pub text: String,
}

async fn post_message(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Result<Json<PostMessage>, JsonRejection>,
) -> Response {
    if state.ready().is_none() {
        return not_ready();
    }
    let Some(handle) = state.store().get(&id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown session `{id}`"));
    };
    let Json(msg) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, e.body_text()),
    };
    let worker = state.clone();
    let result = tokio::task::spawn_blocking(move || -> Result<SystemTurn, ConversationError> {
        let ready = worker.ready().expect("checked above");
        let mut session = handle.lock().unwrap_or_else(|p| p.into_inner());
        ready.engine.respond(&mut session, &msg.text)
    })
    .await;
    match result {
        Ok(Ok(turn)) => Json(turn).into_response(),
        Ok(Err(e @ ConversationError::EmptyMessage)) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        Ok(Err(e @ (ConversationError::Exhausted(_) | ConversationError::Closed))) => {
            error(StatusCode::CONFLICT, e.to_string())
        }
        Ok(Err(e)) => {
            log::error!("session {id}: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
        }
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

async fn get_item(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> Response {
    let Some(ready) = state.ready() else {
        return not_ready();
    };
    let catalog = &ready.engine.catalog;
    match catalog.lookup(&id) {
        Some(i) => Json(catalog.item(i)).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown item `{id}`")),
    }
}

/// Binds, loads the checkpoint in the background, and serves until
/// `shutdown` resolves. In-flight requests are drained and sessions are
/// snapshotted if configured.
pub async fn run(config: ServiceConfig, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServiceError> {
    let listener = tokio::net::TcpListener::bind((config.host.as_str(), config.port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    serve(listener, config, shutdown).await
}

pub async fn serve(
    listener: tokio::net::TcpListener,
    config: ServiceConfig,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> Result<(), ServiceError> {
    let state = AppState::new(Arc::new(MemoryStore::new()));
    let loader = state.clone();
    let load_cfg = config.clone();
    let loading = tokio::task::spawn_blocking(move || match load_ready(&load_cfg) {
        Ok(ready) => {
            log::info!("checkpoint {} ready ({})", load_cfg.checkpoint.display(), ready.fingerprint);
            loader.set_ready(ready);
            Ok(())
        }
        Err(e) => Err(e),
    });
    let (abort_tx, abort_rx) = tokio::sync::oneshot::channel::<ServiceError>();
    tokio::spawn(async move {
        match loading.await {
            Ok(Err(e)) => {
                log::error!("failed to load checkpoint: {e}");
                let _ = abort_tx.send(e);
            }
            Err(e) => {
                let _ = abort_tx.send(ServiceError::Io(std::io::Error::other(e.to_string())));
            }
            Ok(Ok(())) => {}
        }
    });
    let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<Option<ServiceError>>();
    tokio::spawn(async move {
        tokio::select! {
            _ = shutdown => { let _ = stop_tx.send(None); }
            Ok(e) = abort_rx => { let _ = stop_tx.send(Some(e)); }
        }
    });
    let failure = Arc::new(std::sync::Mutex::new(None));
    let failure_slot = failure.clone();
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(async move {
            if let Ok(Some(e)) = stop_rx.await {
                *failure_slot.lock().expect("failure slot") = Some(e);
            }
        })
        .await?;
    if let Some(path) = &config.snapshot {
        write_snapshot(state.store(), Path::new(path))?;
        log::info!("wrote session snapshot to {}", path.display());
    }
    let failed = failure.lock().expect("failure slot").take();
    match failed {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

//! Read-only HTTP facade over trained checkpoints and a prepared dataset.
//!
//! Every response carries the manifest hash, both as the `x-manifest-hash`
//! header and, for JSON bodies, as a `manifest_hash` field.

mod api;
mod session;

use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Duration;

use axum::extract::State;
use axum::http::{HeaderName, HeaderValue, StatusCode};
use axum::response::{Html, Response};
use axum::routing::{get, post};
use axum::Router;
use tower_http::services::ServeDir;

pub use api::{top_month, ApiError, FRAME_LIMIT};
pub use session::{
    parse_ckpt_flag, AttributionKey, LoadError, ServiceConfig, ServiceManifest, Session,
};

pub const MANIFEST_HEADER: &str = "x-manifest-hash";

const INDEX_HTML: &str = include_str!("index.html");

enum Phase {
    Loading,
    Ready(Arc<Session>),
    Failed(String),
}

/// Shared handle: the manifest hash is known immediately, the session once loading ends.
#[derive(Clone)]
pub struct AppState {
    hash: Arc<str>,
    phase: Arc<RwLock<Phase>>,
    budget: Duration,
}

impl AppState {
    pub fn loading(manifest_hash: String, budget: Duration) -> Self {
        AppState {
            hash: manifest_hash.into(),
            phase: Arc::new(RwLock::new(Phase::Loading)),
            budget,
        }
    }

    pub fn ready(session: Session, budget: Duration) -> Self {
        let s = AppState::loading(session.manifest_hash.clone(), budget);
        s.finish(Ok(session));
        s
    }

    /// Load synchronously; used by tests and embedders.
    pub fn load(config: &ServiceConfig) -> Result<Self, LoadError> {
        let hash = ServiceManifest::of(config)?.hash();
        Ok(AppState::ready(Session::load(config, hash)?, config.budget))
    }

    pub fn finish(&self, result: Result<Session, LoadError>) {
        *self.phase.write().expect("phase lock") = match result {
            Ok(s) => Phase::Ready(Arc::new(s)),
            Err(e) => Phase::Failed(e.to_string()),
        };
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn budget(&self) -> Duration {
        self.budget
    }

    pub fn session(&self) -> Result<Arc<Session>, ApiError> {
        match &*self.phase.read().expect("phase lock") {
            Phase::Ready(s) => Ok(Arc::clone(s)),
            Phase::Loading => Err(ApiError {
                status: StatusCode::SERVICE_UNAVAILABLE,
                message: "checkpoints and dataset are still loading".into(),
                hint: Some("retry shortly".into()),
            }),
            Phase::Failed(m) => Err(ApiError {
                status: StatusCode::INTERNAL_SERVER_ERROR,
                message: format!("startup load failed: {m}"),
                hint: None,
            }),
        }
    }
}

async fn stamp(State(app): State<AppState>, mut res: Response) -> Response {
    if let Ok(v) = HeaderValue::from_str(app.hash()) {
        res.headers_mut()
            .insert(HeaderName::from_static(MANIFEST_HEADER), v);
    }
    res
}

async fn index() -> Html<&'static str> {
    Html(INDEX_HTML)
}

/// All endpoints; `ui` is a built bundle directory served at `/`.
pub fn router(state: AppState, ui: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/meta", get(api::meta))
        .route("/api/field", get(api::field))
        .route("/api/attribution", post(api::attribution))
        .route("/api/aggregate", get(api::aggregate))
        .route("/api/ablation", post(api::ablation))
        .route("/api/{*rest}", get(api::not_found).post(api::not_found));
    let app = match ui {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.route("/", get(index)),
    };
    app.layer(axum::middleware::map_response_with_state(
        state.clone(),
        stamp,
    ))
    .with_state(state)
}

#[derive(Debug)]
pub enum ServeError {
    Load(LoadError),
    Io(std::io::Error),
}

impl std::fmt::Display for ServeError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ServeError::Load(e) => e.fmt(f),
            ServeError::Io(e) => e.fmt(f),
        }
    }
}

impl std::error::Error for ServeError {}

/// Bind and serve until the process ends. Requests arriving before the
/// checkpoints are loaded get 503.
pub async fn serve(config: ServiceConfig) -> Result<(), ServeError> {
    let hash = ServiceManifest::of(&config)
        .map_err(ServeError::Load)?
        .hash();
    let state = AppState::loading(hash.clone(), config.budget);
    let loader = state.clone();
    let cfg = config.clone();
    tokio::task::spawn_blocking(move || loader.finish(Session::load(&cfg, hash)));
    let listener = tokio::net::TcpListener::bind((config.host.as_str(), config.port))
        .await
        .map_err(ServeError::Io)?;
    axum::serve(listener, router(state, config.ui.clone()))
        .await
        .map_err(ServeError::Io)
}

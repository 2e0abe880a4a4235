//! HTTP/JSON session service for the browser client.
//!
//! Sessions live in memory. Each one sits behind its own async mutex; an
//! answer that finds the mutex held gets 409 instead of queueing, so a double
//! submit can never record two answers. MCMC runs on the blocking pool.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use relquery_core::session::{QueryPair, QueryRecord, SessionError, SessionStatus};
use relquery_core::synthworld::{Choice, Image};
use relquery_core::{Localizer, ModelKey, Pool, ResponseKind, SessionConfig, SessionState, Standardizer, Vae};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{Mutex, RwLock};
use tower_http::cors::CorsLayer;

use crate::config::Config;

/// A loaded checkpoint with its encoded query pool.
pub struct ModelEntry {
    pub vae: Vae<f32>,
    pub pool: Pool,
    pub standardizer: Standardizer,
}

impl ModelEntry {
    pub fn localizer(&self) -> Localizer<'_, f32> {
        Localizer::new(&self.vae, &self.pool, &self.standardizer)
    }
}

struct Session {
    model_id: String,
    response_model: ResponseKind,
    model: Arc<ModelEntry>,
    state: SessionState,
}

pub struct AppState {
    config: Config,
    models: HashMap<String, Arc<ModelEntry>>,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
    counter: AtomicU64,
}

impl AppState {
    pub fn new(config: Config, models: HashMap<String, Arc<ModelEntry>>) -> Self {
        AppState { config, models, sessions: RwLock::new(HashMap::new()), counter: AtomicU64::new(0) }
    }

    pub fn model_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.models.keys().cloned().collect();
        ids.sort();
        ids
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/models", get(list_models))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/answer", post(answer))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

/// Model id used by the service for a grid checkpoint.
pub fn model_id(key: ModelKey) -> String {
    key.id()
}

#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError(StatusCode::BAD_REQUEST, r.body_text())
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
}

/// 28 rows of 28 intensities in [0, 1].
pub fn image_rows(img: &Image) -> Vec<Vec<f64>> {
    img.rows().map(|r| r.to_vec()).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct QueryView {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    /// 1-based query number.
    pub index: usize,
    pub a_id: u32,
    pub b_id: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PosteriorView {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    pub model_id: String,
    pub response_model: ResponseKind,
    pub budget: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct CreateResponse {
    pub session_id: String,
    pub query: QueryView,
    pub budget: usize,
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
pub struct AnswerRequest {
    pub choice: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct AnswerResponse {
    pub next_query: Option<QueryView>,
    pub estimate: Vec<Vec<f64>>,
    pub posterior: PosteriorView,
    /// Number of answered queries, including this one.
    pub query_index: usize,
}

/// Read-only session snapshot; also the exported run record of the browser client.
#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SessionView {
    pub session_id: String,
    pub model_id: String,
    pub response_model: ResponseKind,
    pub status: SessionStatus,
    pub budget: usize,
    pub seed: u64,
    pub config: SessionConfig,
    pub answered: usize,
    pub pending: Option<QueryView>,
    pub records: Vec<QueryRecord>,
    pub posterior: PosteriorView,
    pub estimate: Vec<Vec<f64>>,
    /// Present once the budget is spent.
    pub final_estimate: Option<Vec<Vec<f64>>>,
    pub nearest_neighbor: Option<u32>,
}

fn query_view(model: &ModelEntry, pair: QueryPair) -> Result<QueryView, ApiError> {
    let a = model.pool.get(pair.a).map_err(internal)?;
    let b = model.pool.get(pair.b).map_err(internal)?;
    Ok(QueryView { a: image_rows(&a.image), b: image_rows(&b.image), index: pair.index, a_id: pair.a, b_id: pair.b })
}

fn posterior_view(model: &ModelEntry, state: &SessionState) -> PosteriorView {
    let dim = model.vae.split.r_dim;
    PosteriorView { mean: state.posterior_mean(dim), std: state.posterior_std(dim) }
}

fn snapshot(id: &str, s: &Session) -> Result<SessionView, ApiError> {
    let loc = s.model.localizer();
    let estimate = image_rows(&loc.estimate(&s.state).map_err(internal)?);
    let finished = s.state.status == SessionStatus::Finished;
    let trajectory = if finished { Some(loc.trajectory(&s.state).map_err(internal)?) } else { None };
    Ok(SessionView {
        session_id: id.to_string(),
        model_id: s.model_id.clone(),
        response_model: s.response_model,
        status: s.state.status,
        budget: s.state.config.budget,
        seed: s.state.config.seed,
        config: s.state.config,
        answered: s.state.answered(),
        pending: s.state.pending.map(|p| query_view(&s.model, p)).transpose()?,
        records: s.state.records.clone(),
        posterior: posterior_view(&s.model, &s.state),
        estimate,
        final_estimate: trajectory.as_ref().map(|t| image_rows(&t.final_image)),
        nearest_neighbor: trajectory.map(|t| t.nearest_neighbor),
    })
}

async fn list_models(State(app): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "models": app.model_ids() }))
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: Result<Json<CreateRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<CreateResponse>), ApiError> {
    let Json(req) = body?;
    let model = app
        .models
        .get(&req.model_id)
        .cloned()
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown model `{}`", req.model_id)))?;
    let budget = req.budget.unwrap_or(app.config.interactive.budget);
    if budget == 0 {
        return Err(ApiError(StatusCode::BAD_REQUEST, "budget must be at least 1".into()));
    }
    let n = app.counter.fetch_add(1, Ordering::Relaxed) + 1;
    let seed = req.seed.unwrap_or_else(|| app.config.service_session_seed(n));
    let config = SessionConfig { response: app.config.response(req.response_model), mcmc: app.config.interactive.mcmc, budget, seed };
    let state = model.localizer().start(config, None).map_err(|e| match e {
        SessionError::ZeroBudget => ApiError(StatusCode::BAD_REQUEST, e.to_string()),
        other => internal(other),
    })?;
    let query = query_view(&model, state.pending.expect("fresh session has a pending pair"))?;
    let session_id = format!("s{n}");
    let session = Session { model_id: req.model_id, response_model: req.response_model, model, state };
    app.sessions.write().await.insert(session_id.clone(), Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(CreateResponse { session_id, query, budget, seed })))
}

async fn find(app: &AppState, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
    app.sessions
        .read()
        .await
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("unknown session `{id}`")))
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let session = find(&app, &id).await?;
    let guard = session.lock_owned().await;
    let view = tokio::task::spawn_blocking(move || snapshot(&id, &guard)).await.map_err(internal)??;
    Ok(Json(view))
}

async fn answer(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<AnswerRequest>, JsonRejection>,
) -> Result<Json<AnswerResponse>, ApiError> {
    let session = find(&app, &id).await?;
    let Json(req) = body?;
    let choice = match req.choice.as_str() {
        "a" => Choice::A,
        "b" => Choice::B,
        other => return Err(ApiError(StatusCode::BAD_REQUEST, format!("choice must be \"a\" or \"b\", got {other:?}"))),
    };
    let mut guard = session
        .try_lock_owned()
        .map_err(|_| ApiError(StatusCode::CONFLICT, "another answer for this session is in progress".into()))?;
    if guard.state.status == SessionStatus::Finished {
        return Err(ApiError(StatusCode::CONFLICT, "session is finished".into()));
    }
    tokio::task::spawn_blocking(move || {
        let s = &mut *guard;
        let loc = s.model.localizer();
        let record = loc.answer(&mut s.state, choice).map_err(|e| match e {
            SessionError::Finished => ApiError(StatusCode::CONFLICT, e.to_string()),
            other => internal(other),
        })?;
        let estimate = image_rows(&loc.decode(&s.state, &record.posterior_mean).map_err(internal)?);
        Ok(AnswerResponse {
            next_query: s.state.pending.map(|p| query_view(&s.model, p)).transpose()?,
            estimate,
            posterior: PosteriorView { mean: record.posterior_mean, std: record.posterior_std },
            query_index: record.index,
        })
    })
    .await
    .map_err(internal)?
    .map(Json)
}

/// Binds `port` on all interfaces and serves until ctrl-c.
pub async fn serve(state: Arc<AppState>, port: u16) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

//! HTTP API that lets a person or a script teach the online learner one
//! interaction at a time.
//!
//! ```text
//! POST   /sessions                 config overrides -> {id, config}
//! POST   /sessions/{id}/predict    {utt, start} -> {predicted, model, t}
//! POST   /sessions/{id}/feedback   {target} -> {correct, online_accuracy, t}
//! GET    /sessions/{id}            summary
//! DELETE /sessions/{id}
//! ```
//!
//! States are always the 23-token arrays. Each session alternates strictly
//! between predict and feedback; requests to one session are serialized,
//! different sessions run concurrently.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use shrdlurn::blockworld::{deserialize_state, Utterance, WorldState};
use shrdlurn::datagen::ExampleTriple;
use shrdlurn::online::AdaptConfig;
use shrdlurn::{AdaptSession, Model};
use tower_http::cors::{AllowOrigin, CorsLayer};

pub const DEFAULT_IDLE: Duration = Duration::from_secs(3600);

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub default_config: AdaptConfig,
    pub idle_timeout: Duration,
    /// Allowed browser origin; any origin when `None`.
    pub cors_origin: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            default_config: AdaptConfig::default(),
            idle_timeout: DEFAULT_IDLE,
            cors_origin: None,
        }
    }
}

#[derive(Debug, Clone)]
struct Pending {
    utterance: Utterance,
    start: WorldState,
    predicted: Vec<String>,
}

pub struct LiveSession {
    pub id: String,
    pub session: AdaptSession,
    pub created: Instant,
    pending: Option<Pending>,
}

type Shared = Arc<tokio::sync::Mutex<LiveSession>>;

/// Server state: the immutable base model and the live sessions.
#[derive(Clone)]
pub struct AppState {
    inner: Arc<Inner>,
}

struct Inner {
    base: Model,
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, (Shared, Instant)>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(base: Model, config: ServiceConfig) -> Self {
        AppState {
            inner: Arc::new(Inner {
                base,
                config,
                sessions: Mutex::new(HashMap::new()),
                next_id: AtomicU64::new(1),
            }),
        }
    }

    pub fn session_count(&self) -> usize {
        self.inner.sessions.lock().unwrap().len()
    }

    /// Drops sessions idle for longer than the timeout; returns how many.
    pub fn expire_idle(&self) -> usize {
        let idle = self.inner.config.idle_timeout;
        let mut map = self.inner.sessions.lock().unwrap();
        let before = map.len();
        map.retain(|_, (_, last)| last.elapsed() <= idle);
        before - map.len()
    }

    fn lookup(&self, id: &str) -> Result<Shared, ApiError> {
        let idle = self.inner.config.idle_timeout;
        let mut map = self.inner.sessions.lock().unwrap();
        match map.get_mut(id) {
            Some((_, last)) if last.elapsed() > idle => {
                map.remove(id);
                Err(ApiError::not_found(id))
            }
            Some((s, last)) => {
                *last = Instant::now();
                Ok(s.clone())
            }
            None => Err(ApiError::not_found(id)),
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no session '{id}'"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, r.body_text())
    }
}

/// Overlays a JSON object of overrides on `base`.
pub fn merge_config(base: &AdaptConfig, overrides: &Value) -> Result<AdaptConfig, String> {
    let mut merged = serde_json::to_value(base).map_err(|e| e.to_string())?;
    match overrides {
        Value::Null => {}
        Value::Object(o) => {
            let target = merged.as_object_mut().expect("config serializes to an object");
            for (k, v) in o {
                if !target.contains_key(k) {
                    return Err(format!("unknown config field '{k}'"));
                }
                target.insert(k.clone(), v.clone());
            }
        }
        _ => return Err("config overrides must be a JSON object".into()),
    }
    let config: AdaptConfig = serde_json::from_value(merged).map_err(|e| e.to_string())?;
    config.validate().map_err(|e| e.to_string())?;
    Ok(config)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
    pub config: AdaptConfig,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictRequest {
    pub utt: Vec<String>,
    pub start: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PredictResponse {
    pub predicted: Vec<String>,
    pub model: usize,
    pub t: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub target: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub correct: bool,
    pub online_accuracy: f64,
    pub t: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionSummary {
    pub id: String,
    pub t: usize,
    pub online_accuracy: f64,
    /// Running online accuracy after each interaction.
    pub trace: Vec<f64>,
    pub correct: Vec<bool>,
    pub config: AdaptConfig,
    /// Selection loss of each copy over its current selection data.
    pub losses: Vec<f64>,
    pub buffer_len: usize,
    pub pending: bool,
    pub quarantined: Vec<usize>,
    pub age_secs: f64,
}

fn bad_state(e: shrdlurn::Error) -> ApiError {
    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
}

async fn create(
    State(app): State<AppState>,
    body: Option<Json<Value>>,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    let overrides = body.map(|Json(v)| v).unwrap_or(Value::Null);
    let config = merge_config(&app.inner.config.default_config, &overrides)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e))?;
    let base = app.clone();
    let session = tokio::task::spawn_blocking(move || AdaptSession::new(&base.inner.base, config))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, e.to_string()))?;
    let id = format!("s{}", app.inner.next_id.fetch_add(1, Ordering::Relaxed));
    let now = Instant::now();
    let live = LiveSession {
        id: id.clone(),
        session,
        created: now,
        pending: None,
    };
    app.inner
        .sessions
        .lock()
        .unwrap()
        .insert(id.clone(), (Arc::new(tokio::sync::Mutex::new(live)), now));
    log::info!("created session {id}");
    Ok((StatusCode::CREATED, Json(Created { id, config })))
}

async fn predict(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<PredictRequest>, JsonRejection>,
) -> Result<Json<PredictResponse>, ApiError> {
    let Json(req) = body?;
    let shared = app.lookup(&id)?;
    let start = deserialize_state(&req.start).map_err(bad_state)?;
    if req.utt.is_empty() {
        return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "empty utterance"));
    }
    let mut live = shared.lock_owned().await;
    if live.pending.is_some() {
        return Err(ApiError::new(StatusCode::CONFLICT, "a prediction is awaiting feedback"));
    }
    let utterance = Utterance::new(req.utt);
    let (live, result) = tokio::task::spawn_blocking(move || {
        let r = live
            .session
            .predict(&utterance, &start)
            .map(|(m, tokens)| (utterance, start, m, tokens));
        (live, r)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let mut live = live;
    let (utterance, start, model, tokens) = result.map_err(bad_state)?;
    let predicted = shrdlurn::neural::state_tokens(&tokens);
    live.pending = Some(Pending {
        utterance,
        start,
        predicted: predicted.clone(),
    });
    Ok(Json(PredictResponse {
        predicted,
        model,
        t: live.session.log().len(),
    }))
}

async fn feedback(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<FeedbackRequest>, JsonRejection>,
) -> Result<Json<FeedbackResponse>, ApiError> {
    let Json(req) = body?;
    let shared = app.lookup(&id)?;
    let target = deserialize_state(&req.target).map_err(bad_state)?;
    let mut live = shared.lock_owned().await;
    let Some(pending) = live.pending.take() else {
        return Err(ApiError::new(StatusCode::CONFLICT, "no prediction awaits feedback"));
    };
    let example = ExampleTriple {
        utterance: pending.utterance.clone(),
        start: pending.start.clone(),
        target,
    };
    // Training runs before the response so the next prediction sees it.
    let (mut live, result) = tokio::task::spawn_blocking(move || {
        let r = live.session.interact(&example);
        (live, r)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let record = match result {
        Ok(r) => r,
        Err(e) => {
            live.pending = Some(pending);
            return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()));
        }
    };
    debug_assert_eq!(record.predicted, pending.predicted);
    Ok(Json(FeedbackResponse {
        correct: record.correct,
        online_accuracy: live.session.online_accuracy(),
        t: live.session.log().len(),
    }))
}

async fn summary(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionSummary>, ApiError> {
    let shared = app.lookup(&id)?;
    let live = shared.lock_owned().await;
    let (live, losses) = tokio::task::spawn_blocking(move || {
        let l = live.session.selection_losses();
        (live, l)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let correct: Vec<bool> = live.session.log().iter().map(|r| r.correct).collect();
    let mut hits = 0usize;
    let trace = correct
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            hits += c as usize;
            hits as f64 / (i + 1) as f64
        })
        .collect();
    Ok(Json(SessionSummary {
        id: live.id.clone(),
        t: correct.len(),
        online_accuracy: live.session.online_accuracy(),
        trace,
        correct,
        config: *live.session.config(),
        losses,
        buffer_len: live.session.buffer().len(),
        pending: live.pending.is_some(),
        quarantined: live.session.quarantined(),
        age_secs: live.created.elapsed().as_secs_f64(),
    }))
}

async fn remove(State(app): State<AppState>, Path(id): Path<String>) -> Result<StatusCode, ApiError> {
    match app.inner.sessions.lock().unwrap().remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(&id)),
    }
}

pub fn router(state: AppState) -> Router {
    let origin = match &state.inner.config.cors_origin {
        Some(o) => match HeaderValue::from_str(o) {
            Ok(v) => AllowOrigin::exact(v),
            Err(_) => {
                log::warn!("ignoring invalid CORS origin '{o}'");
                AllowOrigin::any()
            }
        },
        None => AllowOrigin::any(),
    };
    let cors = CorsLayer::new()
        .allow_origin(origin)
        .allow_methods(tower_http::cors::Any)
        .allow_headers(tower_http::cors::Any);
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(summary).delete(remove))
        .route("/sessions/{id}/predict", post(predict))
        .route("/sessions/{id}/feedback", post(feedback))
        .layer(cors)
        .with_state(state)
}

/// Serves until the listener fails, sweeping idle sessions in the background.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    let sweeper = state.clone();
    let every = sweeper
        .inner
        .config
        .idle_timeout
        .clamp(Duration::from_secs(1), Duration::from_secs(60));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        loop {
            tick.tick().await;
            let n = sweeper.expire_idle();
            if n > 0 {
                log::info!("expired {n} idle sessions");
            }
        }
    });
    axum::serve(listener, router(state)).await
}

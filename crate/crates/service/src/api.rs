//! HTTP routes and the event WebSocket.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use difflab_core::store::pretrained_registry;
use serde::de::DeserializeOwned;
use tokio::sync::mpsc;
use tower_http::services::ServeDir;

use crate::session::{Registry, SessionError, TrajKey};
use crate::wire::{
    density_payload, model_space_trajectories, trajectory_payload, DatasetRequest, DensityQuery, ErrorBody,
    PretrainedEntry, PretrainedRequest, SampleRequest, SamplerChoice, TrainRequest,
};

pub type AppState = Arc<Registry>;

/// An error response: a status code and `{"error": message}`.
#[derive(Debug)]
pub struct ApiError(StatusCode, String);

impl ApiError {
    fn invalid(msg: impl Into<String>) -> Self {
        ApiError(StatusCode::UNPROCESSABLE_ENTITY, msg.into())
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match e {
            SessionError::NotFound(_) => StatusCode::NOT_FOUND,
            SessionError::Conflict(_) => StatusCode::CONFLICT,
            SessionError::Invalid(_) => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(status, e.to_string())
    }
}

impl From<difflab_core::Error> for ApiError {
    fn from(e: difflab_core::Error) -> Self {
        SessionError::from(e).into()
    }
}

impl From<tokio::task::JoinError> for ApiError {
    fn from(e: tokio::task::JoinError) -> Self {
        ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1 })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Parses a JSON body. An empty body means "all defaults" when `T` allows it.
fn parse_body<T: DeserializeOwned>(bytes: &Bytes) -> ApiResult<T> {
    let text: &[u8] = if bytes.iter().all(u8::is_ascii_whitespace) {
        b"{}"
    } else {
        bytes
    };
    serde_json::from_slice(text).map_err(|e| ApiError::invalid(format!("invalid request body: {e}")))
}

fn json_bytes(bytes: Arc<Vec<u8>>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], bytes.as_ref().clone()).into_response()
}

pub fn router(state: AppState) -> Router {
    let static_dir = state.config.static_dir.clone();
    let api = Router::new()
        .route("/healthz", get(healthz))
        .route("/pretrained", get(list_pretrained))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/dataset", put(set_dataset))
        .route("/sessions/{id}/train", post(start_training))
        .route("/sessions/{id}/train/cancel", post(cancel_training))
        .route("/sessions/{id}/model/pretrained", post(load_pretrained))
        .route("/sessions/{id}/sample", post(sample))
        .route("/sessions/{id}/density", get(density))
        .route("/sessions/{id}/events", get(events))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(|| async { ApiError(StatusCode::NOT_FOUND, "not found".into()) }),
    }
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn list_pretrained() -> ApiResult<Json<Vec<PretrainedEntry>>> {
    let entries = pretrained_registry()
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .into_iter()
        .map(|(name, file)| PretrainedEntry {
            name,
            objective: file.objective,
            dataset: file.dataset,
        })
        .collect();
    Ok(Json(entries))
}

async fn create_session(State(app): State<AppState>) -> impl IntoResponse {
    (StatusCode::CREATED, Json(app.create()))
}

async fn get_session(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(app.with(&id, |s| Ok(s.view()))?))
}

async fn set_dataset(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    app.get(&id)?;
    let req: DatasetRequest = parse_body(&body)?;
    let view = tokio::task::spawn_blocking(move || app.set_dataset(&id, req)).await??;
    Ok(Json(view))
}

async fn start_training(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    app.get(&id)?;
    let req: TrainRequest = parse_body(&body)?;
    let view = app.start_training(&id, req.objective, &req.overrides)?;
    Ok((StatusCode::ACCEPTED, Json(view)))
}

async fn cancel_training(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok((StatusCode::ACCEPTED, Json(app.cancel_training(&id)?)))
}

async fn load_pretrained(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<impl IntoResponse> {
    app.get(&id)?;
    let req: PretrainedRequest = parse_body(&body)?;
    let view = tokio::task::spawn_blocking(move || app.load_pretrained(&id, &req.name)).await??;
    Ok(Json(view))
}

fn check_n(app: &Registry, n: usize) -> ApiResult<usize> {
    if n == 0 || n > app.config.max_points {
        return Err(ApiError::invalid(format!(
            "n must lie in 1..={}",
            app.config.max_points
        )));
    }
    Ok(n)
}

fn check_steps(app: &Registry, choice: SamplerChoice) -> ApiResult<SamplerChoice> {
    if choice.steps == 0 || choice.steps > app.config.max_steps {
        return Err(ApiError::invalid(format!(
            "steps must lie in 1..={}",
            app.config.max_steps
        )));
    }
    Ok(choice)
}

async fn sample(State(app): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    let (model, _) = app.with(&id, |s| s.model_snapshot())?;
    let req: SampleRequest = parse_body(&body)?;
    let choice = check_steps(&app, SamplerChoice::resolve(&model, req.kind, req.steps)?)?;
    let n = check_n(&app, req.n.unwrap_or(app.config.default_sample_n))?;
    let seed = req.seed.unwrap_or(app.config.default_seed);
    let payload = tokio::task::spawn_blocking(move || trajectory_payload(&model, choice, n, seed)).await??;
    Ok(Json(payload))
}

async fn density(
    State(app): State<AppState>,
    Path(id): Path<String>,
    query: Result<Query<DensityQuery>, QueryRejection>,
) -> ApiResult<Response> {
    let (model, generation) = app.with(&id, |s| s.model_snapshot())?;
    let Query(q) = query.map_err(|e| ApiError::invalid(e.body_text()))?;
    let t = q.t.ok_or_else(|| ApiError::invalid("missing query parameter `t`"))?;
    if !(0.0..=1.0).contains(&t) {
        return Err(ApiError::invalid(format!("t must lie in [0, 1], got {t}")));
    }
    let choice = check_steps(&app, SamplerChoice::resolve(&model, q.sampler, q.steps)?)?;
    let n = check_n(&app, q.n.unwrap_or(app.config.default_density_n))?;
    let seed = q.seed.unwrap_or(app.config.default_seed);
    let key = TrajKey {
        generation,
        choice: (choice.kind, choice.steps),
        n,
        seed,
    };
    let frame_key = (key, t.to_bits());
    if let Some(bytes) = app.with(&id, |s| Ok(s.cached_density(&frame_key)))? {
        return Ok(json_bytes(bytes));
    }
    let cached = app.with(&id, |s| Ok(s.cached_trajectories(&key)))?;
    let worker_app = app.clone();
    let worker_id = id.clone();
    let bytes = tokio::task::spawn_blocking(move || -> ApiResult<Arc<Vec<u8>>> {
        let trajs = match cached {
            Some(t) => t,
            None => {
                let fresh = Arc::new(model_space_trajectories(&model, choice, n, seed)?);
                worker_app.with(&worker_id, |s| {
                    s.store_trajectories(key, fresh.clone());
                    Ok(())
                })?;
                fresh
            }
        };
        let payload = density_payload(&model, choice, &trajs, t, seed)?;
        Ok(Arc::new(serde_json::to_vec(&payload).expect("payload serializes")))
    })
    .await??;
    app.with(&id, |s| {
        s.store_density(frame_key, bytes.clone());
        Ok(())
    })?;
    Ok(json_bytes(bytes))
}

async fn events(State(app): State<AppState>, Path(id): Path<String>, ws: WebSocketUpgrade) -> ApiResult<Response> {
    let (backlog, rx) = app.with(&id, |s| Ok(s.subscribe()))?;
    Ok(ws.on_upgrade(move |socket| forward_events(socket, backlog, rx)))
}

/// Replays the current run's events, then streams new ones until either side
/// closes.
async fn forward_events(mut socket: WebSocket, backlog: Vec<Arc<str>>, mut rx: mpsc::UnboundedReceiver<Arc<str>>) {
    for text in backlog {
        if socket.send(Message::Text(text.as_ref().into())).await.is_err() {
            return;
        }
    }
    loop {
        tokio::select! {
            event = rx.recv() => {
                let Some(text) = event else { break };
                if socket.send(Message::Text(text.as_ref().into())).await.is_err() {
                    return;
                }
            }
            incoming = socket.recv() => {
                match incoming {
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                    Some(Ok(_)) => {}
                }
            }
        }
    }
    let _ = socket.send(Message::Close(None)).await;
}

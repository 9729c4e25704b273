//! JSON API over a shared [`Service`].
//!
//! Reads take the service read lock and run concurrently; shift-action
//! writes take the write lock, which also serializes them against ticks.

use std::collections::HashMap;
use std::future::Future;
use std::sync::{Arc, RwLock};

use axum::extract::{Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chrono::NaiveDateTime;
use edf_core::forecaster::TargetSpec;
use edf_core::service::{Service, ShiftActionInput};
use edf_core::timefmt;
use serde_json::json;

/// Default look-back for `/health` when `window_days` is absent.
pub const DEFAULT_HEALTH_DAYS: i64 = 7;

#[derive(Clone)]
pub struct AppState {
    pub service: Arc<RwLock<Service>>,
    /// When set, every request needs `Authorization: Bearer <token>`.
    pub token: Option<String>,
}

impl AppState {
    pub fn new(service: Arc<RwLock<Service>>, token: Option<String>) -> Self {
        Self {
            service,
            token: token.filter(|t| !t.is_empty()),
        }
    }
}

/// Error body `{"error": "..."}` with a status.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
        }
    }
}

impl From<edf_core::Error> for ApiError {
    fn from(e: edf_core::Error) -> Self {
        use edf_core::Error as E;
        let status = match &e {
            E::Domain(_) | E::Validation(_) => StatusCode::BAD_REQUEST,
            E::InsufficientHistory(_) | E::DataGap(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;
type Params = Query<HashMap<String, String>>;

fn timestamp(params: &HashMap<String, String>, key: &str) -> Result<Option<NaiveDateTime>, ApiError> {
    params
        .get(key)
        .map(|raw| {
            timefmt::parse(raw)
                .ok_or_else(|| ApiError::bad_request(format!("{key}={raw:?} is not YYYY-MM-DDTHH:MM")))
        })
        .transpose()
}

fn required(params: &HashMap<String, String>, key: &str) -> Result<NaiveDateTime, ApiError> {
    timestamp(params, key)?.ok_or_else(|| ApiError::bad_request(format!("missing query parameter {key}")))
}

fn range(params: &HashMap<String, String>) -> Result<(NaiveDateTime, NaiveDateTime), ApiError> {
    let (from, to) = (required(params, "from")?, required(params, "to")?);
    if from > to {
        return Err(ApiError::bad_request("from must not be after to"));
    }
    Ok((from, to))
}

fn read(state: &AppState) -> std::sync::RwLockReadGuard<'_, Service> {
    state.service.read().expect("service lock poisoned")
}

async fn forecasts(State(state): State<AppState>, Query(p): Params) -> ApiResult<serde_json::Value> {
    let (from, to) = range(&p)?;
    let target = p
        .get("target")
        .map(|t| TargetSpec::parse(t).ok_or_else(|| ApiError::bad_request(format!("unknown target {t:?}"))))
        .transpose()?;
    let records = read(&state).forecasts(from, to, target);
    Ok(Json(serde_json::to_value(records).map_err(edf_core::Error::from)?))
}

async fn actuals(State(state): State<AppState>, Query(p): Params) -> ApiResult<serde_json::Value> {
    let (from, to) = range(&p)?;
    let rows = read(&state).actuals(from, to)?;
    Ok(Json(serde_json::to_value(rows).map_err(edf_core::Error::from)?))
}

async fn health(State(state): State<AppState>, Query(p): Params) -> ApiResult<serde_json::Value> {
    let days = match p.get("window_days") {
        None => DEFAULT_HEALTH_DAYS,
        Some(raw) => raw
            .parse::<i64>()
            .ok()
            .filter(|d| *d > 0)
            .ok_or_else(|| ApiError::bad_request(format!("window_days={raw:?} must be a positive integer")))?,
    };
    let report = read(&state).health(days)?;
    Ok(Json(serde_json::to_value(report).map_err(edf_core::Error::from)?))
}

async fn models(State(state): State<AppState>) -> ApiResult<serde_json::Value> {
    let view = read(&state).models_view();
    Ok(Json(serde_json::to_value(view).map_err(edf_core::Error::from)?))
}

async fn staffing(State(state): State<AppState>, Query(p): Params) -> ApiResult<serde_json::Value> {
    let svc = read(&state);
    let at = match timestamp(&p, "at")? {
        Some(t) => t,
        None => svc
            .now()
            .ok_or_else(|| ApiError::bad_request("no forecasts yet; pass at=YYYY-MM-DDTHH:MM"))?,
    };
    let entries = svc.staffing(at)?;
    Ok(Json(json!({ "at": timefmt::format(&at), "ratio": edf_core::service::NURSE_RATIO, "entries": entries })))
}

async fn list_actions(State(state): State<AppState>, Query(p): Params) -> ApiResult<serde_json::Value> {
    let (from, to) = range(&p)?;
    let actions = read(&state).shift_actions(from, to);
    Ok(Json(serde_json::to_value(actions).map_err(edf_core::Error::from)?))
}

async fn post_action(
    State(state): State<AppState>,
    body: Result<Json<ShiftActionInput>, axum::extract::rejection::JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(input) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let ack = state
        .service
        .write()
        .expect("service lock poisoned")
        .record_shift_action(input)?;
    let status = if ack.created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((status, Json(ack)).into_response())
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ApiError {
                status: StatusCode::UNAUTHORIZED,
                message: "missing or invalid bearer token".into(),
            }
            .into_response();
        }
    }
    next.run(req).await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/v1/forecasts", get(forecasts))
        .route("/api/v1/actuals", get(actuals))
        .route("/api/v1/health", get(health))
        .route("/api/v1/models", get(models))
        .route("/api/v1/staffing", get(staffing))
        .route("/api/v1/shift-actions", get(list_actions).post(post_action))
        .layer(middleware::from_fn_with_state(state.clone(), require_token))
        .with_state(state)
}

/// Serve until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}

//! HTTP+JSON routes over a [`SessionStore`].

use std::collections::BTreeMap;
use std::path::{Path as FsPath, PathBuf};
use std::sync::Arc;

use active_measure::pool::{load_pool, PoolMode};
use active_measure::proposal::ClampPolicy;
use active_measure::weights::WeightScheme;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::error::ServiceError;
use crate::events::{SessionConfig, UnitSpec};
use crate::session::{CreateParams, PendingSample, SessionSummary};
use crate::store::{Next, SessionStore};

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<SessionStore>,
    /// Directory searched for named pool files.
    pub pool_dir: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

pub struct ApiError(pub ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl From<active_measure::Error> for ApiError {
    fn from(e: active_measure::Error) -> Self {
        ApiError(e.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let code = self.0.code();
        let status = match code {
            "not_found" => StatusCode::NOT_FOUND,
            "conflict" | "exhausted" => StatusCode::CONFLICT,
            "validation" => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = ErrorBody {
            code: code.to_string(),
            message: self.0.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    payload
        .map(|Json(v)| v)
        .map_err(|e| ApiError(ServiceError::Validation(e.body_text())))
}

fn default_true() -> bool {
    true
}

fn default_level() -> f64 {
    0.95
}

fn default_scheme() -> String {
    "comb".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateRequest {
    /// Inline units; alternative to `pool`.
    #[serde(default)]
    pub units: Option<Vec<UnitSpec>>,
    /// Name of a pool file in the server's pool directory.
    #[serde(default)]
    pub pool: Option<String>,
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub clamp: Option<ClampPolicy>,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub predictions: Option<BTreeMap<String, f64>>,
    #[serde(default = "default_true")]
    pub uniform_fallback: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NextResponse {
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample: Option<PendingSample>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<active_measure::EstimateReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabelRequest {
    pub unit_id: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionsRequest {
    pub predictions: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Ack {
    pub ok: bool,
    pub table_versions: usize,
}

fn resolve_units(state: &AppState, req: &CreateRequest) -> Result<Vec<UnitSpec>, ServiceError> {
    match (&req.units, &req.pool) {
        (Some(units), None) => Ok(units.clone()),
        (None, Some(name)) => {
            let dir = state
                .pool_dir
                .as_ref()
                .ok_or_else(|| ServiceError::Validation("server has no pool directory".into()))?;
            if name.contains(['/', '\\']) || name.starts_with('.') {
                return Err(ServiceError::Validation(format!("invalid pool name `{name}`")));
            }
            let path = dir.join(name);
            if !path.is_file() {
                return Err(ServiceError::Validation(format!("no pool named `{name}`")));
            }
            let pool = load_pool(&path)?;
            if pool.mode() != PoolMode::Live {
                return Err(ServiceError::Validation(format!(
                    "pool `{name}` carries ground truth; sessions need a live pool"
                )));
            }
            Ok(pool
                .units()
                .iter()
                .map(|u| UnitSpec {
                    id: u.id.clone(),
                    payload_ref: u.payload_ref.clone(),
                })
                .collect())
        }
        _ => Err(ServiceError::Validation("give exactly one of `units` or `pool`".into())),
    }
}

async fn create(
    State(state): State<AppState>,
    payload: Result<Json<CreateRequest>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let req = body(payload)?;
    let units = resolve_units(&state, &req)?;
    let params = CreateParams {
        units,
        config: SessionConfig {
            scheme: WeightScheme::parse(&req.scheme, req.gamma)?,
            clamp: req
                .clamp
                .map(|c| ClampPolicy::new(c.mode, c.value))
                .transpose()?
                .unwrap_or_default(),
            level: req.level,
            seed: req.seed,
        },
        predictions: req.predictions,
        uniform_fallback: req.uniform_fallback,
    };
    let id = state.store.create(&params)?;
    Ok((StatusCode::CREATED, Json(state.store.summary(&id)?)))
}

async fn list(State(state): State<AppState>) -> Json<Vec<SessionSummary>> {
    Json(state.store.list())
}

async fn summary(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionSummary>> {
    Ok(Json(state.store.summary(&id)?))
}

async fn next(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<NextResponse>> {
    Ok(Json(match state.store.next(&id)? {
        Next::Pending(sample) => NextResponse {
            status: "pending".into(),
            sample: Some(sample),
            report: None,
        },
        Next::Exhausted(report) => NextResponse {
            status: "exhausted".into(),
            sample: None,
            report,
        },
    }))
}

async fn label(
    State(state): State<AppState>,
    Path(id): Path<String>,
    payload: Result<Json<LabelRequest>, JsonRejection>,
) -> ApiResult<Json<active_measure::EstimateReport>> {
    let req = body(payload)?;
    Ok(Json(state.store.label(&id, &req.unit_id, req.value)?))
}

async fn trajectory(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<Json<Vec<active_measure::EstimateReport>>> {
    Ok(Json(state.store.trajectory(&id)?.as_ref().clone()))
}

async fn predictions(
    State(state): State<AppState>,
    Path(id): Path<String>,
    payload: Result<Json<PredictionsRequest>, JsonRejection>,
) -> ApiResult<Json<Ack>> {
    let req = body(payload)?;
    let versions = state.store.push_predictions(&id, &req.predictions)?;
    Ok(Json(Ack {
        ok: true,
        table_versions: versions,
    }))
}

async fn export(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let log = state.store.export(&id)?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], log))
}

async fn health() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

/// All API routes, plus the UI bundle from `ui_dir` when given.
pub fn router(state: AppState, ui_dir: Option<&FsPath>) -> Router {
    let api = Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create).get(list))
        .route("/sessions/{id}", get(summary))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/labels", post(label))
        .route("/sessions/{id}/trajectory", get(trajectory))
        .route("/sessions/{id}/predictions", post(predictions))
        .route("/sessions/{id}/export", get(export))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir).append_index_html_on_directories(true)),
        None => api,
    }
}

/// Binds `addr` and serves until the process receives Ctrl-C.
pub async fn serve(addr: &str, state: AppState, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_on(listener, state, ui_dir).await
}

pub async fn serve_on(
    listener: tokio::net::TcpListener,
    state: AppState,
    ui_dir: Option<PathBuf>,
) -> std::io::Result<()> {
    let app = router(state, ui_dir.as_deref());
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

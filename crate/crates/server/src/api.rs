//! JSON API under `/api/v1`.

use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use deliberate::audit::{verify_bytes, Verification};
use deliberate::dataset::Label;
use deliberate::engine::{Engine, EngineError};
use deliberate::explain::GridConfig;
use deliberate::session::{FinalLabel, Step};

#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub step: Option<Step>,
}

pub struct ApiError(EngineError);

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        ApiError(e)
    }
}

pub fn status_of(e: &EngineError) -> StatusCode {
    match e {
        EngineError::NotFound { .. } => StatusCode::NOT_FOUND,
        EngineError::NotAcknowledged => StatusCode::FORBIDDEN,
        EngineError::Gate(_) | EngineError::Blocked { .. } => StatusCode::CONFLICT,
        EngineError::Unauthorized => StatusCode::UNAUTHORIZED,
        _ => match e.code() {
            "bad_request" => StatusCode::BAD_REQUEST,
            "predictor_timeout" => StatusCode::GATEWAY_TIMEOUT,
            "predictor_error" => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        },
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { code: self.0.code().into(), message: self.0.to_string(), step: self.0.step() };
        (status_of(&self.0), Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T, F>(engine: Arc<Engine>, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&Engine) -> Result<T, EngineError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&engine))
        .await
        .map_err(|e| ApiError(EngineError::Internal(e.to_string())))?
        .map_err(ApiError)
}

fn bearer(headers: &HeaderMap) -> String {
    headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .unwrap_or_default()
        .to_string()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct AckResponse {
    pub ack_token: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateSession {
    pub case_id: u64,
    pub ack_token: String,
}

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct NoteBody {
    #[serde(default)]
    pub label: Option<Label>,
    #[serde(default)]
    pub note: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FinalizeBody {
    pub decision: FinalLabel,
    #[serde(default)]
    pub note: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EndpointBody {
    pub endpoint: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExternalSaliencyBody {
    pub endpoint: String,
    pub payload: Value,
    #[serde(default)]
    pub config: Option<GridConfig>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
pub struct LogQuery {
    #[serde(default)]
    pub format: Option<String>,
}

/// Per-entry verification badges for the log viewer.
#[derive(Debug, Serialize, Deserialize)]
pub struct LogVerification {
    pub entries: u64,
    pub first_bad_index: Option<u64>,
    pub head_hash: Option<String>,
    pub badges: Vec<bool>,
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/api/v1/health", get(health))
        .route("/api/v1/intro/ack", post(ack))
        .route("/api/v1/cases", get(list_cases))
        .route("/api/v1/cases/{case_id}", get(get_case))
        .route("/api/v1/sessions", post(create_session))
        .route("/api/v1/sessions/{id}", get(get_session))
        .route("/api/v1/sessions/{id}/impression", post(impression))
        .route("/api/v1/sessions/{id}/advance", post(advance))
        .route("/api/v1/sessions/{id}/back", post(back))
        .route("/api/v1/sessions/{id}/skip", post(skip))
        .route("/api/v1/sessions/{id}/annotate", post(annotate))
        .route("/api/v1/sessions/{id}/finalize", post(finalize))
        .route("/api/v1/log", get(get_log))
        .route("/api/v1/log/head", get(log_head))
        .route("/api/v1/log/verify", get(log_verify))
        .route("/api/v1/admin/retrain", post(retrain))
        .route("/api/v1/predictors", get(predictors).post(register_predictor))
        .route("/api/v1/predictors/acknowledge", post(acknowledge_predictor))
        .route("/api/v1/predictors/saliency", post(external_saliency))
        .with_state(engine)
}

async fn health(State(e): State<Arc<Engine>>) -> Json<deliberate::engine::Health> {
    Json(e.health())
}

async fn ack(State(e): State<Arc<Engine>>) -> Json<AckResponse> {
    Json(AckResponse { ack_token: e.acknowledge() })
}

async fn list_cases(State(e): State<Arc<Engine>>) -> Json<Vec<deliberate::engine::CaseSummary>> {
    Json(e.list_cases())
}

async fn get_case(State(e): State<Arc<Engine>>, Path(case_id): Path<u64>) -> ApiResult<deliberate::engine::CaseSummary> {
    Ok(Json(e.get_case(case_id)?))
}

async fn create_session(State(e): State<Arc<Engine>>, Json(b): Json<CreateSession>) -> Result<(StatusCode, Json<deliberate::engine::SessionResponse>), ApiError> {
    let r = blocking(e, move |e| e.create_session(b.case_id, &b.ack_token)).await?;
    Ok((StatusCode::CREATED, Json(r)))
}

type SessionResult = ApiResult<deliberate::engine::SessionResponse>;

async fn get_session(State(e): State<Arc<Engine>>, Path(id): Path<String>) -> SessionResult {
    Ok(Json(blocking(e, move |e| e.get_session(&id)).await?))
}

async fn impression(State(e): State<Arc<Engine>>, Path(id): Path<String>, Json(b): Json<NoteBody>) -> SessionResult {
    Ok(Json(blocking(e, move |e| e.record_first_impression(&id, b.label, &b.note)).await?))
}

async fn advance(State(e): State<Arc<Engine>>, Path(id): Path<String>) -> SessionResult {
    Ok(Json(blocking(e, move |e| e.advance(&id)).await?))
}

async fn back(State(e): State<Arc<Engine>>, Path(id): Path<String>) -> SessionResult {
    Ok(Json(blocking(e, move |e| e.go_back(&id)).await?))
}

async fn skip(State(e): State<Arc<Engine>>, Path(id): Path<String>) -> SessionResult {
    Ok(Json(blocking(e, move |e| e.skip_to_final(&id)).await?))
}

async fn annotate(State(e): State<Arc<Engine>>, Path(id): Path<String>, Json(b): Json<NoteBody>) -> SessionResult {
    Ok(Json(blocking(e, move |e| e.annotate(&id, b.label, &b.note)).await?))
}

async fn finalize(State(e): State<Arc<Engine>>, Path(id): Path<String>, Json(b): Json<FinalizeBody>) -> SessionResult {
    Ok(Json(blocking(e, move |e| e.finalize(&id, b.decision, b.note)).await?))
}

async fn get_log(State(e): State<Arc<Engine>>, headers: HeaderMap, Query(q): Query<LogQuery>) -> Result<Response, ApiError> {
    let token = bearer(&headers);
    if q.format.as_deref() == Some("jsonl") {
        let bytes = e.log_bytes(&token)?;
        return Ok(([("content-type", "application/x-ndjson")], bytes).into_response());
    }
    Ok(Json(e.log_entries(&token)?).into_response())
}

async fn log_head(State(e): State<Arc<Engine>>, headers: HeaderMap) -> ApiResult<deliberate::audit::Head> {
    e.authorize(&bearer(&headers))?;
    Ok(Json(e.head()))
}

async fn log_verify(State(e): State<Arc<Engine>>, headers: HeaderMap) -> ApiResult<LogVerification> {
    let bytes = e.log_bytes(&bearer(&headers))?;
    let n = deliberate::audit::parse_entries(&bytes).len() as u64;
    Ok(Json(match verify_bytes(&bytes) {
        Verification::Ok { entries, head } => LogVerification {
            entries,
            first_bad_index: None,
            head_hash: Some(head.head_hash),
            badges: vec![true; entries as usize],
        },
        Verification::FirstBadIndex(i) => LogVerification {
            entries: n,
            first_bad_index: Some(i),
            head_hash: None,
            badges: (0..n).map(|j| j < i).collect(),
        },
    }))
}

async fn retrain(State(e): State<Arc<Engine>>, headers: HeaderMap) -> ApiResult<deliberate::finetune::RetrainOutcome> {
    e.authorize(&bearer(&headers))?;
    Ok(Json(blocking(e, |e| e.retrain_now()).await?))
}

async fn predictors(State(e): State<Arc<Engine>>) -> Json<deliberate::predictor::PredictorRegistry> {
    Json(e.registry())
}

async fn register_predictor(State(e): State<Arc<Engine>>, headers: HeaderMap, Json(b): Json<EndpointBody>) -> ApiResult<deliberate::events::PredictorRegistered> {
    e.authorize(&bearer(&headers))?;
    Ok(Json(blocking(e, move |e| e.register_predictor(&b.endpoint)).await?))
}

async fn acknowledge_predictor(State(e): State<Arc<Engine>>, headers: HeaderMap, Json(b): Json<EndpointBody>) -> ApiResult<Value> {
    let token = bearer(&headers);
    blocking(e, move |e| e.acknowledge_predictor(&b.endpoint, &token)).await?;
    Ok(Json(serde_json::json!({"acknowledged": true})))
}

async fn external_saliency(State(e): State<Arc<Engine>>, Json(b): Json<ExternalSaliencyBody>) -> ApiResult<deliberate::events::SaliencyComputed> {
    let config = b.config.unwrap_or_else(|| {
        let x = &e.config().explainer;
        GridConfig { n_masks: x.n_masks, mask_prob: x.mask_prob, grid_h: x.grid_h, grid_w: x.grid_w }
    });
    Ok(Json(blocking(e, move |e| e.external_saliency(&b.endpoint, &b.payload, &config, b.seed)).await?))
}

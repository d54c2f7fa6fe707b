//! JSON HTTP API over a shared pipeline and an atomically swappable index.

use std::future::Future;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use statrag_core::embed::EmbedError;
use statrag_core::eval::{parse_dataset, run_eval, EvalError, QaRecord};
use statrag_core::index::VectorIndex;
use statrag_core::pipeline::{GeneratorError, Pipeline, PipelineError};
use statrag_core::router::StrategyChoice;

/// Shared request state. Readers clone the current `Arc<VectorIndex>`;
/// `replace_index` swaps it in one step.
pub struct AppState {
    pipeline: Pipeline,
    index: RwLock<Arc<VectorIndex>>,
    fingerprint: String,
}

impl AppState {
    pub fn new(pipeline: Pipeline, index: VectorIndex, fingerprint: impl Into<String>) -> Self {
        AppState {
            pipeline,
            index: RwLock::new(Arc::new(index)),
            fingerprint: fingerprint.into(),
        }
    }

    pub fn index(&self) -> Arc<VectorIndex> {
        self.index.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn replace_index(&self, index: VectorIndex) {
        *self.index.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(index);
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
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

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

fn embed_status(e: &EmbedError) -> StatusCode {
    match e {
        EmbedError::Http { .. } | EmbedError::MalformedResponse(_) => StatusCode::BAD_GATEWAY,
        EmbedError::Batch { source, .. } => embed_status(source),
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let status = match &e {
            PipelineError::NoStatesNamed => StatusCode::BAD_REQUEST,
            PipelineError::Generator(GeneratorError::Remote { .. } | GeneratorError::MalformedResponse(_)) => {
                StatusCode::BAD_GATEWAY
            }
            PipelineError::Embed(inner) => embed_status(inner),
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError::new(status, e.to_string())
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct QueryRequest {
    question: String,
    #[serde(default)]
    strategy: Option<String>,
    #[serde(default)]
    k: Option<usize>,
}

fn parse_query(body: &[u8]) -> Result<(String, StrategyChoice, Option<usize>), ApiError> {
    let req: QueryRequest =
        serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request: {e}")))?;
    if req.question.trim().is_empty() {
        return Err(ApiError::bad_request("question must be non-empty"));
    }
    let strategy = match req.strategy.as_deref() {
        None => StrategyChoice::Auto,
        Some(s) => s
            .parse()
            .map_err(|e: statrag_core::router::UnknownStrategy| ApiError::new(StatusCode::NOT_FOUND, e.to_string()))?,
    };
    if req.k == Some(0) {
        return Err(ApiError::bad_request("k must be at least 1"));
    }
    Ok((req.question, strategy, req.k))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let index = state.index();
    Json(json!({
        "status": "ok",
        "chunks": index.len(),
        "partitions": index.partition_count(),
    }))
}

async fn stats(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let index = state.index();
    let partitions: serde_json::Map<String, serde_json::Value> = index
        .partition_sizes()
        .into_iter()
        .map(|(j, n)| (j.name().to_string(), n.into()))
        .collect();
    Json(json!({
        "chunks": index.len(),
        "dim": index.dim(),
        "fingerprint": index.fingerprint(),
        "partitions": partitions,
    }))
}

async fn query(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let (question, strategy, k) = parse_query(&body)?;
    let answer = blocking(move || {
        let index = state.index();
        state
            .pipeline
            .answer(&question, &index, strategy, k)
            .map_err(ApiError::from)
    })
    .await?;
    Ok(Json(answer).into_response())
}

fn parse_eval_body(body: &[u8]) -> Result<Vec<QaRecord>, ApiError> {
    let text = std::str::from_utf8(body).map_err(|_| ApiError::bad_request("body must be UTF-8"))?;
    let records = if text.trim_start().starts_with('[') {
        let items: Vec<serde_json::Value> =
            serde_json::from_str(text).map_err(|e| ApiError::bad_request(format!("malformed dataset: {e}")))?;
        let lines: Vec<String> = items.iter().map(|v| v.to_string()).collect();
        parse_dataset(&lines.join("\n"), "request body")
    } else {
        parse_dataset(text, "request body")
    };
    let records = records.map_err(|e| match e {
        EvalError::Dataset { .. } | EvalError::Json(_) => ApiError::bad_request(e.to_string()),
        other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
    })?;
    if records.is_empty() {
        return Err(ApiError::bad_request(EvalError::EmptyDataset.to_string()));
    }
    Ok(records)
}

async fn eval(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let records = parse_eval_body(&body)?;
    let report = blocking(move || {
        let index = state.index();
        run_eval(&records, &index, &state.pipeline, state.fingerprint.clone())
            .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))
    })
    .await?;
    Ok(Json(report).into_response())
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "no such endpoint")
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/stats", get(stats))
        .route("/query", post(query))
        .route("/eval", post(eval))
        .fallback(not_found)
        .with_state(state)
}

/// Serve until `shutdown` resolves, then finish in-flight requests.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<AppState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

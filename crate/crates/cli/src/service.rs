//! JSON-over-HTTP service around one engine.
//!
//! Ingestion is single-writer: a second ingest while one is running gets 409
//! rather than queueing. The event is applied to a copy of the engine, so
//! reads keep being served from the previous state until the new one is
//! saved and swapped in.

use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Query as UrlQuery, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;
use visualmem_core::gateway::GatewayError;
use visualmem_core::pipeline::{ObservationStatus, PipelineError};
use visualmem_core::query::{Answer, Query, QueryError};
use visualmem_core::visual_store::{EntityKind, FactCategory, OwnerRelation};
use visualmem_core::{Engine, EventInput, TokenBudget};

use crate::{EntityFilter, EntityView, FactFilter, FactView};

pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 500;

pub struct AppState {
    engine: RwLock<Arc<Engine>>,
    ingest: Arc<tokio::sync::Mutex<()>>,
    budget: TokenBudget,
    /// Saved after every successful ingest when set.
    store_dir: Option<PathBuf>,
}

impl AppState {
    pub fn new(engine: Engine, budget: TokenBudget, store_dir: Option<PathBuf>) -> Arc<Self> {
        Arc::new(Self { engine: RwLock::new(Arc::new(engine)), ingest: Arc::new(tokio::sync::Mutex::new(())), budget, store_dir })
    }

    fn snapshot(&self) -> Arc<Engine> {
        self.engine.read().expect("engine lock poisoned").clone()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/ingest-event", post(ingest_event))
        .route("/v1/query", post(query))
        .route("/v1/memory/entities", get(list_entities))
        .route("/v1/memory/facts", get(list_facts))
        .route("/v1/memory/pending", get(list_pending))
        .with_state(state)
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": { "code": self.code, "message": self.message } }))).into_response()
    }
}

fn gateway_code(e: &GatewayError) -> &'static str {
    match e {
        GatewayError::NoFixtureMatch { .. } => "gateway_no_fixture",
        GatewayError::Transport(_) => "gateway_transport",
        GatewayError::NonConformingOutput { .. } => "gateway_nonconforming_output",
        GatewayError::InvalidRequest(_) => "gateway_invalid_request",
        GatewayError::Fixture(_) => "gateway_fixture",
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let (status, code) = match &e {
            PipelineError::InvalidEvent(_) => (StatusCode::BAD_REQUEST, "invalid_event"),
            PipelineError::OutOfOrder { .. } => (StatusCode::CONFLICT, "out_of_order"),
            PipelineError::DuplicateEvent(_) => (StatusCode::CONFLICT, "duplicate_event"),
            PipelineError::InvalidConfig(_) => (StatusCode::INTERNAL_SERVER_ERROR, "invalid_config"),
            PipelineError::Gateway(g) => (StatusCode::INTERNAL_SERVER_ERROR, gateway_code(g)),
            PipelineError::Store(_) => (StatusCode::INTERNAL_SERVER_ERROR, "store"),
            PipelineError::TextMemory(_) => (StatusCode::INTERNAL_SERVER_ERROR, "text_memory"),
            PipelineError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "io"),
            PipelineError::Corrupt(_) => (StatusCode::INTERNAL_SERVER_ERROR, "corrupt_state"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl From<QueryError> for ApiError {
    fn from(e: QueryError) -> Self {
        let (status, code) = match &e {
            QueryError::InvalidQuery(_) => (StatusCode::BAD_REQUEST, "invalid_query"),
            QueryError::Gateway(g) => (StatusCode::INTERNAL_SERVER_ERROR, gateway_code(g)),
            QueryError::Store(_) => (StatusCode::INTERNAL_SERVER_ERROR, "store"),
        };
        Self::new(status, code, e.to_string())
    }
}

/// JSON body parsing that reports every schema problem as a 400.
fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(e.to_string()))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::internal(e.to_string()))?
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn ingest_event(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let input: EventInput = parse_body(&body)?;
    let event = input.into_event().map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_event", e.to_string()))?;
    // The guard moves into the worker so it outlives a dropped request.
    let Ok(guard) = state.ingest.clone().try_lock_owned() else {
        return Err(ApiError::new(StatusCode::CONFLICT, "ingest_in_progress", "another event is being ingested"));
    };
    let st = state.clone();
    let report = blocking(move || {
        let _guard = guard;
        let mut next = (*st.snapshot()).clone();
        let report = next.ingest_event(&event)?;
        if let Some(dir) = &st.store_dir {
            next.save(dir)?;
        }
        *st.engine.write().expect("engine lock poisoned") = Arc::new(next);
        Ok(report)
    })
    .await?;
    Ok(Json(report).into_response())
}

async fn query(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<Answer>, ApiError> {
    let query: Query = parse_body(&body)?;
    query.validate()?;
    let engine = state.snapshot();
    let budget = state.budget;
    let answer = blocking(move || Ok(engine.answer(&query, budget)?)).await?;
    Ok(Json(answer))
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageParams {
    #[serde(default)]
    pub offset: usize,
    #[serde(default)]
    pub limit: Option<usize>,
    pub kind: Option<EntityKind>,
    pub owner: Option<OwnerRelation>,
    pub name: Option<String>,
    pub category: Option<FactCategory>,
    pub contains: Option<String>,
    pub status: Option<ObservationStatus>,
}

#[derive(Debug, Serialize)]
pub struct Page<T> {
    pub items: Vec<T>,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    /// Offset of the following page, when there is one.
    pub next_offset: Option<usize>,
}

fn page<T>(all: Vec<T>, p: &PageParams) -> Result<Page<T>, ApiError> {
    let limit = p.limit.unwrap_or(DEFAULT_PAGE);
    if limit == 0 || limit > MAX_PAGE {
        return Err(ApiError::bad_request(format!("limit must lie in 1..={MAX_PAGE}")));
    }
    let total = all.len();
    let items: Vec<T> = all.into_iter().skip(p.offset).take(limit).collect();
    let end = p.offset.saturating_add(items.len());
    Ok(Page { items, total, offset: p.offset, limit, next_offset: (end < total).then_some(end) })
}

type Params = Result<UrlQuery<PageParams>, axum::extract::rejection::QueryRejection>;

fn params(p: Params) -> Result<PageParams, ApiError> {
    p.map(|UrlQuery(p)| p).map_err(|e| ApiError::bad_request(e.body_text()))
}

async fn list_entities(State(state): State<Arc<AppState>>, p: Params) -> Result<Response, ApiError> {
    let p = params(p)?;
    let filter = EntityFilter { kind: p.kind, owner: p.owner, name: p.name.clone() };
    let engine = state.snapshot();
    let views: Vec<EntityView> = crate::entities(&engine, &filter).into_iter().map(EntityView::from).collect();
    Ok(Json(page(views, &p)?).into_response())
}

async fn list_facts(State(state): State<Arc<AppState>>, p: Params) -> Result<Response, ApiError> {
    let p = params(p)?;
    let filter = FactFilter { category: p.category, contains: p.contains.clone() };
    let engine = state.snapshot();
    let views: Vec<FactView> = crate::facts(&engine, &filter).into_iter().map(FactView::from).collect();
    Ok(Json(page(views, &p)?).into_response())
}

async fn list_pending(State(state): State<Arc<AppState>>, p: Params) -> Result<Response, ApiError> {
    let p = params(p)?;
    let engine = state.snapshot();
    Ok(Json(page(crate::observations(&engine, p.status), &p)?).into_response())
}

//! HTTP front end over a single [`Engine`].
//!
//! Handlers run engine calls on the blocking pool. Reads share the lock and
//! mutations take it exclusively, so at most one cycle or workflow mutation
//! runs at a time.

use std::sync::{Arc, RwLock};

use axum::body::Body;
use axum::extract::{Path, Query as UrlQuery, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use relevance_core::domain::Directive;
use relevance_core::pipeline::{CaseRecord, Engine, HumanVerdict};
use relevance_core::Error;

pub use relevance_core::pipeline::CaseSubmission;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error(transparent)]
    Engine(#[from] Error),
    #[error("worker failed: {0}")]
    Worker(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::Engine(e) => match e {
                Error::UnknownEntity(_) => StatusCode::NOT_FOUND,
                Error::CaseNotAwaiting(_) | Error::Conflict(_) => StatusCode::CONFLICT,
                Error::InvalidConfig(_) | Error::InvalidQuery(_) | Error::InvalidLabel(_) | Error::UnresolvedInput(_) | Error::InvalidK => {
                    StatusCode::UNPROCESSABLE_ENTITY
                }
                Error::AnnotatorUnavailable(_) | Error::ToolUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
                _ => StatusCode::INTERNAL_SERVER_ERROR,
            },
            ApiError::Worker(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(ErrorBody { error: self.to_string() })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub struct AppState {
    engine: RwLock<Engine>,
}

impl AppState {
    pub fn new(engine: Engine) -> Arc<Self> {
        Arc::new(Self { engine: RwLock::new(engine) })
    }

    pub fn into_engine(self: Arc<Self>) -> Option<Engine> {
        Arc::into_inner(self).map(|s| s.engine.into_inner().unwrap_or_else(|p| p.into_inner()))
    }
}

async fn read<R: Send + 'static>(st: &Arc<AppState>, f: impl FnOnce(&Engine) -> Result<R, Error> + Send + 'static) -> ApiResult<R> {
    let st = st.clone();
    tokio::task::spawn_blocking(move || {
        let e = st.engine.read().unwrap_or_else(|p| p.into_inner());
        f(&e)
    })
    .await
    .map_err(|e| ApiError::Worker(e.to_string()))?
    .map_err(ApiError::from)
}

async fn write<R: Send + 'static>(st: &Arc<AppState>, f: impl FnOnce(&mut Engine) -> Result<R, Error> + Send + 'static) -> ApiResult<R> {
    let st = st.clone();
    tokio::task::spawn_blocking(move || {
        let mut e = st.engine.write().unwrap_or_else(|p| p.into_inner());
        f(&mut e)
    })
    .await
    .map_err(|e| ApiError::Worker(e.to_string()))?
    .map_err(ApiError::from)
}

/// One NDJSON line of a streamed transcript. Turns carry their index so a
/// reconnecting client can resume with `?from=` without duplicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum TranscriptEvent {
    Turn { index: usize, turn: relevance_core::dialectic::Turn },
    Outcome { round_count: usize, outcome: relevance_core::dialectic::ConsensusOutcome, status: relevance_core::pipeline::CaseStatus },
    Verdict { verdict: HumanVerdict },
}

pub fn transcript_events(rec: &CaseRecord, from: usize) -> Result<Vec<TranscriptEvent>, Error> {
    let t = rec.transcript.as_ref().ok_or_else(|| Error::UnknownEntity(format!("transcript for case {}", rec.case.id)))?;
    let mut out: Vec<TranscriptEvent> =
        t.turns.iter().enumerate().skip(from).map(|(index, turn)| TranscriptEvent::Turn { index, turn: turn.clone() }).collect();
    out.push(TranscriptEvent::Outcome { round_count: t.round_count, outcome: t.outcome.clone(), status: rec.status });
    if let Some(v) = &rec.verdict {
        out.push(TranscriptEvent::Verdict { verdict: v.clone() });
    }
    Ok(out)
}

pub fn ndjson_lines(events: &[TranscriptEvent]) -> Result<Vec<String>, Error> {
    events.iter().map(|e| Ok(serde_json::to_string(e)? + "\n")).collect()
}

#[derive(Debug, Default, Deserialize)]
struct FromParam {
    #[serde(default)]
    from: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RejectBody {
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub query: String,
    pub product_id: String,
    #[serde(default)]
    pub language: Option<String>,
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/cases", post(submit_case).get(list_cases))
        .route("/cases/{id}", get(get_case))
        .route("/cases/{id}/transcript", get(stream_transcript))
        .route("/cases/{id}/adjudicate", post(adjudicate))
        .route("/directives", post(add_directive).get(list_directives))
        .route("/directives/{id}", delete(remove_directive))
        .route("/standards", get(standards))
        .route("/standards/proposals", get(list_proposals))
        .route("/standards/proposals/{id}/approve", post(approve))
        .route("/standards/proposals/{id}/reject", post(reject))
        .route("/score", post(score))
        .route("/metrics", get(metrics))
        .route("/pipeline/run-cycle", post(run_cycle))
        .route("/pipeline/release-breaker", post(release_breaker))
        .with_state(state)
}

async fn submit_case(State(st): State<Arc<AppState>>, Json(sub): Json<CaseSubmission>) -> ApiResult<impl IntoResponse> {
    let rec = write(&st, move |e| e.submit_case(sub)).await?;
    Ok((StatusCode::CREATED, Json(rec)))
}

async fn list_cases(State(st): State<Arc<AppState>>) -> ApiResult<Json<Vec<CaseRecord>>> {
    Ok(Json(read(&st, |e| Ok(e.cases.clone())).await?))
}

async fn get_case(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<CaseRecord>> {
    Ok(Json(read(&st, move |e| e.case(&id).cloned()).await?))
}

async fn stream_transcript(State(st): State<Arc<AppState>>, Path(id): Path<String>, UrlQuery(p): UrlQuery<FromParam>) -> ApiResult<Response> {
    let lines = read(&st, move |e| ndjson_lines(&transcript_events(e.case(&id)?, p.from)?)).await?;
    let stream = futures::stream::iter(lines.into_iter().map(Ok::<_, std::convert::Infallible>));
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], Body::from_stream(stream)).into_response())
}

async fn adjudicate(State(st): State<Arc<AppState>>, Path(id): Path<String>, Json(v): Json<HumanVerdict>) -> ApiResult<Json<CaseRecord>> {
    Ok(Json(write(&st, move |e| e.adjudicate(&id, v)).await?))
}

async fn add_directive(State(st): State<Arc<AppState>>, Json(d): Json<Directive>) -> ApiResult<impl IntoResponse> {
    let out = d.clone();
    write(&st, move |e| e.add_directive(d)).await?;
    Ok((StatusCode::CREATED, Json(out)))
}

async fn list_directives(State(st): State<Arc<AppState>>) -> ApiResult<Json<Vec<Directive>>> {
    Ok(Json(read(&st, |e| Ok(e.directives.clone())).await?))
}

async fn remove_directive(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Directive>> {
    Ok(Json(write(&st, move |e| e.remove_directive(&id)).await?))
}

async fn standards(State(st): State<Arc<AppState>>) -> ApiResult<Json<relevance_core::domain::StandardsDoc>> {
    Ok(Json(read(&st, |e| Ok(e.standards.clone())).await?))
}

async fn list_proposals(State(st): State<Arc<AppState>>) -> ApiResult<Json<Vec<relevance_core::pipeline::Proposal>>> {
    Ok(Json(read(&st, |e| Ok(e.proposals.clone())).await?))
}

async fn approve(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<relevance_core::pipeline::Proposal>> {
    Ok(Json(write(&st, move |e| e.approve_proposal(&id)).await?))
}

async fn reject(State(st): State<Arc<AppState>>, Path(id): Path<String>, Json(b): Json<RejectBody>) -> ApiResult<Json<relevance_core::pipeline::Proposal>> {
    Ok(Json(write(&st, move |e| e.reject_proposal(&id, &b.reason)).await?))
}

async fn score(State(st): State<Arc<AppState>>, Json(r): Json<ScoreRequest>) -> ApiResult<Json<relevance_core::Prediction>> {
    Ok(Json(
        read(&st, move |e| {
            let q = e.resolve_query(&r.query, r.language.as_deref())?;
            e.score(&q, &r.product_id)
        })
        .await?,
    ))
}

async fn metrics(State(st): State<Arc<AppState>>) -> ApiResult<Json<relevance_core::pipeline::Metrics>> {
    Ok(Json(read(&st, |e| Ok(e.metrics())).await?))
}

async fn run_cycle(State(st): State<Arc<AppState>>) -> ApiResult<Json<relevance_core::pipeline::CycleReport>> {
    Ok(Json(write(&st, |e| e.run_cycle()).await?))
}

async fn release_breaker(State(st): State<Arc<AppState>>) -> ApiResult<Json<relevance_core::pipeline::BreakerState>> {
    Ok(Json(write(&st, |e| e.release_breaker()).await?))
}

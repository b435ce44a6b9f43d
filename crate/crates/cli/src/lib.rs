//! HTTP routes and command implementations for the `crowdstory` binary.

use std::path::Path;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path as UrlPath, Query, Request, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crowdstory_core::engine::{estimate_cost, QuotaConfig, TaskKind, TaskResponse, Worker};
use crowdstory_core::ingestion::{parse_corpus, sample_corpus};
use crowdstory_core::service::{CreateEventRequest, Snapshot, StoryExport};
use crowdstory_core::sim::{parse_pool, run_simulation};
use crowdstory_core::stats::{
    chi_square_preference, friedman_test_with, FriedmanOptions, PreferenceCount, RatingMatrix,
};
use crowdstory_core::{ApiError, ErrorCode, Event, Service, Story};

/// Wraps [`ApiError`] so it renders as a JSON body with the matching status.
#[derive(Debug)]
pub struct HttpError(pub ApiError);

impl From<ApiError> for HttpError {
    fn from(e: ApiError) -> Self {
        HttpError(e)
    }
}

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.0.code.http_status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.0)).into_response()
    }
}

/// JSON body extractor whose rejections are reported as validation errors.
pub struct Body<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = HttpError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(value)) => Ok(Body(value)),
            Err(rejection) => Err(HttpError(rejection_error(rejection))),
        }
    }
}

fn rejection_error(rejection: JsonRejection) -> ApiError {
    ApiError::validation(rejection.body_text()).with_detail("status", rejection.status().as_u16())
}

type AppState = Arc<Service>;
type ApiResult<T> = Result<T, HttpError>;

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

pub fn router(service: Arc<Service>) -> Router {
    Router::new()
        .route("/events", post(create_event))
        .route("/events/{id}", get(event_status))
        .route("/events/{id}/advance", post(advance_event))
        .route("/events/{id}/story", get(event_story))
        .route("/workers", post(register_worker))
        .route("/workers/{wid}/tasks/next", get(next_task))
        .route("/tasks/{tid}", get(task_view))
        .route("/tasks/{tid}/assign", post(assign_task))
        .route("/tasks/{tid}/submit", post(submit_task))
        .route("/stats/chi2", post(stats_chi2))
        .route("/stats/friedman", post(stats_friedman))
        .with_state(service)
}

async fn create_event(State(s): State<AppState>, Body(req): Body<CreateEventRequest>) -> ApiResult<Response> {
    let created = s.create_event(req, now_ms())?;
    Ok((StatusCode::CREATED, Json(created)).into_response())
}

async fn event_status(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    Ok(Json(s.status(&id)?).into_response())
}

async fn advance_event(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    Ok(Json(s.advance(&id, now_ms())?).into_response())
}

async fn event_story(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    Ok(Json(s.story(&id)?).into_response())
}

async fn register_worker(State(s): State<AppState>, Body(worker): Body<Worker>) -> ApiResult<Response> {
    Ok(Json(s.register_worker(worker)?).into_response())
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    kind: Option<String>,
}

async fn next_task(
    State(s): State<AppState>,
    UrlPath(wid): UrlPath<String>,
    Query(q): Query<NextQuery>,
) -> ApiResult<Response> {
    let kind = match q.kind.as_deref().filter(|k| !k.is_empty()) {
        Some(k) => Some(k.parse::<TaskKind>().map_err(|_| ApiError::validation(format!("unknown task kind {k}")))?),
        None => None,
    };
    Ok(match s.next_task(&wid, kind)? {
        Some(view) => Json(view).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn task_view(State(s): State<AppState>, UrlPath(tid): UrlPath<String>) -> ApiResult<Response> {
    Ok(Json(s.task(&tid)?).into_response())
}

#[derive(Debug, Deserialize)]
struct AssignRequest {
    worker_id: String,
}

async fn assign_task(
    State(s): State<AppState>,
    UrlPath(tid): UrlPath<String>,
    Body(req): Body<AssignRequest>,
) -> ApiResult<Response> {
    Ok(Json(s.assign(&tid, &req.worker_id, now_ms())?).into_response())
}

#[derive(Debug, Deserialize)]
struct SubmitRequest {
    worker_id: String,
    body: TaskResponse,
}

async fn submit_task(
    State(s): State<AppState>,
    UrlPath(tid): UrlPath<String>,
    Body(req): Body<SubmitRequest>,
) -> ApiResult<Response> {
    Ok(Json(s.submit(&tid, &req.worker_id, req.body, now_ms())?).into_response())
}

async fn stats_chi2(Body(pc): Body<PreferenceCount>) -> ApiResult<Response> {
    Ok(Json(chi_square_preference(pc).map_err(ApiError::from)?).into_response())
}

#[derive(Debug, Deserialize)]
struct FriedmanRequest {
    matrix: Vec<Vec<f64>>,
    #[serde(default)]
    tie_correction: bool,
}

async fn stats_friedman(Body(req): Body<FriedmanRequest>) -> ApiResult<Response> {
    let m = RatingMatrix::likert(req.matrix).map_err(ApiError::from)?;
    let result = friedman_test_with(&m, FriedmanOptions { tie_correction: req.tie_correction });
    Ok(Json(result).into_response())
}

fn read(path: &Path) -> Result<String, ApiError> {
    std::fs::read_to_string(path).map_err(|e| ApiError::new(ErrorCode::NotFound, format!("{}: {e}", path.display())))
}

fn parse_json<T: DeserializeOwned>(path: &Path) -> Result<T, ApiError> {
    serde_json::from_str(&read(path)?).map_err(|e| ApiError::validation(format!("{}: {e}", path.display())))
}

fn load_quotas(path: Option<&Path>) -> Result<QuotaConfig, ApiError> {
    match path {
        Some(p) => Ok(QuotaConfig::from_json(&read(p)?)?),
        None => Ok(QuotaConfig::default()),
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("value serializes")
}

/// Builds an event file from a posts JSONL file and a cluster file.
pub fn ingest(
    event_id: &str,
    hashtag: &str,
    posts: &Path,
    clusters: &Path,
    cap: usize,
    seed: u64,
) -> Result<Event, ApiError> {
    let event = parse_corpus(event_id, hashtag, posts, clusters)?;
    Ok(sample_corpus(&event, cap, seed)?)
}

pub struct SimulationFiles {
    pub story_text: String,
    pub transcript_jsonl: String,
    pub story: Story,
}

pub fn simulate(event: &Path, pool: &Path, seed: u64, quotas: Option<&Path>) -> Result<SimulationFiles, ApiError> {
    let event: Event = parse_json(event)?;
    let pool = parse_pool(&read(pool)?).map_err(|e| ApiError::validation(e.to_string()))?;
    let quotas = load_quotas(quotas)?;
    let outcome = run_simulation(event, quotas, &pool, seed).map_err(|e| match e {
        crowdstory_core::sim::SimError::Engine(e) => ApiError::from(e),
        crowdstory_core::sim::SimError::Service(e) => e,
        other => ApiError::new(ErrorCode::Eligibility, other.to_string()),
    })?;
    Ok(SimulationFiles {
        story_text: crowdstory_core::render_story(&outcome.story)?,
        transcript_jsonl: outcome.transcript_jsonl(),
        story: outcome.story,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Text,
    Structured,
}

/// Renders an export exactly as `GET /events/{id}/story` would.
pub fn format_export(export: &StoryExport, format: ExportFormat) -> String {
    match format {
        ExportFormat::Text => export.text.clone(),
        ExportFormat::Structured => serde_json::to_string(export).expect("export serializes"),
    }
}

/// Exports a completed event from a service snapshot.
pub fn export_from_snapshot(snapshot: &Path, event_id: &str) -> Result<StoryExport, ApiError> {
    let snap: Snapshot = parse_json(snapshot)?;
    let pipeline = snap.events.get(event_id).ok_or_else(|| ApiError::not_found(format!("event {event_id}")))?;
    let story = pipeline
        .story()
        .ok_or_else(|| ApiError::new(ErrorCode::Conflict, format!("event {event_id} is not complete")))?;
    StoryExport::from_story(story)
}

/// Exports a story file (the structured form of a story).
pub fn export_from_story_file(path: &Path) -> Result<StoryExport, ApiError> {
    let story: Story = parse_json(path)?;
    StoryExport::from_story(&story)
}

pub fn cost_report(event: &Path, quotas: Option<&Path>) -> Result<String, ApiError> {
    let event: Event = parse_json(event)?;
    let quotas = load_quotas(quotas)?;
    let total = estimate_cost(&event, &quotas);
    Ok(format!("{} cents ({} moments x {} cents per moment)", total, event.moments.len(), quotas.cost_per_moment()))
}

pub fn chi2_report(n: u64, count_a: u64) -> Result<String, ApiError> {
    let r = chi_square_preference(PreferenceCount { n, count_a })?;
    Ok(format!("statistic: {:.4}\ndf: {}\np_value: {:.6}", r.statistic, r.df, r.p_value))
}

pub fn friedman_report(matrix: &Path, tie_correction: bool) -> Result<String, ApiError> {
    let rows: Vec<Vec<f64>> = parse_json(matrix)?;
    let m = RatingMatrix::likert(rows)?;
    let r = friedman_test_with(&m, FriedmanOptions { tie_correction });
    Ok(format!("statistic: {:.4}\ndf: {}\np_value: {:.6}", r.statistic, r.df, r.p_value))
}

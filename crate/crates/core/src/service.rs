//! Transport-independent service layer: a registry of event pipelines and
//! workers with snapshot-on-commit persistence and uniform API errors.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::engine::{
    EngineError, EventPipeline, PipelineStatus, QuotaConfig, StageReport, SubmitOutcome, TaskKind, TaskResponse,
    TaskView, Worker,
};
use crate::ingestion::{build_event, sample_corpus, ClusterAssignment, IngestError};
use crate::model::{render_story, ModelError, Paragraph, Post, Story};
use crate::stats::StatsError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    Validation,
    Eligibility,
    Conflict,
    NotFound,
    Authorization,
    /// Storage failures; not caused by the request.
    Internal,
}

impl ErrorCode {
    pub fn http_status(self) -> u16 {
        match self {
            ErrorCode::Validation => 400,
            ErrorCode::Eligibility | ErrorCode::Authorization => 403,
            ErrorCode::NotFound => 404,
            ErrorCode::Conflict => 409,
            ErrorCode::Internal => 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{code:?}: {message}")]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default)]
    pub details: BTreeMap<String, Value>,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ApiError { code, message: message.into(), details: BTreeMap::new() }
    }

    pub fn with_detail(mut self, key: &str, value: impl Serialize) -> Self {
        self.details.insert(key.to_string(), serde_json::to_value(value).unwrap_or(Value::Null));
        self
    }

    pub fn validation(message: impl Into<String>) -> Self {
        ApiError::new(ErrorCode::Validation, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        ApiError::new(ErrorCode::NotFound, message)
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let message = e.to_string();
        match e {
            EngineError::Validation { violations, .. } => {
                let err = ApiError::validation(message);
                match violations {
                    Some(v) => err.with_detail("violations", &v.0),
                    None => err,
                }
            }
            EngineError::Config(_) => ApiError::validation(message),
            EngineError::Eligibility { worker_id, .. } => {
                ApiError::new(ErrorCode::Eligibility, message).with_detail("worker_id", worker_id)
            }
            EngineError::Conflict(_) | EngineError::Aggregation(_) => ApiError::new(ErrorCode::Conflict, message),
            EngineError::NotFound(_) => ApiError::not_found(message),
            EngineError::Authorization { worker_id, task_id } => ApiError::new(ErrorCode::Authorization, message)
                .with_detail("worker_id", worker_id)
                .with_detail("task_id", task_id),
        }
    }
}

impl From<IngestError> for ApiError {
    fn from(e: IngestError) -> Self {
        ApiError::validation(e.to_string())
    }
}

impl From<ModelError> for ApiError {
    fn from(e: ModelError) -> Self {
        EngineError::from(e).into()
    }
}

impl From<StatsError> for ApiError {
    fn from(e: StatsError) -> Self {
        ApiError::validation(e.to_string())
    }
}

/// Persisted state of every event and registered worker.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub schema_version: u32,
    pub workers: BTreeMap<String, Worker>,
    pub events: BTreeMap<String, EventPipeline>,
}

/// Where snapshots live. Implementations must make `save` atomic.
pub trait SnapshotStore: Send + Sync {
    fn load(&self) -> Result<Option<String>, ApiError>;
    fn save(&self, json: &str) -> Result<(), ApiError>;
}

/// Writes the snapshot to a sibling temp file and renames it into place.
#[derive(Debug, Clone)]
pub struct FileStore {
    path: PathBuf,
}

impl FileStore {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        FileStore { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

fn io_error(path: &Path, e: std::io::Error) -> ApiError {
    ApiError::new(ErrorCode::Internal, format!("{}: {e}", path.display()))
}

impl SnapshotStore for FileStore {
    fn load(&self) -> Result<Option<String>, ApiError> {
        match fs::read_to_string(&self.path) {
            Ok(s) => Ok(Some(s)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(io_error(&self.path, e)),
        }
    }

    fn save(&self, json: &str) -> Result<(), ApiError> {
        let mut tmp = self.path.clone().into_os_string();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        let mut file = fs::File::create(&tmp).map_err(|e| io_error(&tmp, e))?;
        file.write_all(json.as_bytes()).map_err(|e| io_error(&tmp, e))?;
        file.sync_all().map_err(|e| io_error(&tmp, e))?;
        fs::rename(&tmp, &self.path).map_err(|e| io_error(&self.path, e))
    }
}

/// Keeps the latest snapshot in memory; for tests and throwaway servers.
#[derive(Debug, Default)]
pub struct MemoryStore {
    json: Mutex<Option<String>>,
}

impl SnapshotStore for MemoryStore {
    fn load(&self) -> Result<Option<String>, ApiError> {
        Ok(self.json.lock().expect("store lock").clone())
    }

    fn save(&self, json: &str) -> Result<(), ApiError> {
        *self.json.lock().expect("store lock") = Some(json.to_string());
        Ok(())
    }
}

impl<S: SnapshotStore + ?Sized> SnapshotStore for Arc<S> {
    fn load(&self) -> Result<Option<String>, ApiError> {
        (**self).load()
    }

    fn save(&self, json: &str) -> Result<(), ApiError> {
        (**self).save(json)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateEventRequest {
    pub event_id: String,
    pub hashtag: String,
    pub posts: Vec<Post>,
    pub clusters: Vec<ClusterAssignment>,
    /// Fields merged over the default quota configuration.
    #[serde(default)]
    pub quotas: Option<Value>,
    #[serde(default)]
    pub sample_cap: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CreatedEvent {
    pub event_id: String,
    pub moment_count: usize,
    pub estimated_cost_cents: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoryExport {
    pub event_id: String,
    pub text: String,
    pub paragraphs: Vec<Paragraph>,
    pub provenance: BTreeMap<String, String>,
}

impl StoryExport {
    pub fn from_story(story: &Story) -> Result<Self, ApiError> {
        Ok(StoryExport {
            event_id: story.event_id.clone(),
            text: render_story(story)?,
            paragraphs: story.paragraphs.clone(),
            provenance: story.provenance.clone(),
        })
    }
}

/// Overlays `overrides` (a JSON object) on the default quotas.
pub fn quotas_with_overrides(overrides: Option<&Value>) -> Result<QuotaConfig, ApiError> {
    let mut base = serde_json::to_value(QuotaConfig::default()).expect("quota config serializes");
    match overrides {
        None | Some(Value::Null) => {}
        Some(Value::Object(fields)) => {
            let target = base.as_object_mut().expect("quota config is an object");
            for (k, v) in fields {
                if !target.contains_key(k) {
                    return Err(ApiError::validation(format!("unknown quota field {k}")));
                }
                target.insert(k.clone(), v.clone());
            }
        }
        Some(_) => return Err(ApiError::validation("quota overrides must be an object")),
    }
    let text = base.to_string();
    Ok(QuotaConfig::from_json(&text)?)
}

struct Persisted {
    workers: BTreeMap<String, Worker>,
    events: BTreeMap<String, Value>,
}

/// Holds every event pipeline. Mutations on one event are serialized by that
/// event's lock; each committed mutation is persisted before returning.
pub struct Service {
    store: Box<dyn SnapshotStore>,
    events: RwLock<BTreeMap<String, Arc<Mutex<EventPipeline>>>>,
    task_index: RwLock<BTreeMap<String, String>>,
    persisted: Mutex<Persisted>,
}

fn poisoned<T>(_: T) -> ApiError {
    ApiError::new(ErrorCode::Internal, "state lock poisoned")
}

impl Service {
    /// Opens the service, restoring any snapshot the store holds.
    pub fn open(store: impl SnapshotStore + 'static) -> Result<Self, ApiError> {
        let snapshot = match store.load()? {
            Some(json) => {
                let snap: Snapshot = serde_json::from_str(&json)
                    .map_err(|e| ApiError::new(ErrorCode::Internal, format!("unreadable snapshot: {e}")))?;
                if snap.schema_version != SCHEMA_VERSION {
                    return Err(ApiError::new(
                        ErrorCode::Internal,
                        format!("snapshot schema_version {} is not {SCHEMA_VERSION}", snap.schema_version),
                    ));
                }
                snap
            }
            None => Snapshot { schema_version: SCHEMA_VERSION, workers: BTreeMap::new(), events: BTreeMap::new() },
        };
        let mut events = BTreeMap::new();
        let mut task_index = BTreeMap::new();
        let mut cached = BTreeMap::new();
        for (id, pipeline) in snapshot.events {
            for task in pipeline.tasks() {
                task_index.insert(task.id.clone(), id.clone());
            }
            cached.insert(id.clone(), serde_json::to_value(&pipeline).expect("pipeline serializes"));
            events.insert(id, Arc::new(Mutex::new(pipeline)));
        }
        Ok(Service {
            store: Box::new(store),
            events: RwLock::new(events),
            task_index: RwLock::new(task_index),
            persisted: Mutex::new(Persisted { workers: snapshot.workers, events: cached }),
        })
    }

    pub fn in_memory() -> Self {
        Service::open(MemoryStore::default()).expect("empty memory store opens")
    }

    fn write(&self, persisted: &Persisted) -> Result<(), ApiError> {
        #[derive(Serialize)]
        struct Out<'a> {
            schema_version: u32,
            workers: &'a BTreeMap<String, Worker>,
            events: &'a BTreeMap<String, Value>,
        }
        let json = serde_json::to_string(&Out {
            schema_version: SCHEMA_VERSION,
            workers: &persisted.workers,
            events: &persisted.events,
        })
        .expect("snapshot serializes");
        self.store.save(&json)
    }

    /// Persists one event. Called while the event lock is held so snapshot
    /// order matches mutation order.
    fn commit(&self, pipeline: &EventPipeline) -> Result<(), ApiError> {
        for task in pipeline.tasks() {
            let mut index = self.task_index.write().map_err(poisoned)?;
            if !index.contains_key(&task.id) {
                index.insert(task.id.clone(), pipeline.event_id().to_string());
            }
        }
        let mut persisted = self.persisted.lock().map_err(poisoned)?;
        persisted
            .events
            .insert(pipeline.event_id().to_string(), serde_json::to_value(pipeline).expect("pipeline serializes"));
        self.write(&persisted)
    }

    fn event(&self, event_id: &str) -> Result<Arc<Mutex<EventPipeline>>, ApiError> {
        self.events
            .read()
            .map_err(poisoned)?
            .get(event_id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("event {event_id}")))
    }

    fn event_for_task(&self, task_id: &str) -> Result<Arc<Mutex<EventPipeline>>, ApiError> {
        let event_id = self
            .task_index
            .read()
            .map_err(poisoned)?
            .get(task_id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("task {task_id}")))?;
        self.event(&event_id)
    }

    pub fn event_ids(&self) -> Result<Vec<String>, ApiError> {
        Ok(self.events.read().map_err(poisoned)?.keys().cloned().collect())
    }

    /// Runs `f` against a consistent view of one event.
    pub fn with_event<T>(&self, event_id: &str, f: impl FnOnce(&EventPipeline) -> T) -> Result<T, ApiError> {
        let event = self.event(event_id)?;
        let guard = event.lock().map_err(poisoned)?;
        Ok(f(&guard))
    }

    pub fn register_worker(&self, worker: Worker) -> Result<Worker, ApiError> {
        if worker.id.trim().is_empty() {
            return Err(ApiError::validation("worker id must not be empty"));
        }
        let zero = crate::Rational::from_integer(0);
        let one = crate::Rational::from_integer(1);
        if !(zero..=one).contains(&worker.approval_rating) {
            return Err(ApiError::validation("approval_rating must lie in [0, 1]"));
        }
        let mut persisted = self.persisted.lock().map_err(poisoned)?;
        if persisted.workers.get(&worker.id) == Some(&worker) {
            return Ok(worker);
        }
        persisted.workers.insert(worker.id.clone(), worker.clone());
        self.write(&persisted)?;
        Ok(worker)
    }

    pub fn worker(&self, worker_id: &str) -> Result<Worker, ApiError> {
        self.persisted
            .lock()
            .map_err(poisoned)?
            .workers
            .get(worker_id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("worker {worker_id}")))
    }

    /// Ingests an event, plans its first tasks and persists it.
    pub fn create_event(&self, request: CreateEventRequest, now_ms: u64) -> Result<CreatedEvent, ApiError> {
        let quotas = quotas_with_overrides(request.quotas.as_ref())?;
        let mut posts = BTreeMap::new();
        for post in request.posts {
            let id = post.id.clone();
            if posts.insert(id.clone(), post).is_some() {
                return Err(ApiError::validation(format!("duplicate post id {id}")));
            }
        }
        let mut event = build_event(&request.event_id, &request.hashtag, posts, request.clusters)?;
        if let Some(cap) = request.sample_cap {
            event = sample_corpus(&event, cap, request.seed)?;
        }
        let mut pipeline = EventPipeline::new(event, quotas)?;
        pipeline.plan_tasks(now_ms);
        pipeline.drain_journal();
        let created = CreatedEvent {
            event_id: pipeline.event_id().to_string(),
            moment_count: pipeline.event().moments.len(),
            estimated_cost_cents: pipeline.estimated_cost(),
        };
        let mut events = self.events.write().map_err(poisoned)?;
        if events.contains_key(&created.event_id) {
            return Err(ApiError::new(ErrorCode::Conflict, format!("event {} already exists", created.event_id)));
        }
        self.commit(&pipeline)?;
        events.insert(created.event_id.clone(), Arc::new(Mutex::new(pipeline)));
        Ok(created)
    }

    /// Requeues stale leases, promotes stages and plans the next tasks.
    pub fn advance(&self, event_id: &str, now_ms: u64) -> Result<StageReport, ApiError> {
        let event = self.event(event_id)?;
        let mut pipeline = event.lock().map_err(poisoned)?;
        let expired = pipeline.expire_leases(now_ms);
        let report = pipeline.advance()?;
        let planned = pipeline.plan_tasks(now_ms);
        pipeline.drain_journal();
        if !expired.is_empty() || !report.is_noop() || !planned.is_empty() {
            self.commit(&pipeline)?;
        }
        Ok(report)
    }

    pub fn status(&self, event_id: &str) -> Result<PipelineStatus, ApiError> {
        self.with_event(event_id, EventPipeline::status)
    }

    /// The finished story; a conflict until the event is complete.
    pub fn story(&self, event_id: &str) -> Result<StoryExport, ApiError> {
        let story = self.with_event(event_id, |p| p.story().cloned())?;
        let story =
            story.ok_or_else(|| ApiError::new(ErrorCode::Conflict, format!("event {event_id} is not complete")))?;
        StoryExport::from_story(&story)
    }

    /// The first open task, across events in id order, the worker may take.
    pub fn next_task(&self, worker_id: &str, kind: Option<TaskKind>) -> Result<Option<TaskView>, ApiError> {
        let worker = self.worker(worker_id)?;
        let events: Vec<_> = self.events.read().map_err(poisoned)?.values().cloned().collect();
        for event in events {
            let pipeline = event.lock().map_err(poisoned)?;
            if let Some(task) = pipeline.next_task_for(&worker, kind) {
                return Ok(Some(pipeline.view(&task.id)?));
            }
        }
        Ok(None)
    }

    pub fn task(&self, task_id: &str) -> Result<TaskView, ApiError> {
        let event = self.event_for_task(task_id)?;
        let pipeline = event.lock().map_err(poisoned)?;
        Ok(pipeline.view(task_id)?)
    }

    pub fn assign(&self, task_id: &str, worker_id: &str, now_ms: u64) -> Result<TaskView, ApiError> {
        let worker = self.worker(worker_id)?;
        let event = self.event_for_task(task_id)?;
        let mut pipeline = event.lock().map_err(poisoned)?;
        pipeline.assign_task(task_id, &worker, now_ms)?;
        pipeline.drain_journal();
        self.commit(&pipeline)?;
        Ok(pipeline.view(task_id)?)
    }

    pub fn submit(
        &self,
        task_id: &str,
        worker_id: &str,
        body: TaskResponse,
        now_ms: u64,
    ) -> Result<SubmitOutcome, ApiError> {
        let event = self.event_for_task(task_id)?;
        let mut pipeline = event.lock().map_err(poisoned)?;
        let outcome = pipeline.submit_task(task_id, worker_id, body, now_ms)?;
        pipeline.drain_journal();
        if !outcome.replay {
            self.commit(&pipeline)?;
        }
        Ok(outcome)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::TaskState;
    use crate::model::Platform;
    use crate::Rational;

    fn request(id: &str) -> CreateEventRequest {
        let posts: Vec<Post> = (0..6)
            .map(|k| Post {
                id: format!("p{k}"),
                author: "a".into(),
                ts_ms: k,
                text: format!("Germany goal {k}"),
                platform: Platform::Twitter,
                media: vec![],
                extra: BTreeMap::new(),
            })
            .collect();
        CreateEventRequest {
            event_id: id.into(),
            hashtag: "#GERvsBRA".into(),
            posts,
            clusters: vec![
                ClusterAssignment {
                    cluster_id: "a".into(),
                    label: None,
                    post_ids: vec!["p0".into(), "p1".into(), "p2".into()],
                },
                ClusterAssignment {
                    cluster_id: "b".into(),
                    label: None,
                    post_ids: vec!["p3".into(), "p4".into(), "p5".into()],
                },
            ],
            quotas: None,
            sample_cap: None,
            seed: 0,
        }
    }

    fn worker(id: &str) -> Worker {
        Worker { id: id.into(), approval_rating: Rational::new(19, 20) }
    }

    #[test]
    fn create_reports_cost_and_rejects_duplicates() {
        let service = Service::in_memory();
        let created = service.create_event(request("ev"), 0).unwrap();
        assert_eq!(created, CreatedEvent { event_id: "ev".into(), moment_count: 2, estimated_cost_cents: 770 });
        assert_eq!(service.create_event(request("ev"), 0).unwrap_err().code, ErrorCode::Conflict);
    }

    #[test]
    fn quota_overrides_merge_and_reject_unknown_fields() {
        let q = quotas_with_overrides(Some(&serde_json::json!({"votes_per_moment": 7}))).unwrap();
        assert_eq!(q.votes_per_moment, 7);
        assert_eq!(q.summaries_per_moment, 3);
        let err = quotas_with_overrides(Some(&serde_json::json!({"votes": 7}))).unwrap_err();
        assert_eq!(err.code, ErrorCode::Validation);
    }

    #[test]
    fn error_codes_map_to_statuses() {
        let auth: ApiError = EngineError::Authorization { worker_id: "w".into(), task_id: "t".into() }.into();
        assert_eq!((auth.code, auth.code.http_status()), (ErrorCode::Authorization, 403));
        let nf: ApiError = EngineError::NotFound("x".into()).into();
        assert_eq!(nf.code.http_status(), 404);
        let json = serde_json::to_value(&auth).unwrap();
        assert_eq!(json["code"], "authorization");
        assert_eq!(json["details"]["task_id"], "t");
    }

    #[test]
    fn snapshot_survives_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.json");
        let task_id;
        {
            let service = Service::open(FileStore::new(&path)).unwrap();
            service.register_worker(worker("w1")).unwrap();
            service.create_event(request("ev"), 0).unwrap();
            let view = service.next_task("w1", None).unwrap().unwrap();
            task_id = view.task.id.clone();
            service.assign(&task_id, "w1", 5).unwrap();
        }
        let raw: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(raw["schema_version"], SCHEMA_VERSION);
        let service = Service::open(FileStore::new(&path)).unwrap();
        let view = service.task(&task_id).unwrap();
        assert_eq!(view.task.state, TaskState::Assigned);
        assert_eq!(view.task.assignee.as_deref(), Some("w1"));
        assert_eq!(service.worker("w1").unwrap(), worker("w1"));
    }

    #[test]
    fn incomplete_story_is_a_conflict_and_unknown_worker_is_not_found() {
        let service = Service::in_memory();
        service.create_event(request("ev"), 0).unwrap();
        assert_eq!(service.story("ev").unwrap_err().code, ErrorCode::Conflict);
        assert_eq!(service.next_task("ghost", None).unwrap_err().code, ErrorCode::NotFound);
        assert_eq!(service.story("nope").unwrap_err().code, ErrorCode::NotFound);
    }

    #[test]
    fn wrong_worker_submit_is_authorization() {
        let service = Service::in_memory();
        service.register_worker(worker("w1")).unwrap();
        service.create_event(request("ev"), 0).unwrap();
        let id = service.next_task("w1", None).unwrap().unwrap().task.id;
        service.assign(&id, "w1", 1).unwrap();
        let err = service.submit(&id, "w2", TaskResponse::AskQuestion { text: "Who?".into() }, 2).unwrap_err();
        assert_eq!(err.code, ErrorCode::Authorization);
    }

    #[test]
    fn schema_mismatch_is_refused() {
        let store = MemoryStore::default();
        store.save(r#"{"schema_version":99,"workers":{},"events":{}}"#).unwrap();
        assert!(Service::open(store).is_err());
    }
}

//! Seeded synthetic workers and an end-to-end simulation loop.
//!
//! Every random choice draws from a generator keyed on
//! `(seed, worker_id, task_id)`, so a response depends only on the worker
//! profile and the task, never on scheduling order.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{
    EngineError, EventPipeline, QuotaConfig, StageChange, TaskPayload, TaskResponse, TaskState, TaskView, Transition,
    Worker,
};
use crate::model::{Event, EventPhase, NarrativeCategory, Paragraph, Post, PromptGrid, Story};
use crate::rational::{self, Rational};
use crate::service::{ApiError, Service};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("pool has {available} eligible workers but the quotas need at least {required}")]
    InsufficientPool { required: usize, available: usize },
    #[error("no eligible worker for task {0}")]
    Stalled(String),
    #[error("worker {worker_id} is not assigned task {task_id}")]
    NotAssigned { worker_id: String, task_id: String },
    #[error("simulation did not complete within {0} rounds")]
    RoundLimit(usize),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Service(ApiError),
    #[error("pool file: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quality {
    Diligent,
    Lazy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerProfile {
    pub worker_id: String,
    #[serde(with = "rational::serde_text")]
    pub approval_rating: Rational,
    #[serde(with = "rational::serde_text")]
    pub watched_probability: Rational,
    pub quality: Quality,
    pub seed: u64,
}

impl WorkerProfile {
    pub fn diligent(id: impl Into<String>, seed: u64) -> Self {
        WorkerProfile {
            worker_id: id.into(),
            approval_rating: Rational::new(19, 20),
            watched_probability: Rational::new(1, 2),
            quality: Quality::Diligent,
            seed,
        }
    }

    pub fn lazy(id: impl Into<String>, seed: u64) -> Self {
        WorkerProfile {
            quality: Quality::Lazy,
            watched_probability: Rational::from_integer(0),
            ..WorkerProfile::diligent(id, seed)
        }
    }

    pub fn worker(&self) -> Worker {
        Worker { id: self.worker_id.clone(), approval_rating: self.approval_rating }
    }
}

/// Reads a JSON array of profiles.
pub fn parse_pool(json: &str) -> Result<Vec<WorkerProfile>, SimError> {
    let pool: Vec<WorkerProfile> = serde_json::from_str(json).map_err(|e| SimError::Pool(e.to_string()))?;
    let zero = Rational::from_integer(0);
    let one = Rational::from_integer(1);
    for p in &pool {
        if !(zero..=one).contains(&p.approval_rating) || !(zero..=one).contains(&p.watched_probability) {
            return Err(SimError::Pool(format!("{}: rates must lie in [0, 1]", p.worker_id)));
        }
    }
    Ok(pool)
}

/// A pool of `diligent` careful workers followed by `lazy` careless ones.
pub fn standard_pool(diligent: usize, lazy: usize) -> Vec<WorkerProfile> {
    let mut pool: Vec<WorkerProfile> =
        (0..diligent).map(|i| WorkerProfile::diligent(format!("d{i:02}"), 1000 + i as u64)).collect();
    pool.extend((0..lazy).map(|i| WorkerProfile::lazy(format!("z{i:02}"), 2000 + i as u64)));
    pool
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>, mut hash: u64) -> u64 {
    for b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Platform-stable key for `(seed, a, b)`.
pub fn derive_key(seed: u64, a: &str, b: &str) -> u64 {
    let mut h = fnv1a(seed.to_le_bytes(), 0xcbf2_9ce4_8422_2325);
    h = fnv1a(a.bytes().chain([0xff]), h);
    fnv1a(b.bytes(), h)
}

fn rng_for(seed: u64, worker_id: &str, task_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_key(seed, worker_id, task_id))
}

fn bernoulli(rng: &mut ChaCha8Rng, p: Rational) -> bool {
    let (num, den) = (*p.numer(), *p.denom());
    num > 0 && rng.random_range(0..den) < num
}

const STOPWORDS: &[&str] = &[
    "the", "and", "for", "are", "but", "not", "you", "all", "any", "can", "had", "her", "was", "one", "our", "out",
    "has", "him", "his", "how", "its", "who", "did", "yes", "she", "they", "them", "this", "that", "with", "from",
    "have", "what", "when", "were", "will", "your", "been", "than", "then", "into", "just", "about", "there", "their",
    "would", "which", "while", "these", "those", "being", "also", "some", "very", "here",
];

const CAPITALIZED_STOPWORDS: &[&str] = &[
    "The", "A", "An", "I", "It", "We", "He", "She", "They", "This", "That", "What", "Who", "Why", "How", "And", "But",
    "So", "Is", "Are", "Was", "My", "Our", "In", "On", "At", "Of", "To", "RT", "OMG", "Yes", "No", "If", "When",
];

/// Words that never count as content: common function words plus every word
/// of the default prompt grid, which diligent simulated writers echo.
fn ignored_words() -> &'static BTreeSet<String> {
    static WORDS: OnceLock<BTreeSet<String>> = OnceLock::new();
    WORDS.get_or_init(|| {
        let mut words: BTreeSet<String> = STOPWORDS.iter().map(|s| s.to_string()).collect();
        for template in PromptGrid::default().templates() {
            words.extend(raw_words(&template.text));
        }
        words
    })
}

fn raw_words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase).collect()
}

/// Lower-cased alphanumeric words of three or more characters, minus stopwords.
pub fn content_tokens(text: &str) -> BTreeSet<String> {
    let ignored = ignored_words();
    raw_words(text).into_iter().filter(|w| w.chars().count() >= 3 && !ignored.contains(w)).collect()
}

fn paragraph_tokens(p: &Paragraph) -> BTreeSet<String> {
    p.sentences.values().flat_map(|s| content_tokens(s)).collect()
}

pub fn jaccard(a: &BTreeSet<String>, b: &BTreeSet<String>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Names and hashtags worth asking about, in first-appearance order.
pub fn question_topics(posts: &[Post]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut topics = Vec::new();
    for post in posts {
        for raw in post.text.split_whitespace() {
            let token = raw.trim_matches(|c: char| !(c.is_alphanumeric() || c == '#'));
            let token = token.trim_end_matches('#');
            let is_hashtag = token.starts_with('#') && token.len() > 1;
            let is_name = token.chars().next().is_some_and(char::is_uppercase)
                && token.chars().count() >= 2
                && token.chars().all(char::is_alphanumeric)
                && !CAPITALIZED_STOPWORDS.contains(&token);
            if (is_hashtag || is_name) && seen.insert(token.to_string()) {
                topics.push(token.to_string());
            }
        }
    }
    topics
}

fn question_subject(question: &str) -> &str {
    let trimmed = question.trim().trim_end_matches('?');
    ["Who is ", "What is "].iter().find_map(|prefix| trimmed.strip_prefix(prefix)).unwrap_or(trimmed).trim()
}

fn snippet(text: &str) -> String {
    let words: Vec<&str> = text.split_whitespace().take(25).collect();
    let mut s = words.join(" ");
    if !s.ends_with(['.', '!', '?']) {
        s.push('.');
    }
    s
}

fn prompt_head(text: &str) -> &str {
    text.split('.').next().unwrap_or(text).trim()
}

const LAZY_SENTENCE: &str = "Things happened.";

/// Produces the worker's answer to an assigned task.
pub fn simulate_response(view: &TaskView, profile: &WorkerProfile) -> Result<TaskResponse, SimError> {
    simulate_response_with(view, profile, 0.5)
}

/// As [`simulate_response`], with the content overlap needed to call two
/// paragraphs replaceable.
pub fn simulate_response_with(
    view: &TaskView,
    profile: &WorkerProfile,
    overlap_threshold: f64,
) -> Result<TaskResponse, SimError> {
    let task = &view.task;
    if task.state != TaskState::Assigned || task.assignee.as_deref() != Some(profile.worker_id.as_str()) {
        return Err(SimError::NotAssigned { worker_id: profile.worker_id.clone(), task_id: task.id.clone() });
    }
    let mut rng = rng_for(profile.seed, &profile.worker_id, &task.id);
    let diligent = profile.quality == Quality::Diligent;
    let response = match &view.payload {
        TaskPayload::AskQuestion { posts, .. } => {
            let topics = question_topics(posts);
            let text = if topics.is_empty() {
                "What is happening here?".to_string()
            } else {
                let topic = &topics[rng.random_range(0..topics.len())];
                let lead = if topic.starts_with('#') { "What" } else { "Who" };
                format!("{lead} is {topic}?")
            };
            TaskResponse::AskQuestion { text }
        }
        TaskPayload::AnswerQuestion { posts, question, hashtag, .. } => {
            let subject = question_subject(&question.text);
            let needle = subject.to_lowercase();
            let k = posts.iter().filter(|p| p.text.to_lowercase().contains(&needle)).count();
            TaskResponse::AnswerQuestion { text: format!("{subject} is mentioned in {k} posts about {hashtag}.") }
        }
        TaskPayload::WriteSummary { posts, phase_hint, prompts, .. } => {
            let phase: EventPhase = *phase_hint;
            let sentences = if diligent {
                let mut order: Vec<usize> = (0..posts.len()).collect();
                for i in (1..order.len()).rev() {
                    order.swap(i, rng.random_range(0..=i));
                }
                NarrativeCategory::ALL
                    .iter()
                    .enumerate()
                    .map(|(i, &category)| {
                        let head = prompts
                            .iter()
                            .find(|t| t.phase == phase && t.category == category)
                            .map_or(category.as_str(), |t| prompt_head(&t.text));
                        let post = &posts[order[i % order.len().max(1)]];
                        (category, format!("{head}: {}", snippet(&post.text)))
                    })
                    .collect()
            } else {
                NarrativeCategory::ALL.iter().map(|&c| (c, LAZY_SENTENCE.to_string())).collect()
            };
            TaskResponse::WriteSummary { selected_phase: phase, sentences }
        }
        TaskPayload::VoteSummary { posts, candidates, .. } => {
            let watched_event = bernoulli(&mut rng, profile.watched_probability);
            let first = candidates.first().map(|c| c.id.clone()).unwrap_or_default();
            let paragraph_id = if diligent {
                let vocab: BTreeSet<String> = posts.iter().flat_map(|p| content_tokens(&p.text)).collect();
                let mut best: Option<(&str, f64)> = None;
                let mut sorted: Vec<&Paragraph> = candidates.iter().collect();
                sorted.sort_by(|a, b| a.id.cmp(&b.id));
                for c in sorted {
                    let tokens = paragraph_tokens(c);
                    let score = if tokens.is_empty() {
                        0.0
                    } else {
                        tokens.intersection(&vocab).count() as f64 / tokens.len() as f64
                    };
                    if best.is_none_or(|(_, s)| score > s) {
                        best = Some((&c.id, score));
                    }
                }
                best.map_or(first, |(id, _)| id.to_string())
            } else {
                first
            };
            TaskResponse::VoteSummary { paragraph_id, watched_event }
        }
        TaskPayload::Deduplicate { anchor, candidates, .. } => {
            if !diligent {
                TaskResponse::Deduplicate { replaceable_ids: BTreeSet::new(), representative_vote: anchor.id.clone() }
            } else {
                let anchor_tokens = paragraph_tokens(anchor);
                let mut judged: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
                for c in candidates {
                    let tokens = paragraph_tokens(c);
                    if jaccard(&anchor_tokens, &tokens) >= overlap_threshold {
                        judged.insert(c.id.clone(), tokens);
                    }
                }
                let replaceable_ids: BTreeSet<String> = judged.keys().cloned().collect();
                judged.insert(anchor.id.clone(), anchor_tokens);
                // Most central member of the judged set; ids ascend so `>` keeps the smallest on ties.
                let mut representative = anchor.id.clone();
                let mut best = f64::NEG_INFINITY;
                for (id, tokens) in &judged {
                    let centrality: f64 =
                        judged.iter().filter(|(other, _)| *other != id).map(|(_, t)| jaccard(tokens, t)).sum();
                    if centrality > best {
                        best = centrality;
                        representative = id.clone();
                    }
                }
                TaskResponse::Deduplicate { replaceable_ids, representative_vote: representative }
            }
        }
    };
    Ok(response)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum TranscriptEntry {
    Task(Transition),
    Stage { change: StageChange },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulationOutcome {
    pub story: Story,
    /// The vote-winning paragraph of each moment, in moment order.
    pub winners: Vec<Paragraph>,
    pub transcript: Vec<TranscriptEntry>,
}

impl SimulationOutcome {
    /// One JSON object per line.
    pub fn transcript_jsonl(&self) -> String {
        transcript_jsonl(&self.transcript)
    }
}

pub fn transcript_jsonl(entries: &[TranscriptEntry]) -> String {
    entries.iter().map(|e| serde_json::to_string(e).expect("transcript entries serialize") + "\n").collect()
}

/// Chooses the least-loaded eligible worker for a task, breaking ties by a
/// seeded hash. Depends only on pipeline state, so a restarted run makes the
/// same choice.
pub fn pick_worker<'a>(
    pipeline: &EventPipeline,
    task_id: &str,
    pool: &'a [WorkerProfile],
    seed: u64,
) -> Option<&'a WorkerProfile> {
    let mut load: BTreeMap<&str, usize> = BTreeMap::new();
    for task in pipeline.tasks() {
        if let Some(w) = task.assignee.as_deref() {
            *load.entry(w).or_default() += 1;
        }
    }
    pool.iter().filter(|p| pipeline.check_assignable(task_id, &p.worker()).is_ok()).min_by_key(|p| {
        (load.get(p.worker_id.as_str()).copied().unwrap_or(0), derive_key(seed, &p.worker_id, task_id), &p.worker_id)
    })
}

/// Per-run profile seeds mix in the run seed.
pub fn seeded_pool(pool: &[WorkerProfile], seed: u64) -> Vec<WorkerProfile> {
    pool.iter()
        .map(|p| WorkerProfile { seed: derive_key(seed, &p.worker_id, &p.seed.to_string()), ..p.clone() })
        .collect()
}

pub fn check_pool(pool: &[WorkerProfile], quotas: &QuotaConfig) -> Result<(), SimError> {
    let available = pool.iter().filter(|p| p.approval_rating >= quotas.min_approval_rating).count();
    let required = quotas.required_workers();
    if available < required {
        return Err(SimError::InsufficientPool { required, available });
    }
    Ok(())
}

const MAX_ROUNDS: usize = 1_000;

/// The winning paragraph of every decided moment, in moment order.
pub fn moment_winners(pipeline: &EventPipeline) -> Vec<Paragraph> {
    pipeline
        .event()
        .moments
        .iter()
        .filter_map(|m| pipeline.winners().get(&m.id))
        .filter_map(|tally| pipeline.paragraph(&tally.winner).cloned())
        .collect()
}

/// Runs plan → assign → simulate → submit → advance until the event is
/// complete, on a logical clock.
pub fn run_simulation(
    event: Event,
    quotas: QuotaConfig,
    pool: &[WorkerProfile],
    seed: u64,
) -> Result<SimulationOutcome, SimError> {
    check_pool(pool, &quotas)?;
    let pool = seeded_pool(pool, seed);
    let mut pipeline = EventPipeline::new(event, quotas)?;
    let mut transcript = Vec::new();
    let mut clock = 0u64;
    for _ in 0..MAX_ROUNDS {
        pipeline.plan_tasks(clock);
        let open: Vec<String> = pipeline.open_tasks().map(|t| t.id.clone()).collect();
        for task_id in &open {
            clock += 1;
            let profile =
                pick_worker(&pipeline, task_id, &pool, seed).ok_or_else(|| SimError::Stalled(task_id.clone()))?;
            pipeline.assign_task(task_id, &profile.worker(), clock)?;
            let view = pipeline.view(task_id)?;
            let response = simulate_response(&view, profile)?;
            pipeline.submit_task(task_id, &profile.worker_id, response, clock)?;
        }
        transcript.extend(pipeline.drain_journal().into_iter().map(TranscriptEntry::Task));
        let report = pipeline.advance()?;
        transcript.extend(report.changes.iter().cloned().map(|change| TranscriptEntry::Stage { change }));
        if let Some(story) = pipeline.story() {
            return Ok(SimulationOutcome { story: story.clone(), winners: moment_winners(&pipeline), transcript });
        }
        if open.is_empty() && report.is_noop() {
            let stuck = pipeline.tasks().find(|t| t.state != TaskState::Approved).map(|t| t.id.clone());
            return Err(SimError::Stalled(stuck.unwrap_or_default()));
        }
    }
    Err(SimError::RoundLimit(MAX_ROUNDS))
}

/// What one [`service_step`] did.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Submitted(String),
    Advanced,
    Complete,
}

/// Logical time derived from persisted task timestamps, so a restarted
/// service continues the same clock.
pub fn logical_now(pipeline: &EventPipeline) -> u64 {
    pipeline
        .tasks()
        .flat_map(|t| [Some(t.created_ms), t.leased_ms, t.submitted_ms])
        .flatten()
        .max()
        .map_or(0, |t| t + 1)
}

/// Drives one committed action of a simulated run through a [`Service`]:
/// either one assign-and-submit, or one advance when nothing is open. Every
/// choice is derived from persisted state, so the service may be dropped and
/// reopened between steps without changing the outcome.
pub fn service_step(service: &Service, event_id: &str, pool: &[WorkerProfile], seed: u64) -> Result<Step, SimError> {
    let pool = seeded_pool(pool, seed);
    let (next, now, done) = service
        .with_event(event_id, |p| {
            let mut open: Vec<&str> = p.open_tasks().map(|t| t.id.as_str()).collect();
            open.sort_unstable();
            let next = open.first().map(|id| (id.to_string(), pick_worker(p, id, &pool, seed).cloned()));
            (next, logical_now(p), p.story().is_some())
        })
        .map_err(SimError::Service)?;
    match next {
        Some((task_id, Some(profile))) => {
            service.register_worker(profile.worker()).map_err(SimError::Service)?;
            let view = service.assign(&task_id, &profile.worker_id, now).map_err(SimError::Service)?;
            let response = simulate_response(&view, &profile)?;
            service.submit(&task_id, &profile.worker_id, response, now).map_err(SimError::Service)?;
            Ok(Step::Submitted(task_id))
        }
        Some((task_id, None)) => Err(SimError::Stalled(task_id)),
        None if done => Ok(Step::Complete),
        None => {
            let report = service.advance(event_id, now).map_err(SimError::Service)?;
            let opened = service.with_event(event_id, |p| p.open_tasks().count()).map_err(SimError::Service)?;
            if report.is_noop() && opened == 0 {
                return Err(SimError::Stalled(event_id.to_string()));
            }
            Ok(Step::Advanced)
        }
    }
}

//! Per-event workflow engine.
//!
//! An [`EventPipeline`] owns one event's tasks and submissions. Each moment
//! walks `Questions → Answers → Summaries → Voting → Done`; once every moment
//! is done the event runs de-duplication, assembles the story and completes.
//! Tasks are spawned by [`EventPipeline::plan_tasks`] exactly up to quota and
//! move through `Open → Assigned → Submitted → Approved`, with
//! `Assigned → Expired → Open` when a lease lapses.
//!
//! The pipeline is a plain value: callers serialize access (one writer per
//! event) and pass the clock in, so runs are reproducible.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::aggregation::{self, AggregationError, DuplicateGroup, SimilarityJudgment, Tally, Vote};
use crate::model::{
    validate_paragraph, Answer, Event, EventPhase, ModelError, Moment, NarrativeCategory, Paragraph, Post, PromptGrid,
    PromptTemplate, Question, Story, Violations,
};
use crate::rational::{self, Rational};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EngineError {
    #[error("validation failed: {message}")]
    Validation { message: String, violations: Option<Violations> },
    #[error("worker {worker_id} is not eligible: {reason}")]
    Eligibility { worker_id: String, reason: String },
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("worker {worker_id} may not act on task {task_id}")]
    Authorization { worker_id: String, task_id: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
}

impl EngineError {
    fn validation(message: impl Into<String>) -> Self {
        EngineError::Validation { message: message.into(), violations: None }
    }
}

impl From<ModelError> for EngineError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidParagraph { violations, .. } => {
                EngineError::Validation { message: violations.to_string(), violations: Some(violations) }
            }
            other => EngineError::validation(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    AskQuestion,
    AnswerQuestion,
    WriteSummary,
    VoteSummary,
    Deduplicate,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::AskQuestion,
        TaskKind::AnswerQuestion,
        TaskKind::WriteSummary,
        TaskKind::VoteSummary,
        TaskKind::Deduplicate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::AskQuestion => "ask_question",
            TaskKind::AnswerQuestion => "answer_question",
            TaskKind::WriteSummary => "write_summary",
            TaskKind::VoteSummary => "vote_summary",
            TaskKind::Deduplicate => "deduplicate",
        }
    }

    fn artifact_prefix(self) -> char {
        match self {
            TaskKind::AskQuestion => 'q',
            TaskKind::AnswerQuestion => 'a',
            TaskKind::WriteSummary => 'p',
            TaskKind::VoteSummary => 'v',
            TaskKind::Deduplicate => 'j',
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        TaskKind::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| format!("unknown task kind {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Open,
    Assigned,
    Submitted,
    Approved,
    Expired,
}

impl TaskState {
    pub fn can_transition_to(self, next: TaskState) -> bool {
        use TaskState::*;
        matches!(
            (self, next),
            (Open, Assigned) | (Assigned, Submitted) | (Submitted, Approved) | (Assigned, Expired) | (Expired, Open)
        )
    }

    pub fn is_done(self) -> bool {
        matches!(self, TaskState::Submitted | TaskState::Approved)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentStage {
    Questions,
    Answers,
    Summaries,
    Voting,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventStage {
    Collecting,
    Dedup,
    Assembly,
    Complete,
}

fn default_lease_ms() -> u64 {
    30 * 60 * 1000
}

fn default_min_support() -> usize {
    2
}

/// Task quotas, per-task payments and eligibility thresholds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuotaConfig {
    pub questions_per_moment: u32,
    pub answers_per_question: u32,
    pub summaries_per_moment: u32,
    pub votes_per_moment: u32,
    pub dedup_judgments_per_moment: u32,
    pub rates_cents: BTreeMap<TaskKind, u64>,
    pub min_answers_per_question: u32,
    #[serde(with = "rational::serde_text")]
    pub watched_vote_weight: Rational,
    #[serde(with = "rational::serde_text")]
    pub min_approval_rating: Rational,
    #[serde(default = "default_lease_ms")]
    pub lease_ms: u64,
    #[serde(default = "default_min_support")]
    pub min_dedup_support: usize,
}

impl Default for QuotaConfig {
    fn default() -> Self {
        QuotaConfig {
            questions_per_moment: 2,
            answers_per_question: 2,
            summaries_per_moment: 3,
            votes_per_moment: 5,
            dedup_judgments_per_moment: 2,
            rates_cents: BTreeMap::from([
                (TaskKind::AskQuestion, 10),
                (TaskKind::AnswerQuestion, 20),
                (TaskKind::WriteSummary, 50),
                (TaskKind::VoteSummary, 15),
                (TaskKind::Deduplicate, 30),
            ]),
            min_answers_per_question: 1,
            watched_vote_weight: Rational::new(3, 2),
            min_approval_rating: Rational::new(9, 10),
            lease_ms: default_lease_ms(),
            min_dedup_support: default_min_support(),
        }
    }
}

impl QuotaConfig {
    pub fn from_json(text: &str) -> Result<Self, EngineError> {
        let config: QuotaConfig = serde_json::from_str(text).map_err(|e| EngineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let counts = [
            ("questions_per_moment", self.questions_per_moment),
            ("answers_per_question", self.answers_per_question),
            ("summaries_per_moment", self.summaries_per_moment),
            ("votes_per_moment", self.votes_per_moment),
            ("dedup_judgments_per_moment", self.dedup_judgments_per_moment),
            ("min_answers_per_question", self.min_answers_per_question),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(EngineError::Config(format!("{name} must be at least 1")));
        }
        if self.min_answers_per_question > self.answers_per_question {
            return Err(EngineError::Config("min_answers_per_question exceeds answers_per_question".into()));
        }
        if let Some(kind) = TaskKind::ALL.iter().find(|k| !self.rates_cents.contains_key(k)) {
            return Err(EngineError::Config(format!("missing rate for {kind}")));
        }
        if self.watched_vote_weight < Rational::from_integer(1) {
            return Err(EngineError::Config("watched_vote_weight must be at least 1".into()));
        }
        let zero = Rational::from_integer(0);
        if self.min_approval_rating < zero || self.min_approval_rating > Rational::from_integer(1) {
            return Err(EngineError::Config("min_approval_rating must lie in [0, 1]".into()));
        }
        if self.min_dedup_support == 0 {
            return Err(EngineError::Config("min_dedup_support must be at least 1".into()));
        }
        Ok(())
    }

    pub fn rate(&self, kind: TaskKind) -> u64 {
        self.rates_cents.get(&kind).copied().unwrap_or(0)
    }

    /// Cost of running every moment through every task kind once.
    pub fn cost_per_moment(&self) -> u64 {
        let q = self.questions_per_moment as u64;
        q * self.rate(TaskKind::AskQuestion)
            + q * self.answers_per_question as u64 * self.rate(TaskKind::AnswerQuestion)
            + self.summaries_per_moment as u64 * self.rate(TaskKind::WriteSummary)
            + self.votes_per_moment as u64 * self.rate(TaskKind::VoteSummary)
            + self.dedup_judgments_per_moment as u64 * self.rate(TaskKind::Deduplicate)
    }

    /// Smallest pool of distinct eligible workers that can fill every slot of
    /// one moment: answers need one worker each, and voters must not have
    /// written any of the moment's paragraphs.
    pub fn required_workers(&self) -> usize {
        let q = self.questions_per_moment as usize;
        [
            q,
            q * self.answers_per_question as usize,
            (self.summaries_per_moment + self.votes_per_moment) as usize,
            self.dedup_judgments_per_moment as usize,
        ]
        .into_iter()
        .max()
        .unwrap_or(0)
    }
}

pub fn estimate_cost(event: &Event, quotas: &QuotaConfig) -> u64 {
    event.moments.len() as u64 * quotas.cost_per_moment()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Worker {
    pub id: String,
    #[serde(with = "rational::serde_text")]
    pub approval_rating: Rational,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskResponse {
    AskQuestion { text: String },
    AnswerQuestion { text: String },
    WriteSummary { selected_phase: EventPhase, sentences: BTreeMap<NarrativeCategory, String> },
    VoteSummary { paragraph_id: String, watched_event: bool },
    Deduplicate { replaceable_ids: BTreeSet<String>, representative_vote: String },
}

impl TaskResponse {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskResponse::AskQuestion { .. } => TaskKind::AskQuestion,
            TaskResponse::AnswerQuestion { .. } => TaskKind::AnswerQuestion,
            TaskResponse::WriteSummary { .. } => TaskKind::WriteSummary,
            TaskResponse::VoteSummary { .. } => TaskKind::VoteSummary,
            TaskResponse::Deduplicate { .. } => TaskKind::Deduplicate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub worker_id: String,
    pub body: TaskResponse,
    /// Id of the question, answer, paragraph, vote or judgment created.
    pub artifact_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: String,
    pub kind: TaskKind,
    pub event_id: String,
    /// Absent for de-duplication, which is anchored on a paragraph instead.
    pub moment_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_paragraph_id: Option<String>,
    pub state: TaskState,
    pub assignee: Option<String>,
    pub payment_cents: u64,
    pub created_ms: u64,
    pub leased_ms: Option<u64>,
    pub submitted_ms: Option<u64>,
    pub submission: Option<Submission>,
}

impl Task {
    /// Key of the one-submission-per-worker slot this task belongs to.
    fn slot(&self) -> (TaskKind, &str) {
        let key = match self.kind {
            TaskKind::Deduplicate => self.anchor_paragraph_id.as_deref(),
            _ => self.moment_id.as_deref(),
        };
        (self.kind, key.unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: Question,
    pub answers: Vec<Answer>,
}

/// Everything a worker needs to complete a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskPayload {
    AskQuestion {
        hashtag: String,
        moment_id: String,
        posts: Vec<Post>,
    },
    AnswerQuestion {
        hashtag: String,
        moment_id: String,
        posts: Vec<Post>,
        question: Question,
    },
    WriteSummary {
        hashtag: String,
        moment_id: String,
        posts: Vec<Post>,
        story_so_far: Vec<Paragraph>,
        qa: Vec<QaPair>,
        phase_hint: EventPhase,
        /// The whole grid, so the form can follow the worker's phase choice.
        prompts: Vec<PromptTemplate>,
    },
    VoteSummary {
        hashtag: String,
        moment_id: String,
        posts: Vec<Post>,
        candidates: Vec<Paragraph>,
    },
    Deduplicate {
        hashtag: String,
        anchor: Paragraph,
        candidates: Vec<Paragraph>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskView {
    pub task: Task,
    pub payload: TaskPayload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub at_ms: u64,
    pub task_id: String,
    pub kind: TaskKind,
    pub from: Option<TaskState>,
    pub to: TaskState,
    pub worker_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scope", rename_all = "snake_case")]
pub enum StageChange {
    Moment { moment_id: String, from: MomentStage, to: MomentStage },
    Event { from: EventStage, to: EventStage },
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageReport {
    pub event_id: String,
    pub changes: Vec<StageChange>,
}

impl StageReport {
    pub fn is_noop(&self) -> bool {
        self.changes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitOutcome {
    pub task: Task,
    /// True when an identical earlier submission was returned unchanged.
    pub replay: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MomentStatus {
    pub moment_id: String,
    pub index: usize,
    pub phase_hint: EventPhase,
    pub stage: MomentStage,
    pub open_tasks: usize,
    pub assigned_tasks: usize,
    pub approved_tasks: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub winner: Option<Tally>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineStatus {
    pub event_id: String,
    pub hashtag: String,
    pub stage: EventStage,
    pub moments: Vec<MomentStatus>,
    pub tasks_by_state: BTreeMap<TaskState, usize>,
    pub spent_cents: u64,
    pub committed_cents: u64,
    pub estimated_cost_cents: u64,
    pub groups: Vec<DuplicateGroup>,
}

/// kind, moment, question, anchor, how many more to spawn
type Demand = (TaskKind, Option<String>, Option<String>, Option<String>, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventPipeline {
    event: Event,
    quotas: QuotaConfig,
    prompts: PromptGrid,
    stage: EventStage,
    moment_stages: BTreeMap<String, MomentStage>,
    tasks: BTreeMap<String, Task>,
    next_seq: u64,
    questions: BTreeMap<String, Question>,
    answers: BTreeMap<String, Answer>,
    paragraphs: BTreeMap<String, Paragraph>,
    votes: BTreeMap<String, Vote>,
    judgments: BTreeMap<String, SimilarityJudgment>,
    /// moment id → vote tally for that moment
    winners: BTreeMap<String, Tally>,
    groups: Vec<DuplicateGroup>,
    story: Option<Story>,
    #[serde(skip)]
    journal: Vec<Transition>,
}

impl EventPipeline {
    pub fn new(event: Event, quotas: QuotaConfig) -> Result<Self, EngineError> {
        EventPipeline::with_prompts(event, quotas, PromptGrid::default())
    }

    pub fn with_prompts(event: Event, quotas: QuotaConfig, prompts: PromptGrid) -> Result<Self, EngineError> {
        event.validate()?;
        quotas.validate()?;
        let moment_stages = event.moments.iter().map(|m| (m.id.clone(), MomentStage::Questions)).collect();
        Ok(EventPipeline {
            event,
            quotas,
            prompts,
            stage: EventStage::Collecting,
            moment_stages,
            tasks: BTreeMap::new(),
            next_seq: 1,
            questions: BTreeMap::new(),
            answers: BTreeMap::new(),
            paragraphs: BTreeMap::new(),
            votes: BTreeMap::new(),
            judgments: BTreeMap::new(),
            winners: BTreeMap::new(),
            groups: Vec::new(),
            story: None,
            journal: Vec::new(),
        })
    }

    pub fn event(&self) -> &Event {
        &self.event
    }

    pub fn event_id(&self) -> &str {
        &self.event.id
    }

    pub fn quotas(&self) -> &QuotaConfig {
        &self.quotas
    }

    pub fn prompts(&self) -> &PromptGrid {
        &self.prompts
    }

    pub fn stage(&self) -> EventStage {
        self.stage
    }

    pub fn moment_stage(&self, moment_id: &str) -> Option<MomentStage> {
        self.moment_stages.get(moment_id).copied()
    }

    pub fn moment_stages(&self) -> &BTreeMap<String, MomentStage> {
        &self.moment_stages
    }

    pub fn tasks(&self) -> impl Iterator<Item = &Task> {
        self.tasks.values()
    }

    pub fn task(&self, task_id: &str) -> Result<&Task, EngineError> {
        self.tasks.get(task_id).ok_or_else(|| EngineError::NotFound(format!("task {task_id}")))
    }

    pub fn open_tasks(&self) -> impl Iterator<Item = &Task> {
        self.tasks.values().filter(|t| t.state == TaskState::Open)
    }

    pub fn questions(&self) -> impl Iterator<Item = &Question> {
        self.questions.values()
    }

    pub fn answers(&self) -> impl Iterator<Item = &Answer> {
        self.answers.values()
    }

    pub fn paragraphs(&self) -> impl Iterator<Item = &Paragraph> {
        self.paragraphs.values()
    }

    pub fn paragraph(&self, id: &str) -> Option<&Paragraph> {
        self.paragraphs.get(id)
    }

    pub fn votes(&self) -> impl Iterator<Item = &Vote> {
        self.votes.values()
    }

    pub fn judgments(&self) -> impl Iterator<Item = &SimilarityJudgment> {
        self.judgments.values()
    }

    pub fn winners(&self) -> &BTreeMap<String, Tally> {
        &self.winners
    }

    pub fn groups(&self) -> &[DuplicateGroup] {
        &self.groups
    }

    pub fn story(&self) -> Option<&Story> {
        self.story.as_ref()
    }

    /// Takes the task transitions recorded since the last call.
    pub fn drain_journal(&mut self) -> Vec<Transition> {
        std::mem::take(&mut self.journal)
    }

    pub fn estimated_cost(&self) -> u64 {
        estimate_cost(&self.event, &self.quotas)
    }

    /// Payment owed for every task spawned so far, finished or not.
    pub fn committed_cost(&self) -> u64 {
        self.tasks.values().map(|t| t.payment_cents).sum()
    }

    fn tasks_matching<'a>(&'a self, pred: impl Fn(&Task) -> bool + 'a) -> impl Iterator<Item = &'a Task> + 'a {
        self.tasks.values().filter(move |t| pred(t))
    }

    fn count_tasks(&self, pred: impl Fn(&Task) -> bool) -> usize {
        self.tasks.values().filter(|t| pred(t)).count()
    }

    fn moment_questions(&self, moment_id: &str) -> Vec<&Question> {
        self.questions.values().filter(|q| q.moment_id == moment_id).collect()
    }

    fn moment_paragraphs(&self, moment_id: &str) -> Vec<&Paragraph> {
        self.paragraphs.values().filter(|p| p.moment_id == moment_id).collect()
    }

    fn winner_paragraphs(&self) -> Vec<&Paragraph> {
        self.event
            .moments
            .iter()
            .filter_map(|m| self.winners.get(&m.id))
            .filter_map(|t| self.paragraphs.get(&t.winner))
            .collect()
    }

    fn new_task(
        &mut self,
        kind: TaskKind,
        moment_id: Option<&str>,
        question_id: Option<&str>,
        anchor: Option<&str>,
        now_ms: u64,
    ) -> Task {
        let id = format!("{}-t{:05}", self.event.id, self.next_seq);
        self.next_seq += 1;
        let task = Task {
            id: id.clone(),
            kind,
            event_id: self.event.id.clone(),
            moment_id: moment_id.map(str::to_string),
            question_id: question_id.map(str::to_string),
            anchor_paragraph_id: anchor.map(str::to_string),
            state: TaskState::Open,
            assignee: None,
            payment_cents: self.quotas.rate(kind),
            created_ms: now_ms,
            leased_ms: None,
            submitted_ms: None,
            submission: None,
        };
        self.journal.push(Transition {
            at_ms: now_ms,
            task_id: id.clone(),
            kind,
            from: None,
            to: TaskState::Open,
            worker_id: None,
        });
        self.tasks.insert(id, task.clone());
        task
    }

    /// Spawns whatever tasks the current stages still need and nothing more.
    /// Calling it again without new submissions returns an empty list.
    pub fn plan_tasks(&mut self, now_ms: u64) -> Vec<Task> {
        let mut wanted: Vec<Demand> = Vec::new();
        match self.stage {
            EventStage::Collecting => {
                for moment in &self.event.moments {
                    let mid = moment.id.as_str();
                    let of_kind =
                        |kind: TaskKind| self.count_tasks(|t| t.kind == kind && t.moment_id.as_deref() == Some(mid));
                    match self.moment_stages[mid] {
                        MomentStage::Questions => {
                            let have = of_kind(TaskKind::AskQuestion);
                            let need = (self.quotas.questions_per_moment as usize).saturating_sub(have);
                            wanted.push((TaskKind::AskQuestion, Some(mid.into()), None, None, need));
                        }
                        MomentStage::Answers => {
                            for question in self.moment_questions(mid) {
                                let have = self.count_tasks(|t| {
                                    t.kind == TaskKind::AnswerQuestion && t.question_id.as_deref() == Some(&question.id)
                                });
                                let need = (self.quotas.answers_per_question as usize).saturating_sub(have);
                                wanted.push((
                                    TaskKind::AnswerQuestion,
                                    Some(mid.into()),
                                    Some(question.id.clone()),
                                    None,
                                    need,
                                ));
                            }
                        }
                        MomentStage::Summaries => {
                            let have = of_kind(TaskKind::WriteSummary);
                            let need = (self.quotas.summaries_per_moment as usize).saturating_sub(have);
                            wanted.push((TaskKind::WriteSummary, Some(mid.into()), None, None, need));
                        }
                        MomentStage::Voting => {
                            let have = of_kind(TaskKind::VoteSummary);
                            let need = (self.quotas.votes_per_moment as usize).saturating_sub(have);
                            wanted.push((TaskKind::VoteSummary, Some(mid.into()), None, None, need));
                        }
                        MomentStage::Done => {}
                    }
                }
            }
            EventStage::Dedup => {
                for paragraph in self.winner_paragraphs() {
                    let have = self.count_tasks(|t| {
                        t.kind == TaskKind::Deduplicate && t.anchor_paragraph_id.as_deref() == Some(&paragraph.id)
                    });
                    let need = (self.quotas.dedup_judgments_per_moment as usize).saturating_sub(have);
                    wanted.push((TaskKind::Deduplicate, None, None, Some(paragraph.id.clone()), need));
                }
            }
            EventStage::Assembly | EventStage::Complete => {}
        }
        let mut created = Vec::new();
        for (kind, moment, question, anchor, need) in wanted {
            for _ in 0..need {
                created.push(self.new_task(kind, moment.as_deref(), question.as_deref(), anchor.as_deref(), now_ms));
            }
        }
        created
    }

    /// Checks whether `worker` may take `task_id` right now.
    pub fn check_assignable(&self, task_id: &str, worker: &Worker) -> Result<(), EngineError> {
        let task = self.task(task_id)?;
        if task.state != TaskState::Open {
            return Err(EngineError::Conflict(format!("task {task_id} is {:?}, not open", task.state)));
        }
        self.check_eligible(task, worker)
    }

    fn check_eligible(&self, task: &Task, worker: &Worker) -> Result<(), EngineError> {
        let ineligible = |reason: String| EngineError::Eligibility { worker_id: worker.id.clone(), reason };
        if worker.approval_rating < self.quotas.min_approval_rating {
            return Err(ineligible(format!(
                "approval rating {} is below {}",
                rational::format_rational(&worker.approval_rating),
                rational::format_rational(&self.quotas.min_approval_rating)
            )));
        }
        let slot = task.slot();
        let taken = self.tasks.values().any(|other| {
            other.id != task.id
                && other.slot() == slot
                && other.assignee.as_deref() == Some(worker.id.as_str())
                && matches!(other.state, TaskState::Assigned | TaskState::Submitted | TaskState::Approved)
        });
        if taken {
            return Err(ineligible(format!("already holds a {} task for this slot", task.kind)));
        }
        if task.kind == TaskKind::VoteSummary {
            let moment_id = task.moment_id.as_deref().unwrap_or_default();
            if self.moment_paragraphs(moment_id).iter().any(|p| p.worker_id == worker.id) {
                return Err(ineligible("cannot vote on a moment they wrote for".into()));
            }
        }
        Ok(())
    }

    fn transition(&mut self, task_id: &str, to: TaskState, now_ms: u64) -> Result<(), EngineError> {
        let task = self.tasks.get_mut(task_id).ok_or_else(|| EngineError::NotFound(format!("task {task_id}")))?;
        if !task.state.can_transition_to(to) {
            return Err(EngineError::Conflict(format!("task {task_id} cannot move from {:?} to {to:?}", task.state)));
        }
        let from = task.state;
        task.state = to;
        self.journal.push(Transition {
            at_ms: now_ms,
            task_id: task_id.to_string(),
            kind: task.kind,
            from: Some(from),
            to,
            worker_id: task.assignee.clone(),
        });
        Ok(())
    }

    pub fn assign_task(&mut self, task_id: &str, worker: &Worker, now_ms: u64) -> Result<Task, EngineError> {
        self.check_assignable(task_id, worker)?;
        let task = self.tasks.get_mut(task_id).expect("checked above");
        task.assignee = Some(worker.id.clone());
        task.leased_ms = Some(now_ms);
        self.transition(task_id, TaskState::Assigned, now_ms)?;
        Ok(self.tasks[task_id].clone())
    }

    /// First open task (in id order) the worker may take, optionally of one kind.
    pub fn next_task_for(&self, worker: &Worker, kind: Option<TaskKind>) -> Option<&Task> {
        self.open_tasks().filter(|t| kind.is_none_or(|k| t.kind == k)).find(|t| self.check_eligible(t, worker).is_ok())
    }

    /// Returns an assigned task to the open pool.
    pub fn expire_task(&mut self, task_id: &str, now_ms: u64) -> Result<Task, EngineError> {
        let state = self.task(task_id)?.state;
        if state != TaskState::Assigned {
            return Err(EngineError::Conflict(format!("task {task_id} is {state:?}, not assigned")));
        }
        self.transition(task_id, TaskState::Expired, now_ms)?;
        let task = self.tasks.get_mut(task_id).expect("exists");
        task.assignee = None;
        task.leased_ms = None;
        self.transition(task_id, TaskState::Open, now_ms)?;
        Ok(self.tasks[task_id].clone())
    }

    /// Requeues every assignment whose lease has run out.
    pub fn expire_leases(&mut self, now_ms: u64) -> Vec<String> {
        let lease = self.quotas.lease_ms;
        let stale: Vec<String> = self
            .tasks_matching(|t| t.state == TaskState::Assigned)
            .filter(|t| t.leased_ms.is_some_and(|at| at.saturating_add(lease) <= now_ms))
            .map(|t| t.id.clone())
            .collect();
        for id in &stale {
            // Only assigned tasks were selected, so expiry cannot fail.
            let _ = self.expire_task(id, now_ms);
        }
        stale
    }

    pub fn submit_task(
        &mut self,
        task_id: &str,
        worker_id: &str,
        response: TaskResponse,
        now_ms: u64,
    ) -> Result<SubmitOutcome, EngineError> {
        let task = self.task(task_id)?.clone();
        if task.state.is_done() {
            let stored = task.submission.as_ref().expect("done tasks carry a submission");
            if stored.worker_id != worker_id {
                return Err(EngineError::Authorization { worker_id: worker_id.into(), task_id: task_id.into() });
            }
            if stored.body == response {
                return Ok(SubmitOutcome { task, replay: true });
            }
            return Err(EngineError::Conflict(format!("task {task_id} was already submitted with a different body")));
        }
        if task.state != TaskState::Assigned {
            return Err(EngineError::Conflict(format!("task {task_id} is {:?}, not assigned", task.state)));
        }
        if task.assignee.as_deref() != Some(worker_id) {
            return Err(EngineError::Authorization { worker_id: worker_id.into(), task_id: task_id.into() });
        }
        if response.kind() != task.kind {
            return Err(EngineError::validation(format!(
                "task {task_id} expects a {} response, got {}",
                task.kind,
                response.kind()
            )));
        }
        let artifact_id = self.artifact_id(&task);
        self.record(&task, worker_id, &artifact_id, &response)?;

        let entry = self.tasks.get_mut(task_id).expect("exists");
        entry.submitted_ms = Some(now_ms);
        entry.submission = Some(Submission { worker_id: worker_id.into(), body: response, artifact_id });
        self.transition(task_id, TaskState::Submitted, now_ms)?;
        // No requester review step: validated work is approved immediately.
        self.transition(task_id, TaskState::Approved, now_ms)?;
        Ok(SubmitOutcome { task: self.tasks[task_id].clone(), replay: false })
    }

    fn artifact_id(&self, task: &Task) -> String {
        let seq = task.id.rsplit("-t").next().unwrap_or(&task.id);
        format!("{}-{}{}", self.event.id, task.kind.artifact_prefix(), seq)
    }

    /// Validates a response against the task and stores what it produces.
    fn record(&mut self, task: &Task, worker_id: &str, id: &str, response: &TaskResponse) -> Result<(), EngineError> {
        let moment_id = task.moment_id.clone().unwrap_or_default();
        let non_blank = |text: &str, what: &str| {
            if text.trim().is_empty() {
                Err(EngineError::validation(format!("{what} text is empty")))
            } else {
                Ok(())
            }
        };
        match response {
            TaskResponse::AskQuestion { text } => {
                non_blank(text, "question")?;
                self.questions.insert(
                    id.into(),
                    Question { id: id.into(), moment_id, worker_id: worker_id.into(), text: text.clone() },
                );
            }
            TaskResponse::AnswerQuestion { text } => {
                non_blank(text, "answer")?;
                let question_id = task.question_id.clone().unwrap_or_default();
                if !self.questions.contains_key(&question_id) {
                    return Err(EngineError::NotFound(format!("question {question_id}")));
                }
                self.answers.insert(
                    id.into(),
                    Answer { id: id.into(), question_id, worker_id: worker_id.into(), text: text.clone() },
                );
            }
            TaskResponse::WriteSummary { selected_phase, sentences } => {
                let paragraph = Paragraph {
                    id: id.into(),
                    moment_id,
                    worker_id: worker_id.into(),
                    selected_phase: *selected_phase,
                    sentences: sentences.clone(),
                };
                validate_paragraph(&paragraph).map_err(|violations| EngineError::Validation {
                    message: format!("paragraph invalid: {violations}"),
                    violations: Some(violations),
                })?;
                self.paragraphs.insert(id.into(), paragraph);
            }
            TaskResponse::VoteSummary { paragraph_id, watched_event } => {
                let candidate = self.paragraphs.get(paragraph_id).is_some_and(|p| p.moment_id == moment_id);
                if !candidate {
                    return Err(EngineError::validation(format!(
                        "paragraph {paragraph_id} is not a candidate for moment {moment_id}"
                    )));
                }
                self.votes.insert(
                    id.into(),
                    Vote {
                        id: id.into(),
                        worker_id: worker_id.into(),
                        moment_id,
                        paragraph_id: paragraph_id.clone(),
                        watched_event: *watched_event,
                    },
                );
            }
            TaskResponse::Deduplicate { replaceable_ids, representative_vote } => {
                let anchor = task.anchor_paragraph_id.clone().unwrap_or_default();
                let winners: BTreeSet<&str> = self.winner_paragraphs().iter().map(|p| p.id.as_str()).collect();
                if let Some(bad) = replaceable_ids.iter().find(|r| *r == &anchor || !winners.contains(r.as_str())) {
                    return Err(EngineError::validation(format!("{bad} is not a candidate for replacing {anchor}")));
                }
                let judgment = SimilarityJudgment {
                    id: id.into(),
                    worker_id: worker_id.into(),
                    anchor_paragraph_id: anchor,
                    replaceable_ids: replaceable_ids.clone(),
                    representative_vote: representative_vote.clone(),
                };
                judgment.check().map_err(|e| EngineError::validation(e.to_string()))?;
                self.judgments.insert(id.into(), judgment);
            }
        }
        Ok(())
    }

    fn moment_ready(&self, moment: &Moment, stage: MomentStage) -> bool {
        let mid = moment.id.as_str();
        match stage {
            MomentStage::Questions => self.moment_questions(mid).len() >= self.quotas.questions_per_moment as usize,
            MomentStage::Answers => {
                let questions = self.moment_questions(mid);
                !questions.is_empty()
                    && questions.iter().all(|q| {
                        self.answers.values().filter(|a| a.question_id == q.id).count()
                            >= self.quotas.min_answers_per_question as usize
                    })
            }
            MomentStage::Summaries => self.moment_paragraphs(mid).len() >= self.quotas.summaries_per_moment as usize,
            MomentStage::Voting => {
                self.votes.values().filter(|v| v.moment_id == mid).count() >= self.quotas.votes_per_moment as usize
            }
            MomentStage::Done => false,
        }
    }

    /// Promotes every moment (and then the event) whose thresholds are met.
    /// Idempotent once nothing new has been submitted.
    pub fn advance(&mut self) -> Result<StageReport, EngineError> {
        let mut report = StageReport { event_id: self.event.id.clone(), changes: Vec::new() };
        if self.stage == EventStage::Collecting {
            let moments = self.event.moments.clone();
            for moment in &moments {
                loop {
                    let stage = self.moment_stages[&moment.id];
                    if !self.moment_ready(moment, stage) {
                        break;
                    }
                    let next = match stage {
                        MomentStage::Questions => MomentStage::Answers,
                        MomentStage::Answers => MomentStage::Summaries,
                        MomentStage::Summaries => MomentStage::Voting,
                        MomentStage::Voting => {
                            let votes: Vec<Vote> =
                                self.votes.values().filter(|v| v.moment_id == moment.id).cloned().collect();
                            let tally = aggregation::tally_weighted_votes(&votes, self.quotas.watched_vote_weight)?;
                            self.winners.insert(moment.id.clone(), tally);
                            MomentStage::Done
                        }
                        MomentStage::Done => break,
                    };
                    self.moment_stages.insert(moment.id.clone(), next);
                    report.changes.push(StageChange::Moment { moment_id: moment.id.clone(), from: stage, to: next });
                }
            }
            if self.moment_stages.values().all(|s| *s == MomentStage::Done) {
                self.set_stage(EventStage::Dedup, &mut report);
            }
        }
        if self.stage == EventStage::Dedup {
            let needed = self.quotas.dedup_judgments_per_moment as usize * self.winners.len();
            if self.judgments.len() >= needed {
                let winners = self.winner_paragraphs();
                let positions: BTreeMap<String, usize> = winners
                    .iter()
                    .map(|p| (p.id.clone(), self.event.moment(&p.moment_id).map_or(0, |m| m.index)))
                    .collect();
                let judgments: Vec<SimilarityJudgment> = self.judgments.values().cloned().collect();
                self.groups = aggregation::group_duplicates(&judgments, &positions, self.quotas.min_dedup_support)?;
                self.set_stage(EventStage::Assembly, &mut report);
            }
        }
        if self.stage == EventStage::Assembly {
            let winners: Vec<Paragraph> = self.winner_paragraphs().into_iter().cloned().collect();
            self.story = Some(aggregation::assemble_story(&self.event, &winners, &self.groups)?);
            self.set_stage(EventStage::Complete, &mut report);
        }
        Ok(report)
    }

    fn set_stage(&mut self, to: EventStage, report: &mut StageReport) {
        let from = self.stage;
        self.stage = to;
        report.changes.push(StageChange::Event { from, to });
    }

    fn posts_for(&self, moment_id: &str) -> Vec<Post> {
        self.event.moment(moment_id).map(|m| self.event.moment_posts(m).cloned().collect()).unwrap_or_default()
    }

    fn qa_for(&self, moment_id: &str) -> Vec<QaPair> {
        self.moment_questions(moment_id)
            .into_iter()
            .map(|q| QaPair {
                question: q.clone(),
                answers: self.answers.values().filter(|a| a.question_id == q.id).cloned().collect(),
            })
            .collect()
    }

    /// Winning paragraphs of earlier moments, in order.
    fn story_before(&self, moment: &Moment) -> Vec<Paragraph> {
        self.event
            .moments
            .iter()
            .take_while(|m| m.index < moment.index)
            .filter_map(|m| self.winners.get(&m.id))
            .filter_map(|t| self.paragraphs.get(&t.winner).cloned())
            .collect()
    }

    /// Task plus the data a worker needs, built from current state.
    pub fn view(&self, task_id: &str) -> Result<TaskView, EngineError> {
        let task = self.task(task_id)?.clone();
        let hashtag = self.event.hashtag.clone();
        let moment_id = task.moment_id.clone().unwrap_or_default();
        let payload = match task.kind {
            TaskKind::AskQuestion => TaskPayload::AskQuestion { hashtag, posts: self.posts_for(&moment_id), moment_id },
            TaskKind::AnswerQuestion => {
                let qid = task.question_id.clone().unwrap_or_default();
                let question = self
                    .questions
                    .get(&qid)
                    .cloned()
                    .ok_or_else(|| EngineError::NotFound(format!("question {qid}")))?;
                TaskPayload::AnswerQuestion { hashtag, posts: self.posts_for(&moment_id), moment_id, question }
            }
            TaskKind::WriteSummary => {
                let moment = self
                    .event
                    .moment(&moment_id)
                    .ok_or_else(|| EngineError::NotFound(format!("moment {moment_id}")))?;
                TaskPayload::WriteSummary {
                    hashtag,
                    posts: self.posts_for(&moment_id),
                    story_so_far: self.story_before(moment),
                    qa: self.qa_for(&moment_id),
                    phase_hint: moment.phase_hint,
                    prompts: self.prompts.templates(),
                    moment_id,
                }
            }
            TaskKind::VoteSummary => TaskPayload::VoteSummary {
                hashtag,
                posts: self.posts_for(&moment_id),
                candidates: self.moment_paragraphs(&moment_id).into_iter().cloned().collect(),
                moment_id,
            },
            TaskKind::Deduplicate => {
                let anchor_id = task.anchor_paragraph_id.clone().unwrap_or_default();
                let anchor = self
                    .paragraphs
                    .get(&anchor_id)
                    .cloned()
                    .ok_or_else(|| EngineError::NotFound(format!("paragraph {anchor_id}")))?;
                let candidates = self.winner_paragraphs().into_iter().filter(|p| p.id != anchor_id).cloned().collect();
                TaskPayload::Deduplicate { hashtag, anchor, candidates }
            }
        };
        Ok(TaskView { task, payload })
    }

    pub fn status(&self) -> PipelineStatus {
        let moments = self
            .event
            .moments
            .iter()
            .map(|m| {
                let of = |state: TaskState| {
                    self.count_tasks(|t| t.state == state && t.moment_id.as_deref() == Some(m.id.as_str()))
                };
                MomentStatus {
                    moment_id: m.id.clone(),
                    index: m.index,
                    phase_hint: m.phase_hint,
                    stage: self.moment_stages[&m.id],
                    open_tasks: of(TaskState::Open),
                    assigned_tasks: of(TaskState::Assigned),
                    approved_tasks: of(TaskState::Approved),
                    winner: self.winners.get(&m.id).cloned(),
                }
            })
            .collect();
        let mut tasks_by_state = BTreeMap::new();
        for task in self.tasks.values() {
            *tasks_by_state.entry(task.state).or_insert(0) += 1;
        }
        PipelineStatus {
            event_id: self.event.id.clone(),
            hashtag: self.event.hashtag.clone(),
            stage: self.stage,
            moments,
            tasks_by_state,
            spent_cents: self.tasks.values().filter(|t| t.state.is_done()).map(|t| t.payment_cents).sum(),
            committed_cents: self.committed_cost(),
            estimated_cost_cents: self.estimated_cost(),
            groups: self.groups.clone(),
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::ingestion::{build_event, ClusterAssignment};
    use crate::model::Platform;

    pub(crate) fn event(moments: usize) -> Event {
        let mut posts = BTreeMap::new();
        let mut clusters = Vec::new();
        for m in 0..moments {
            let mut ids = Vec::new();
            for k in 0..3 {
                let id = format!("m{m}p{k}");
                posts.insert(
                    id.clone(),
                    Post {
                        id: id.clone(),
                        author: "a".into(),
                        ts_ms: (m * 10 + k) as i64,
                        text: format!("Player{m} did thing {k}"),
                        platform: Platform::Twitter,
                        media: vec![],
                        extra: BTreeMap::new(),
                    },
                );
                ids.push(id);
            }
            clusters.push(ClusterAssignment { cluster_id: format!("m{m}"), label: None, post_ids: ids });
        }
        build_event("ev", "#test", posts, clusters).unwrap()
    }

    fn worker(id: &str) -> Worker {
        Worker { id: id.into(), approval_rating: Rational::new(95, 100) }
    }

    fn sentences(tag: &str) -> BTreeMap<NarrativeCategory, String> {
        NarrativeCategory::ALL.iter().map(|c| (*c, format!("{tag} {c}"))).collect()
    }

    /// Completes every open task with a distinct worker per slot.
    fn complete_open(p: &mut EventPipeline, now: u64, vote_for_first: bool) {
        let open: Vec<String> = p.open_tasks().map(|t| t.id.clone()).collect();
        for id in open {
            let w = (0..64)
                .map(|i| worker(&format!("w{i:02}")))
                .find(|w| p.check_assignable(&id, w).is_ok())
                .expect("some worker fits");
            p.assign_task(&id, &w, now).unwrap();
            let view = p.view(&id).unwrap();
            let response = match view.payload {
                TaskPayload::AskQuestion { .. } => TaskResponse::AskQuestion { text: "Who?".into() },
                TaskPayload::AnswerQuestion { .. } => TaskResponse::AnswerQuestion { text: "Them.".into() },
                TaskPayload::WriteSummary { .. } => {
                    TaskResponse::WriteSummary { selected_phase: EventPhase::Middle, sentences: sentences(&id) }
                }
                TaskPayload::VoteSummary { candidates, .. } => TaskResponse::VoteSummary {
                    paragraph_id: if vote_for_first {
                        candidates[0].id.clone()
                    } else {
                        candidates.last().unwrap().id.clone()
                    },
                    watched_event: false,
                },
                TaskPayload::Deduplicate { anchor, .. } => {
                    TaskResponse::Deduplicate { replaceable_ids: BTreeSet::new(), representative_vote: anchor.id }
                }
            };
            p.submit_task(&id, &w.id, response, now).unwrap();
        }
    }

    #[test]
    fn default_quotas_cost_385_per_moment() {
        let q = QuotaConfig::default();
        assert_eq!(q.cost_per_moment(), 385);
        assert_eq!(estimate_cost(&event(1), &q), 385);
        assert_eq!(estimate_cost(&event(48), &q), 18_480);
        let empty = Event { id: "e".into(), hashtag: "#".into(), moments: vec![], posts: BTreeMap::new() };
        assert_eq!(estimate_cost(&empty, &q), 0);
        assert_eq!(q.required_workers(), 8);
    }

    #[test]
    fn quota_file_round_trips_and_validates() {
        let json = serde_json::to_string(&QuotaConfig::default()).unwrap();
        assert_eq!(QuotaConfig::from_json(&json).unwrap(), QuotaConfig::default());
        let partial = QuotaConfig::from_json(r#"{"votes_per_moment": 7, "watched_vote_weight": 1.25}"#).unwrap();
        assert_eq!(partial.votes_per_moment, 7);
        assert_eq!(partial.watched_vote_weight, Rational::new(5, 4));
        assert_eq!(partial.questions_per_moment, 2);
        assert!(QuotaConfig::from_json(r#"{"votes_per_moment": 0}"#).is_err());
        assert!(QuotaConfig::from_json(r#"{"watched_vote_weight": "1/2"}"#).is_err());
        assert!(QuotaConfig::from_json(r#"{"min_answers_per_question": 3}"#).is_err());
    }

    #[test]
    fn fresh_event_plans_question_tasks_once() {
        let mut p = EventPipeline::new(event(3), QuotaConfig::default()).unwrap();
        let planned = p.plan_tasks(0);
        assert_eq!(planned.len(), 6);
        assert!(planned.iter().all(|t| t.kind == TaskKind::AskQuestion && t.payment_cents == 10));
        assert!(p.plan_tasks(0).is_empty());
    }

    #[test]
    fn answered_questions_spawn_answer_tasks() {
        let mut p = EventPipeline::new(event(1), QuotaConfig::default()).unwrap();
        p.plan_tasks(0);
        complete_open(&mut p, 1, true);
        let report = p.advance().unwrap();
        assert_eq!(report.changes.len(), 1);
        let planned = p.plan_tasks(2);
        assert_eq!(planned.len(), 4);
        assert!(planned.iter().all(|t| t.kind == TaskKind::AnswerQuestion));
    }

    #[test]
    fn one_answer_per_question_is_enough_to_write() {
        let mut p = EventPipeline::new(event(1), QuotaConfig::default()).unwrap();
        p.plan_tasks(0);
        complete_open(&mut p, 1, true);
        p.advance().unwrap();
        p.plan_tasks(2);
        // answer exactly one task per question
        let questions: Vec<String> = p.questions().map(|q| q.id.clone()).collect();
        for (i, qid) in questions.iter().enumerate() {
            let tid = p.open_tasks().find(|t| t.question_id.as_ref() == Some(qid)).unwrap().id.clone();
            let w = worker(&format!("ans{i}"));
            p.assign_task(&tid, &w, 3).unwrap();
            p.submit_task(&tid, &w.id, TaskResponse::AnswerQuestion { text: "x".into() }, 3).unwrap();
        }
        p.advance().unwrap();
        assert_eq!(p.moment_stage("m0"), Some(MomentStage::Summaries));
        // the late answers still reach writers
        let writes = p.plan_tasks(4);
        assert_eq!(writes.len(), 3);
        complete_open(&mut p, 5, true);
        if let TaskPayload::WriteSummary { qa, .. } = p.view(&writes[0].id).unwrap().payload {
            assert_eq!(qa.iter().map(|pair| pair.answers.len()).sum::<usize>(), 4);
        } else {
            panic!("wrong payload");
        }
    }

    #[test]
    fn summaries_gate_on_three_paragraphs() {
        let mut p = EventPipeline::new(event(1), QuotaConfig::default()).unwrap();
        for _ in 0..2 {
            p.plan_tasks(0);
            complete_open(&mut p, 1, true);
            p.advance().unwrap();
        }
        assert_eq!(p.moment_stage("m0"), Some(MomentStage::Summaries));
        let writes = p.plan_tasks(2);
        for (i, t) in writes.iter().take(2).enumerate() {
            let w = worker(&format!("writer{i}"));
            p.assign_task(&t.id, &w, 3).unwrap();
            p.submit_task(
                &t.id,
                &w.id,
                TaskResponse::WriteSummary { selected_phase: EventPhase::End, sentences: sentences("s") },
                3,
            )
            .unwrap();
        }
        assert!(p.advance().unwrap().is_noop());
        assert_eq!(p.moment_stage("m0"), Some(MomentStage::Summaries));
    }

    #[test]
    fn approval_threshold_and_double_assignment() {
        let mut p = EventPipeline::new(event(1), QuotaConfig::default()).unwrap();
        let tasks = p.plan_tasks(0);
        let low = Worker { id: "low".into(), approval_rating: Rational::new(85, 100) };
        assert!(matches!(p.assign_task(&tasks[0].id, &low, 0), Err(EngineError::Eligibility { .. })));
        let ok = p.assign_task(&tasks[0].id, &worker("w1"), 0).unwrap();
        assert_eq!(ok.state, TaskState::Assigned);
        assert!(matches!(p.assign_task(&tasks[0].id, &worker("w2"), 0), Err(EngineError::Conflict(_))));
        // same worker, same slot
        assert!(matches!(p.assign_task(&tasks[1].id, &worker("w1"), 0), Err(EngineError::Eligibility { .. })));
        assert!(matches!(p.assign_task("nope", &worker("w1"), 0), Err(EngineError::NotFound(_))));
    }

    #[test]
    fn submit_checks_worker_shape_and_replays() {
        let mut p = EventPipeline::new(event(1), QuotaConfig::default()).unwrap();
        let tasks = p.plan_tasks(0);
        let id = tasks[0].id.clone();
        p.assign_task(&id, &worker("w1"), 0).unwrap();
        let body = TaskResponse::AskQuestion { text: "Who is Player0?".into() };
        assert!(matches!(p.submit_task(&id, "w2", body.clone(), 1), Err(EngineError::Authorization { .. })));
        assert!(matches!(
            p.submit_task(&id, "w1", TaskResponse::AnswerQuestion { text: "x".into() }, 1),
            Err(EngineError::Validation { .. })
        ));
        let first = p.submit_task(&id, "w1", body.clone(), 1).unwrap();
        assert!(!first.replay);
        assert_eq!(first.task.state, TaskState::Approved);
        let again = p.submit_task(&id, "w1", body, 2).unwrap();
        assert!(again.replay);
        assert_eq!(again.task, first.task);
        assert_eq!(p.questions().count(), 1);
        assert!(matches!(
            p.submit_task(&id, "w1", TaskResponse::AskQuestion { text: "other".into() }, 2),
            Err(EngineError::Conflict(_))
        ));
    }

    #[test]
    fn incomplete_paragraph_is_rejected_with_violation() {
        let mut p = EventPipeline::new(event(1), QuotaConfig::default()).unwrap();
        for _ in 0..2 {
            p.plan_tasks(0);
            complete_open(&mut p, 1, true);
            p.advance().unwrap();
        }
        let write = p.plan_tasks(2)[0].id.clone();
        p.assign_task(&write, &worker("writer"), 2).unwrap();
        let mut s = sentences("x");
        s.remove(&NarrativeCategory::Peak);
        match p.submit_task(
            &write,
            "writer",
            TaskResponse::WriteSummary { selected_phase: EventPhase::Middle, sentences: s },
            3,
        ) {
            Err(EngineError::Validation { violations: Some(v), .. }) => {
                assert_eq!(v.0[0].category, NarrativeCategory::Peak)
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(p.task(&write).unwrap().state, TaskState::Assigned);
    }

    #[test]
    fn authors_cannot_vote_on_their_moment() {
        let mut p = EventPipeline::new(event(1), QuotaConfig::default()).unwrap();
        for _ in 0..3 {
            p.plan_tasks(0);
            complete_open(&mut p, 1, true);
            p.advance().unwrap();
        }
        assert_eq!(p.moment_stage("m0"), Some(MomentStage::Voting));
        let author = p.paragraphs().next().unwrap().worker_id.clone();
        let vote = p.plan_tasks(2)[0].id.clone();
        assert!(matches!(p.assign_task(&vote, &worker(&author), 2), Err(EngineError::Eligibility { .. })));
    }

    #[test]
    fn expiry_requeues_and_lease_timeout() {
        let mut p = EventPipeline::new(event(1), QuotaConfig::default()).unwrap();
        let tasks = p.plan_tasks(0);
        p.assign_task(&tasks[0].id, &worker("w1"), 0).unwrap();
        assert!(p.expire_leases(1000).is_empty());
        let expired = p.expire_leases(30 * 60 * 1000);
        assert_eq!(expired, vec![tasks[0].id.clone()]);
        let t = p.task(&tasks[0].id).unwrap();
        assert_eq!((t.state, t.assignee.clone()), (TaskState::Open, None));
        assert!(matches!(p.expire_task(&tasks[0].id, 0), Err(EngineError::Conflict(_))));
        // requeued task can be picked up again, by the same worker
        p.assign_task(&tasks[0].id, &worker("w1"), 5).unwrap();
        let states: Vec<(Option<TaskState>, TaskState)> =
            p.drain_journal().iter().filter(|j| j.task_id == tasks[0].id).map(|j| (j.from, j.to)).collect();
        use TaskState::*;
        assert_eq!(
            states,
            vec![
                (None, Open),
                (Some(Open), Assigned),
                (Some(Assigned), Expired),
                (Some(Expired), Open),
                (Some(Open), Assigned)
            ]
        );
    }

    #[test]
    fn full_run_reaches_complete_and_advance_is_idempotent() {
        let mut p = EventPipeline::new(event(2), QuotaConfig::default()).unwrap();
        for round in 0..20 {
            p.plan_tasks(round);
            complete_open(&mut p, round, true);
            p.advance().unwrap();
            if p.stage() == EventStage::Complete {
                break;
            }
        }
        assert_eq!(p.stage(), EventStage::Complete);
        let story = p.story().unwrap();
        assert_eq!(story.paragraphs.len(), 2);
        assert!(p.advance().unwrap().is_noop());
        assert!(p.plan_tasks(99).is_empty());
        assert_eq!(p.committed_cost(), p.estimated_cost());
        assert_eq!(p.status().spent_cents, 2 * 385);
    }

    #[test]
    fn dedup_payload_lists_other_winners() {
        let mut p = EventPipeline::new(event(3), QuotaConfig::default()).unwrap();
        while p.stage() == EventStage::Collecting {
            p.plan_tasks(0);
            complete_open(&mut p, 0, false);
            p.advance().unwrap();
        }
        let planned = p.plan_tasks(1);
        assert_eq!(planned.len(), 6);
        assert!(planned.iter().all(|t| t.moment_id.is_none() && t.anchor_paragraph_id.is_some()));
        match p.view(&planned[0].id).unwrap().payload {
            TaskPayload::Deduplicate { anchor, candidates, .. } => {
                assert_eq!(candidates.len(), 2);
                assert!(candidates.iter().all(|c| c.id != anchor.id));
            }
            other => panic!("{other:?}"),
        }
        // replaceable ids outside the candidate set are refused
        p.assign_task(&planned[0].id, &worker("dd"), 1).unwrap();
        let bad = TaskResponse::Deduplicate {
            replaceable_ids: BTreeSet::from(["nope".to_string()]),
            representative_vote: "nope".into(),
        };
        assert!(matches!(p.submit_task(&planned[0].id, "dd", bad, 1), Err(EngineError::Validation { .. })));
    }

    #[test]
    fn pipeline_state_round_trips_through_json() {
        let mut p = EventPipeline::new(event(2), QuotaConfig::default()).unwrap();
        p.plan_tasks(0);
        complete_open(&mut p, 0, true);
        p.advance().unwrap();
        p.drain_journal();
        let json = serde_json::to_string(&p).unwrap();
        let back: EventPipeline = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
    }
}

//! Crowd-sourced story construction from social media posts.
//!
//! Posts are grouped into moments, workers ask and answer questions, write
//! four-sentence paragraphs, vote on them and mark duplicates; the surviving
//! paragraphs form a story.

pub mod aggregation;
pub mod engine;
pub mod ingestion;
pub mod model;
pub mod rational;
pub mod service;
pub mod sim;
pub mod stats;

pub use aggregation::{
    assemble_story, group_duplicates, tally_votes_with, tally_weighted_votes, DuplicateGroup, SimilarityJudgment,
    Tally, Vote, VoteWeights,
};
pub use engine::{
    estimate_cost, EngineError, EventPipeline, EventStage, MomentStage, QuotaConfig, Task, TaskKind, TaskPayload,
    TaskResponse, TaskState, TaskView, Worker,
};
pub use ingestion::{parse_corpus, sample_corpus, ClusterAssignment, IngestError};
pub use model::{
    render_story, select_prompts, validate_paragraph, Event, EventPhase, Moment, NarrativeCategory, Paragraph, Post,
    PromptGrid, PromptTemplate, Story,
};
pub use rational::Rational;
pub use service::{ApiError, ErrorCode, FileStore, MemoryStore, Service, SnapshotStore};
pub use sim::{run_simulation, simulate_response, SimulationOutcome, WorkerProfile};
pub use stats::{chi_square_preference, friedman_test, PreferenceCount, RatingMatrix, StatResult};

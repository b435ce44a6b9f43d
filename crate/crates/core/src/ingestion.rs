//! Corpus ingestion: `posts.jsonl` plus `clusters.json` into an [`Event`],
//! corpus down-sampling, and tercile phase hints.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Event, EventPhase, Moment, Post};

/// Corpus size cap applied before the pipeline runs.
pub const DEFAULT_SAMPLE_CAP: usize = 12_000;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("posts line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("clusters file: {0}")]
    Clusters(String),
    #[error("clusters reference unknown posts: {}", .0.join(", "))]
    UnresolvedPosts(Vec<String>),
    #[error("cluster {0} has no posts")]
    EmptyCluster(String),
    #[error("clusters file contains no clusters")]
    NoClusters,
    #[error("sample cap must be at least 1")]
    InvalidCap,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub cluster_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub post_ids: Vec<String>,
}

/// Parses a line-delimited post file. Blank lines are skipped; any malformed
/// line fails the whole file.
pub fn parse_posts(jsonl: &str) -> Result<BTreeMap<String, Post>, IngestError> {
    let mut posts = BTreeMap::new();
    for (number, line) in jsonl.lines().enumerate() {
        let line_no = number + 1;
        if line.trim().is_empty() {
            continue;
        }
        let post: Post =
            serde_json::from_str(line).map_err(|e| IngestError::Line { line: line_no, message: e.to_string() })?;
        if post.text.trim().is_empty() {
            return Err(IngestError::Line { line: line_no, message: format!("post {} has empty text", post.id) });
        }
        if posts.contains_key(&post.id) {
            return Err(IngestError::Line { line: line_no, message: format!("duplicate post id {}", post.id) });
        }
        posts.insert(post.id.clone(), post);
    }
    Ok(posts)
}

pub fn parse_clusters(json: &str) -> Result<Vec<ClusterAssignment>, IngestError> {
    serde_json::from_str(json).map_err(|e| IngestError::Clusters(e.to_string()))
}

/// Builds an event: one moment per cluster, moments ordered by their earliest
/// post, posts ordered by `(ts_ms, id)`. Overlapping membership is kept.
pub fn build_event(
    event_id: &str,
    hashtag: &str,
    posts: BTreeMap<String, Post>,
    clusters: Vec<ClusterAssignment>,
) -> Result<Event, IngestError> {
    if clusters.is_empty() {
        return Err(IngestError::NoClusters);
    }
    let unresolved: BTreeSet<String> =
        clusters.iter().flat_map(|c| c.post_ids.iter()).filter(|id| !posts.contains_key(*id)).cloned().collect();
    if !unresolved.is_empty() {
        return Err(IngestError::UnresolvedPosts(unresolved.into_iter().collect()));
    }
    let mut moments = Vec::with_capacity(clusters.len());
    for cluster in clusters {
        if cluster.post_ids.is_empty() {
            return Err(IngestError::EmptyCluster(cluster.cluster_id));
        }
        moments.push(Moment {
            id: cluster.cluster_id,
            index: 0,
            post_ids: cluster.post_ids,
            phase_hint: EventPhase::Beginning,
            label: cluster.label,
        });
    }
    let event = Event { id: event_id.to_string(), hashtag: hashtag.to_string(), moments, posts };
    Ok(normalize_moments(event))
}

/// Reads both files and builds the event.
pub fn parse_corpus(
    event_id: &str,
    hashtag: &str,
    posts_file: &Path,
    clusters_file: &Path,
) -> Result<Event, IngestError> {
    let read = |path: &Path| {
        fs::read_to_string(path).map_err(|source| IngestError::Io { path: path.display().to_string(), source })
    };
    let posts = parse_posts(&read(posts_file)?)?;
    let clusters = parse_clusters(&read(clusters_file)?)?;
    build_event(event_id, hashtag, posts, clusters)
}

/// Inverse of [`build_event`]: the post lines and cluster list for an event.
pub fn export_corpus(event: &Event) -> (String, String) {
    let mut posts: Vec<&Post> = event.posts.values().collect();
    posts.sort_by(|a, b| (a.ts_ms, &a.id).cmp(&(b.ts_ms, &b.id)));
    let mut jsonl = String::new();
    for post in posts {
        // Serializing a Post cannot fail: all keys are strings.
        jsonl.push_str(&serde_json::to_string(post).expect("post serializes"));
        jsonl.push('\n');
    }
    let clusters: Vec<ClusterAssignment> = event
        .moments
        .iter()
        .map(|m| ClusterAssignment { cluster_id: m.id.clone(), label: m.label.clone(), post_ids: m.post_ids.clone() })
        .collect();
    let clusters = serde_json::to_string_pretty(&clusters).expect("clusters serialize");
    (jsonl, clusters)
}

/// Keeps at most `cap` posts, chosen uniformly without replacement. Moments
/// left empty are dropped and the rest are re-ordered, re-indexed and
/// re-hinted.
pub fn sample_corpus(event: &Event, cap: usize, seed: u64) -> Result<Event, IngestError> {
    if cap == 0 {
        return Err(IngestError::InvalidCap);
    }
    if event.posts.len() <= cap {
        return Ok(event.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<&String> = event.posts.keys().collect();
    let keep: BTreeSet<&str> =
        rand::seq::index::sample(&mut rng, ids.len(), cap).into_iter().map(|i| ids[i].as_str()).collect();
    let posts: BTreeMap<String, Post> = event
        .posts
        .iter()
        .filter(|(id, _)| keep.contains(id.as_str()))
        .map(|(id, p)| (id.clone(), p.clone()))
        .collect();
    let moments = event
        .moments
        .iter()
        .filter_map(|m| {
            let post_ids: Vec<String> = m.post_ids.iter().filter(|id| keep.contains(id.as_str())).cloned().collect();
            (!post_ids.is_empty()).then(|| Moment { post_ids, ..m.clone() })
        })
        .collect();
    Ok(normalize_moments(Event { posts, moments, ..event.clone() }))
}

/// Tercile split: the first ⌈n/3⌉ moments are beginning, the last ⌈n/3⌉ are
/// end, the rest middle. A single moment is beginning.
pub fn phase_for_index(index: usize, moment_count: usize) -> EventPhase {
    let band = moment_count.div_ceil(3);
    if index < band {
        EventPhase::Beginning
    } else if index >= moment_count.saturating_sub(band) {
        EventPhase::End
    } else {
        EventPhase::Middle
    }
}

pub fn assign_phase_hints(mut event: Event) -> Event {
    let n = event.moments.len();
    for moment in &mut event.moments {
        moment.phase_hint = phase_for_index(moment.index, n);
    }
    event
}

fn normalize_moments(mut event: Event) -> Event {
    let posts = &event.posts;
    let key = |id: &String| (posts[id].ts_ms, id.clone());
    for moment in &mut event.moments {
        moment.post_ids.sort_by_key(key);
        moment.post_ids.dedup();
    }
    event.moments.sort_by(|a, b| (key(&a.post_ids[0]), &a.id).cmp(&(key(&b.post_ids[0]), &b.id)));
    for (index, moment) in event.moments.iter_mut().enumerate() {
        moment.index = index;
    }
    assign_phase_hints(event)
}

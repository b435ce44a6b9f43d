//! Domain types shared across the pipeline: posts, moments and events, the
//! narrative-category vocabulary, the phase × category prompt grid, and the
//! paragraphs and stories workers produce.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("prompt grid is malformed: {0}")]
    PromptGrid(String),
    #[error("paragraph {id} is invalid: {violations}")]
    InvalidParagraph { id: String, violations: Violations },
    #[error("event {id} is inconsistent: {reason}")]
    InvalidEvent { id: String, reason: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// The four narrative roles a paragraph's sentences fill, in rendering order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NarrativeCategory {
    Establisher,
    Initial,
    Peak,
    Release,
}

impl NarrativeCategory {
    pub const ALL: [NarrativeCategory; 4] = [
        NarrativeCategory::Establisher,
        NarrativeCategory::Initial,
        NarrativeCategory::Peak,
        NarrativeCategory::Release,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            NarrativeCategory::Establisher => "establisher",
            NarrativeCategory::Initial => "initial",
            NarrativeCategory::Peak => "peak",
            NarrativeCategory::Release => "release",
        }
    }
}

impl fmt::Display for NarrativeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Where in the event arc a moment sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventPhase {
    Beginning,
    Middle,
    End,
}

impl EventPhase {
    pub const ALL: [EventPhase; 3] = [EventPhase::Beginning, EventPhase::Middle, EventPhase::End];

    pub fn as_str(self) -> &'static str {
        match self {
            EventPhase::Beginning => "beginning",
            EventPhase::Middle => "middle",
            EventPhase::End => "end",
        }
    }
}

impl fmt::Display for EventPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub phase: EventPhase,
    pub category: NarrativeCategory,
    pub text: String,
}

const DEFAULT_PROMPTS: [[&str; 4]; 3] = [
    [
        "Make an introduction. Write ONE sentence about anyone or anything that hasn't appeared in the story yet, with a brief description about who/what they are.",
        "Provide context. Write ONE sentence briefly summarizing the event as a whole.",
        "Describe goals. Write ONE sentence about what the people or things you wrote above want to do during this event.",
        "Describe the stakes. Write ONE sentence about what it would mean if they achieve their goal (or if they don't).",
    ],
    [
        "Set the scene. Write ONE sentence about who is involved in this paragraph and what they were doing before the action started.",
        "Start the action. Write ONE sentence about how something began.",
        "Describe the main event. Write ONE sentence about what happened at the moment people posted these photos and tweets.",
        "Resolve the action. Write ONE sentence describing the aftermath or the reaction to the moment you see in these photos and tweets.",
    ],
    [
        "Summarize the result. Write ONE sentence about the important ending result of the event as a whole.",
        "Summarize the reaction. Write ONE sentence about how people reacted to the result you wrote about in the sentence above.",
        "Describe the consequences. Write ONE sentence about what the end result of the event means for the future.",
        "Look to the future. Write ONE sentence about the next event or the next goal for the characters in this story.",
    ],
];

/// Phase × category table of writing prompts. Always exactly 3 × 4 with
/// non-empty, pairwise distinct texts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct PromptGrid {
    rows: BTreeMap<EventPhase, BTreeMap<NarrativeCategory, String>>,
}

impl Default for PromptGrid {
    fn default() -> Self {
        let rows = EventPhase::ALL
            .iter()
            .zip(DEFAULT_PROMPTS.iter())
            .map(|(phase, texts)| {
                let row = NarrativeCategory::ALL
                    .iter()
                    .zip(texts.iter())
                    .map(|(cat, text)| (*cat, text.to_string()))
                    .collect();
                (*phase, row)
            })
            .collect();
        PromptGrid { rows }
    }
}

impl PromptGrid {
    pub fn new(rows: BTreeMap<EventPhase, BTreeMap<NarrativeCategory, String>>) -> Result<Self, ModelError> {
        if rows.len() != EventPhase::ALL.len() {
            return Err(ModelError::PromptGrid(format!("expected 3 phases, found {}", rows.len())));
        }
        let mut seen = BTreeSet::new();
        for (phase, row) in &rows {
            if row.len() != NarrativeCategory::ALL.len() {
                return Err(ModelError::PromptGrid(format!("phase {phase} has {} categories, expected 4", row.len())));
            }
            for (category, text) in row {
                if text.trim().is_empty() {
                    return Err(ModelError::PromptGrid(format!("{phase}/{category} is empty")));
                }
                if !seen.insert(text.as_str()) {
                    return Err(ModelError::PromptGrid(format!("{phase}/{category} duplicates another prompt")));
                }
            }
        }
        Ok(PromptGrid { rows })
    }

    /// Loads an override grid keyed `phase -> category -> text`.
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let rows: BTreeMap<EventPhase, BTreeMap<NarrativeCategory, String>> = serde_json::from_str(text)?;
        PromptGrid::new(rows)
    }

    pub fn text(&self, phase: EventPhase, category: NarrativeCategory) -> &str {
        // Construction guarantees every cell exists.
        &self.rows[&phase][&category]
    }

    pub fn select(&self, phase: EventPhase) -> Vec<PromptTemplate> {
        NarrativeCategory::ALL
            .iter()
            .map(|&category| PromptTemplate { phase, category, text: self.text(phase, category).to_string() })
            .collect()
    }

    pub fn templates(&self) -> Vec<PromptTemplate> {
        EventPhase::ALL.iter().flat_map(|&p| self.select(p)).collect()
    }
}

impl<'de> Deserialize<'de> for PromptGrid {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rows = BTreeMap::deserialize(deserializer)?;
        PromptGrid::new(rows).map_err(serde::de::Error::custom)
    }
}

/// The default prompt row for `phase`, in category order.
pub fn select_prompts(phase: EventPhase) -> Vec<PromptTemplate> {
    PromptGrid::default().select(phase)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Platform {
    Twitter,
    Instagram,
    Vine,
    Other,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub id: String,
    pub author: String,
    /// UTC epoch milliseconds.
    pub ts_ms: i64,
    pub text: String,
    pub platform: Platform,
    #[serde(default)]
    pub media: Vec<String>,
    /// Fields we do not interpret, kept for round trips.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Moment {
    pub id: String,
    pub index: usize,
    pub post_ids: Vec<String>,
    pub phase_hint: EventPhase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub id: String,
    pub hashtag: String,
    pub moments: Vec<Moment>,
    pub posts: BTreeMap<String, Post>,
}

impl Event {
    pub fn moment(&self, moment_id: &str) -> Option<&Moment> {
        self.moments.iter().find(|m| m.id == moment_id)
    }

    pub fn moment_posts<'a>(&'a self, moment: &'a Moment) -> impl Iterator<Item = &'a Post> + 'a {
        moment.post_ids.iter().filter_map(|id| self.posts.get(id))
    }

    /// Checks the structural invariants: moments ordered by index, non-empty,
    /// chronologically sorted, every post id resolving.
    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |reason: String| ModelError::InvalidEvent { id: self.id.clone(), reason };
        let mut ids = BTreeSet::new();
        for (position, moment) in self.moments.iter().enumerate() {
            if moment.index != position {
                return Err(fail(format!("moment {} has index {} at position {position}", moment.id, moment.index)));
            }
            if !ids.insert(moment.id.as_str()) {
                return Err(fail(format!("duplicate moment id {}", moment.id)));
            }
            if moment.post_ids.is_empty() {
                return Err(fail(format!("moment {} has no posts", moment.id)));
            }
            let mut previous: Option<&Post> = None;
            for post_id in &moment.post_ids {
                let post = self
                    .posts
                    .get(post_id)
                    .ok_or_else(|| fail(format!("moment {} references unknown post {post_id}", moment.id)))?;
                if let Some(prev) = previous {
                    if prev.ts_ms > post.ts_ms {
                        return Err(fail(format!("moment {} is not chronological", moment.id)));
                    }
                }
                previous = Some(post);
            }
        }
        for (key, post) in &self.posts {
            if key != &post.id {
                return Err(fail(format!("post keyed {key} carries id {}", post.id)));
            }
            if post.text.trim().is_empty() {
                return Err(fail(format!("post {key} has empty text")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub moment_id: String,
    pub worker_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub id: String,
    pub question_id: String,
    pub worker_id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Paragraph {
    pub id: String,
    pub moment_id: String,
    pub worker_id: String,
    pub selected_phase: EventPhase,
    pub sentences: BTreeMap<NarrativeCategory, String>,
}

impl Paragraph {
    /// Sentences in rendering order. Missing slots are skipped.
    pub fn ordered_sentences(&self) -> impl Iterator<Item = &str> {
        NarrativeCategory::ALL.iter().filter_map(|c| self.sentences.get(c).map(String::as_str))
    }

    pub fn render(&self) -> String {
        self.ordered_sentences().collect::<Vec<_>>().join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Missing,
    Empty,
    /// Sentences render one per line, so embedded line breaks are rejected.
    LineBreak,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub category: NarrativeCategory,
    pub kind: ViolationKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Violations(pub Vec<Violation>);

impl fmt::Display for Violations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|v| {
                let kind = match v.kind {
                    ViolationKind::Missing => "missing",
                    ViolationKind::Empty => "empty",
                    ViolationKind::LineBreak => "contains a line break",
                };
                format!("{} {kind}", v.category)
            })
            .collect();
        f.write_str(&parts.join(", "))
    }
}

/// Checks that all four category slots are present, non-blank and single-line.
pub fn validate_paragraph(paragraph: &Paragraph) -> Result<(), Violations> {
    let violations: Vec<Violation> = NarrativeCategory::ALL
        .iter()
        .filter_map(|&category| {
            let kind = match paragraph.sentences.get(&category) {
                None => ViolationKind::Missing,
                Some(s) if s.trim().is_empty() => ViolationKind::Empty,
                Some(s) if s.contains(['\n', '\r']) => ViolationKind::LineBreak,
                Some(_) => return None,
            };
            Some(Violation { category, kind })
        })
        .collect();
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Violations(violations))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Story {
    pub event_id: String,
    pub paragraphs: Vec<Paragraph>,
    /// paragraph id → duplicate group id
    pub provenance: BTreeMap<String, String>,
}

/// Renders paragraphs one sentence per line with a blank line between
/// paragraphs and no trailing newline.
pub fn render_story(story: &Story) -> Result<String, ModelError> {
    let mut blocks = Vec::with_capacity(story.paragraphs.len());
    for paragraph in &story.paragraphs {
        validate_paragraph(paragraph)
            .map_err(|violations| ModelError::InvalidParagraph { id: paragraph.id.clone(), violations })?;
        blocks.push(paragraph.render());
    }
    Ok(blocks.join("\n\n"))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn paragraph(id: &str, texts: [&str; 4]) -> Paragraph {
        Paragraph {
            id: id.into(),
            moment_id: "m0".into(),
            worker_id: "w".into(),
            selected_phase: EventPhase::Middle,
            sentences: NarrativeCategory::ALL.iter().zip(texts).map(|(c, t)| (*c, t.to_string())).collect(),
        }
    }

    #[test]
    fn middle_row_matches_table() {
        let heads: Vec<String> =
            select_prompts(EventPhase::Middle).iter().map(|p| p.text.split('.').next().unwrap().to_string()).collect();
        assert_eq!(heads, ["Set the scene", "Start the action", "Describe the main event", "Resolve the action"]);
    }

    #[test]
    fn beginning_and_end_rows_start_as_expected() {
        assert!(select_prompts(EventPhase::Beginning)[0].text.starts_with("Make an introduction."));
        assert!(select_prompts(EventPhase::End)[0].text.starts_with("Summarize the result."));
    }

    #[test]
    fn grid_is_total_and_distinct() {
        let grid = PromptGrid::default();
        let all = grid.templates();
        assert_eq!(all.len(), 12);
        let distinct: BTreeSet<_> = all.iter().map(|t| t.text.clone()).collect();
        assert_eq!(distinct.len(), 12);
        for phase in EventPhase::ALL {
            for (i, t) in grid.select(phase).iter().enumerate() {
                assert_eq!(t.category, NarrativeCategory::ALL[i]);
                assert_eq!(t.phase, phase);
            }
        }
    }

    #[test]
    fn grid_override_round_trips_and_rejects_partial_grids() {
        let json = serde_json::to_string(&PromptGrid::default()).unwrap();
        assert_eq!(PromptGrid::from_json(&json).unwrap(), PromptGrid::default());

        let mut value: serde_json::Value = serde_json::from_str(&json).unwrap();
        value["end"].as_object_mut().unwrap().remove("peak");
        assert!(matches!(PromptGrid::from_json(&value.to_string()), Err(ModelError::PromptGrid(_))));

        let mut value: serde_json::Value = serde_json::from_str(&json).unwrap();
        value.as_object_mut().unwrap().remove("middle");
        assert!(PromptGrid::from_json(&value.to_string()).is_err());

        let mut value: serde_json::Value = serde_json::from_str(&json).unwrap();
        value["end"]["peak"] = value["end"]["release"].clone();
        assert!(PromptGrid::from_json(&value.to_string()).is_err());
    }

    #[test]
    fn validate_reports_empty_and_missing_slots() {
        let ok = paragraph("p", ["a", "b", "c", "d"]);
        assert!(validate_paragraph(&ok).is_ok());

        let empty_peak = paragraph("p", ["a", "b", "  ", "d"]);
        let v = validate_paragraph(&empty_peak).unwrap_err();
        assert_eq!(v.0, vec![Violation { category: NarrativeCategory::Peak, kind: ViolationKind::Empty }]);

        let mut missing = ok.clone();
        missing.sentences.remove(&NarrativeCategory::Peak);
        let v = validate_paragraph(&missing).unwrap_err();
        assert_eq!(v.0[0].kind, ViolationKind::Missing);
        assert_eq!(v.to_string(), "peak missing");

        let broken = paragraph("p", ["a", "b\nc", "c", "d"]);
        assert_eq!(validate_paragraph(&broken).unwrap_err().0[0].kind, ViolationKind::LineBreak);
    }

    #[test]
    fn render_handles_empty_and_single_paragraph() {
        let mut story = Story { event_id: "e".into(), paragraphs: vec![], provenance: BTreeMap::new() };
        assert_eq!(render_story(&story).unwrap(), "");
        story.paragraphs.push(paragraph("p1", ["a", "b", "c", "d"]));
        assert_eq!(render_story(&story).unwrap(), "a\nb\nc\nd");
        story.paragraphs.push(paragraph("p2", ["e", "", "g", "h"]));
        match render_story(&story) {
            Err(ModelError::InvalidParagraph { id, .. }) => assert_eq!(id, "p2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn phase_and_category_ordering() {
        assert!(NarrativeCategory::Establisher < NarrativeCategory::Initial);
        assert!(NarrativeCategory::Peak < NarrativeCategory::Release);
        assert!(EventPhase::Beginning < EventPhase::Middle && EventPhase::Middle < EventPhase::End);
    }
}

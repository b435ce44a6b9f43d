//! Turning worker judgments into decisions: weighted vote tallies per moment,
//! duplicate groups over moment winners, and story assembly.

use std::collections::{BTreeMap, BTreeSet};

use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::model::{Event, Paragraph, Story};
use crate::rational::Rational;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AggregationError {
    #[error("no votes to tally")]
    NoVotes,
    #[error("votes span several moments: {0} and {1}")]
    MixedMoments(String, String),
    #[error("vote weights must be positive and the watched weight at least the base weight")]
    InvalidWeight,
    #[error("minimum support must be at least 1")]
    InvalidSupport,
    #[error("unknown paragraph {0}")]
    UnknownParagraph(String),
    #[error("judgment {id} is malformed: {reason}")]
    InvalidJudgment { id: String, reason: String },
    #[error("paragraph {0} appears in more than one group")]
    OverlappingGroups(String),
    #[error("paragraph {0} is not covered by any group")]
    UncoveredParagraph(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub id: String,
    pub worker_id: String,
    pub moment_id: String,
    pub paragraph_id: String,
    /// Self-reported; not verified.
    pub watched_event: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimilarityJudgment {
    pub id: String,
    pub worker_id: String,
    pub anchor_paragraph_id: String,
    pub replaceable_ids: BTreeSet<String>,
    pub representative_vote: String,
}

impl SimilarityJudgment {
    pub fn check(&self) -> Result<(), AggregationError> {
        let fail = |reason: &str| AggregationError::InvalidJudgment { id: self.id.clone(), reason: reason.into() };
        if self.replaceable_ids.contains(&self.anchor_paragraph_id) {
            return Err(fail("anchor listed as replaceable"));
        }
        if self.representative_vote != self.anchor_paragraph_id
            && !self.replaceable_ids.contains(&self.representative_vote)
        {
            return Err(fail("representative vote outside the judged set"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DuplicateGroup {
    pub id: String,
    pub member_paragraph_ids: BTreeSet<String>,
    pub representative: String,
    pub min_moment_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VoteWeights {
    pub base: Rational,
    pub watched: Rational,
}

impl VoteWeights {
    pub fn watched(weight: Rational) -> Self {
        VoteWeights { base: Rational::from_integer(1), watched: weight }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    pub winner: String,
    #[serde(with = "tally_serde")]
    pub weights: BTreeMap<String, Rational>,
}

mod tally_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(map: &BTreeMap<String, Rational>, s: S) -> Result<S::Ok, S::Error> {
        let text: BTreeMap<&String, String> =
            map.iter().map(|(k, v)| (k, crate::rational::format_rational(v))).collect();
        text.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<String, Rational>, D::Error> {
        let text: BTreeMap<String, String> = BTreeMap::deserialize(d)?;
        text.into_iter()
            .map(|(k, v)| crate::rational::parse_rational(&v).map(|r| (k, r)).map_err(serde::de::Error::custom))
            .collect()
    }
}

/// Plain votes count 1, watched votes count `weight_watched`; the winner is
/// the heaviest paragraph with ties going to the smallest id.
pub fn tally_weighted_votes(votes: &[Vote], weight_watched: Rational) -> Result<Tally, AggregationError> {
    if weight_watched < Rational::from_integer(1) {
        return Err(AggregationError::InvalidWeight);
    }
    tally_votes_with(votes, VoteWeights::watched(weight_watched))
}

pub fn tally_votes_with(votes: &[Vote], weights: VoteWeights) -> Result<Tally, AggregationError> {
    if weights.base <= Rational::zero() || weights.watched < weights.base {
        return Err(AggregationError::InvalidWeight);
    }
    let first = votes.first().ok_or(AggregationError::NoVotes)?;
    let mut sums: BTreeMap<String, Rational> = BTreeMap::new();
    for vote in votes {
        if vote.moment_id != first.moment_id {
            return Err(AggregationError::MixedMoments(first.moment_id.clone(), vote.moment_id.clone()));
        }
        let weight = if vote.watched_event { weights.watched } else { weights.base };
        *sums.entry(vote.paragraph_id.clone()).or_insert_with(Rational::zero) += weight;
    }
    // BTreeMap iterates ids ascending, so strict `>` keeps the smallest id on ties.
    let mut winner: Option<(&String, Rational)> = None;
    for (id, weight) in &sums {
        if winner.is_none_or(|(_, best)| *weight > best) {
            winner = Some((id, *weight));
        }
    }
    let winner = winner.map(|(id, _)| id.clone()).ok_or(AggregationError::NoVotes)?;
    Ok(Tally { winner, weights: sums })
}

struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    fn new(len: usize) -> Self {
        UnionFind { parent: (0..len).collect(), size: vec![1; len] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        let mut root = x;
        while self.parent[root] != root {
            root = self.parent[root];
        }
        while self.parent[x] != root {
            let next = self.parent[x];
            self.parent[x] = root;
            x = next;
        }
        root
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        let (big, small) = if self.size[ra] >= self.size[rb] { (ra, rb) } else { (rb, ra) };
        self.parent[small] = big;
        self.size[big] += self.size[small];
    }
}

/// Pairs of paragraphs judged similar by at least `min_support` distinct
/// workers, in either direction.
pub fn similarity_edges(judgments: &[SimilarityJudgment], min_support: usize) -> BTreeSet<(String, String)> {
    let mut supporters: BTreeMap<(String, String), BTreeSet<&str>> = BTreeMap::new();
    for judgment in judgments {
        for other in &judgment.replaceable_ids {
            let a = &judgment.anchor_paragraph_id;
            let key = if a < other { (a.clone(), other.clone()) } else { (other.clone(), a.clone()) };
            supporters.entry(key).or_default().insert(judgment.worker_id.as_str());
        }
    }
    supporters.into_iter().filter(|(_, workers)| workers.len() >= min_support).map(|(pair, _)| pair).collect()
}

/// Groups paragraphs into connected components of the supported-similarity
/// relation. `paragraph_moments` maps each paragraph id to its moment index.
/// Groups come back ordered by earliest moment, ids `g0`, `g1`, ...
pub fn group_duplicates(
    judgments: &[SimilarityJudgment],
    paragraph_moments: &BTreeMap<String, usize>,
    min_support: usize,
) -> Result<Vec<DuplicateGroup>, AggregationError> {
    if min_support == 0 {
        return Err(AggregationError::InvalidSupport);
    }
    let known = |id: &String| {
        if paragraph_moments.contains_key(id) {
            Ok(())
        } else {
            Err(AggregationError::UnknownParagraph(id.clone()))
        }
    };
    for judgment in judgments {
        judgment.check()?;
        known(&judgment.anchor_paragraph_id)?;
        judgment.replaceable_ids.iter().try_for_each(known)?;
    }

    let ids: Vec<&String> = paragraph_moments.keys().collect();
    let position: BTreeMap<&String, usize> = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
    let mut sets = UnionFind::new(ids.len());
    for (a, b) in similarity_edges(judgments, min_support) {
        sets.union(position[&a], position[&b]);
    }

    let mut rep_votes: BTreeMap<&str, usize> = BTreeMap::new();
    for judgment in judgments {
        *rep_votes.entry(judgment.representative_vote.as_str()).or_default() += 1;
    }

    let mut components: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
    for (i, id) in ids.iter().enumerate() {
        components.entry(sets.find(i)).or_default().insert((*id).clone());
    }
    let mut groups: Vec<DuplicateGroup> = components
        .into_values()
        .map(|members| {
            let min_moment_index = members.iter().map(|m| paragraph_moments[m]).min().unwrap_or(0);
            // Members iterate ascending; strict `>` keeps the smallest id on ties.
            let mut representative = members.first().cloned().unwrap_or_default();
            let mut best = 0;
            for member in &members {
                let count = rep_votes.get(member.as_str()).copied().unwrap_or(0);
                if count > best {
                    best = count;
                    representative = member.clone();
                }
            }
            DuplicateGroup { id: String::new(), member_paragraph_ids: members, representative, min_moment_index }
        })
        .collect();
    groups.sort_by(|a, b| {
        (a.min_moment_index, a.member_paragraph_ids.first()).cmp(&(b.min_moment_index, b.member_paragraph_ids.first()))
    });
    for (i, group) in groups.iter_mut().enumerate() {
        group.id = format!("g{i}");
    }
    Ok(groups)
}

/// One representative per group, ordered by the group's earliest moment.
/// `paragraphs` are the moment winners the groups must partition.
pub fn assemble_story(
    event: &Event,
    paragraphs: &[Paragraph],
    groups: &[DuplicateGroup],
) -> Result<Story, AggregationError> {
    let by_id: BTreeMap<&str, &Paragraph> = paragraphs.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut covered = BTreeSet::new();
    for group in groups {
        for member in &group.member_paragraph_ids {
            if !by_id.contains_key(member.as_str()) {
                return Err(AggregationError::UnknownParagraph(member.clone()));
            }
            if !covered.insert(member.as_str()) {
                return Err(AggregationError::OverlappingGroups(member.clone()));
            }
        }
        if !group.member_paragraph_ids.contains(&group.representative) {
            return Err(AggregationError::UnknownParagraph(group.representative.clone()));
        }
    }
    if let Some(missing) = by_id.keys().find(|id| !covered.contains(*id)) {
        return Err(AggregationError::UncoveredParagraph(missing.to_string()));
    }

    let mut ordered: Vec<&DuplicateGroup> = groups.iter().collect();
    ordered.sort_by(|a, b| (a.min_moment_index, &a.id).cmp(&(b.min_moment_index, &b.id)));
    let mut story = Story { event_id: event.id.clone(), paragraphs: Vec::new(), provenance: BTreeMap::new() };
    for group in ordered {
        let paragraph = by_id[group.representative.as_str()];
        story.provenance.insert(paragraph.id.clone(), group.id.clone());
        story.paragraphs.push(paragraph.clone());
    }
    Ok(story)
}

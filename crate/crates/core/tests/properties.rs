use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use crowdstory_core::aggregation::{group_duplicates, tally_votes_with, SimilarityJudgment, Vote, VoteWeights};
use crowdstory_core::engine::{EventPipeline, QuotaConfig, TaskKind, TaskPayload, TaskState};
use crowdstory_core::ingestion::{
    build_event, export_corpus, parse_clusters, parse_posts, sample_corpus, ClusterAssignment,
};
use crowdstory_core::model::{render_story, Event, EventPhase, NarrativeCategory, Paragraph, Platform, Post, Story};
use crowdstory_core::sim::{pick_worker, simulate_response, standard_pool};
use crowdstory_core::stats::{chi_square_preference, friedman_test, PreferenceCount, RatingMatrix};
use crowdstory_core::Rational;

fn judgments_strategy() -> impl Strategy<Value = (Vec<SimilarityJudgment>, BTreeMap<String, usize>)> {
    (1usize..=8).prop_flat_map(|n| {
        let judgment = (0..n, prop::collection::btree_set(0..n, 0..n), 0usize..4, any::<prop::sample::Index>());
        (prop::collection::vec(0..n, n), prop::collection::vec(judgment, 0..16)).prop_map(move |(moments, raw)| {
            let moments: BTreeMap<String, usize> =
                moments.into_iter().enumerate().map(|(i, m)| (format!("p{i}"), m)).collect();
            let judgments = raw
                .into_iter()
                .enumerate()
                .map(|(j, (anchor, others, worker, pick))| {
                    let replaceable: BTreeSet<String> =
                        others.into_iter().filter(|o| *o != anchor).map(|o| format!("p{o}")).collect();
                    let anchor = format!("p{anchor}");
                    let judged: Vec<&String> = std::iter::once(&anchor).chain(&replaceable).collect();
                    let representative_vote = pick.get(&judged).to_string();
                    SimilarityJudgment {
                        id: format!("j{j}"),
                        worker_id: format!("w{worker}"),
                        anchor_paragraph_id: anchor,
                        replaceable_ids: replaceable,
                        representative_vote,
                    }
                })
                .collect();
            (judgments, moments)
        })
    })
}

proptest! {
    #[test]
    fn grouping_ignores_judgment_order(
        (judgments, moments) in judgments_strategy(),
        support in 1usize..=3,
        seed in any::<u64>(),
    ) {
        let mut shuffled = judgments.clone();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        prop_assert_eq!(
            group_duplicates(&judgments, &moments, support).unwrap(),
            group_duplicates(&shuffled, &moments, support).unwrap()
        );
    }

    #[test]
    fn raising_support_only_refines_groups((judgments, moments) in judgments_strategy(), support in 1usize..=3) {
        let coarse = group_duplicates(&judgments, &moments, support).unwrap();
        let fine = group_duplicates(&judgments, &moments, support + 1).unwrap();
        prop_assert!(fine.len() >= coarse.len());
        for g in &fine {
            prop_assert!(coarse.iter().any(|c| g.member_paragraph_ids.is_subset(&c.member_paragraph_ids)));
        }
    }

    #[test]
    fn groups_partition_paragraphs((judgments, moments) in judgments_strategy(), support in 1usize..=3) {
        let groups = group_duplicates(&judgments, &moments, support).unwrap();
        let mut all = BTreeSet::new();
        for g in &groups {
            prop_assert!(g.member_paragraph_ids.contains(&g.representative));
            for m in &g.member_paragraph_ids {
                prop_assert!(all.insert(m.clone()));
            }
        }
        prop_assert_eq!(all.len(), moments.len());
    }

    #[test]
    fn tally_winner_is_scale_invariant(
        votes in prop::collection::vec((0usize..4, any::<bool>()), 1..12),
        watched in 1i64..5,
        base in 1i64..5,
        scale in 1i64..50,
        scale_den in 1i64..50,
    ) {
        let votes: Vec<Vote> = votes
            .into_iter()
            .enumerate()
            .map(|(i, (p, w))| Vote {
                id: format!("v{i}"),
                worker_id: format!("w{i}"),
                moment_id: "m".into(),
                paragraph_id: format!("p{p}"),
                watched_event: w,
            })
            .collect();
        let weights = VoteWeights { base: Rational::from_integer(base), watched: Rational::from_integer(base + watched) };
        let c = Rational::new(scale, scale_den);
        let scaled = VoteWeights { base: weights.base * c, watched: weights.watched * c };
        prop_assert_eq!(
            tally_votes_with(&votes, weights).unwrap().winner,
            tally_votes_with(&votes, scaled).unwrap().winner
        );
    }

    #[test]
    fn chi_square_is_symmetric_and_grows_with_imbalance(n in 1u64..200, a in 0u64..200) {
        let a = a % (n + 1);
        let here = chi_square_preference(PreferenceCount { n, count_a: a }).unwrap();
        let mirror = chi_square_preference(PreferenceCount { n, count_a: n - a }).unwrap();
        prop_assert_eq!(here.statistic, mirror.statistic);
        prop_assert!((0.0..=1.0).contains(&here.p_value));
        if 2 * a > n && a < n {
            let more = chi_square_preference(PreferenceCount { n, count_a: a + 1 }).unwrap();
            prop_assert!(more.statistic > here.statistic);
            prop_assert!(more.p_value <= here.p_value);
        }
    }

    #[test]
    fn friedman_ignores_monotone_transforms(
        rows in prop::collection::vec(prop::collection::vec(1u8..=7, 3), 2..8),
    ) {
        let likert: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let stretched: Vec<Vec<f64>> = likert.iter().map(|r| r.iter().map(|v| v * v * v + 10.0).collect()).collect();
        let a = friedman_test(&RatingMatrix::likert(likert).unwrap());
        let b = friedman_test(&RatingMatrix::new(stretched).unwrap());
        prop_assert_eq!(a, b);
    }
}

fn corpus_strategy() -> impl Strategy<Value = Event> {
    prop::collection::vec(
        prop::collection::vec(("[A-Za-z#@][A-Za-z0-9 #@!?.,'\"\\\\]{0,40}", -1_000_000i64..1_000_000), 1..6),
        1..6,
    )
    .prop_map(|clusters| {
        let mut posts = BTreeMap::new();
        let mut assignments = Vec::new();
        for (c, cluster) in clusters.into_iter().enumerate() {
            let mut ids = Vec::new();
            for (k, (text, ts)) in cluster.into_iter().enumerate() {
                let id = format!("c{c}k{k}");
                posts.insert(
                    id.clone(),
                    Post {
                        id: id.clone(),
                        author: format!("a{k}"),
                        ts_ms: ts,
                        text,
                        platform: if k % 2 == 0 { Platform::Twitter } else { Platform::Instagram },
                        media: vec![],
                        extra: BTreeMap::new(),
                    },
                );
                ids.push(id);
            }
            assignments.push(ClusterAssignment { cluster_id: format!("cluster{c}"), label: None, post_ids: ids });
        }
        build_event("ev", "#ev", posts, assignments).unwrap()
    })
}

proptest! {
    #[test]
    fn corpus_export_round_trips(event in corpus_strategy()) {
        let (jsonl, clusters) = export_corpus(&event);
        let rebuilt = build_event(
            &event.id,
            &event.hashtag,
            parse_posts(&jsonl).unwrap(),
            parse_clusters(&clusters).unwrap(),
        )
        .unwrap();
        prop_assert_eq!(rebuilt, event);
    }

    #[test]
    fn sampling_respects_cap_and_seed(event in corpus_strategy(), cap in 1usize..30, seed in any::<u64>()) {
        let a = sample_corpus(&event, cap, seed).unwrap();
        prop_assert!(a.posts.len() <= cap.max(1));
        prop_assert_eq!(&a, &sample_corpus(&event, cap, seed).unwrap());
        a.validate().unwrap();
        for (i, m) in a.moments.iter().enumerate() {
            prop_assert_eq!(m.index, i);
            prop_assert!(!m.post_ids.is_empty());
        }
    }

    #[test]
    fn rendering_separates_paragraphs(
        texts in prop::collection::vec(prop::collection::vec("[a-zA-Z][a-zA-Z ,.]{0,30}", 4), 1..10),
    ) {
        let paragraphs: Vec<Paragraph> = texts
            .into_iter()
            .enumerate()
            .map(|(i, s)| Paragraph {
                id: format!("p{i}"),
                moment_id: format!("m{i}"),
                worker_id: "w".into(),
                selected_phase: EventPhase::Middle,
                sentences: NarrativeCategory::ALL.iter().copied().zip(s).collect(),
            })
            .collect();
        let story = Story { event_id: "ev".into(), provenance: BTreeMap::new(), paragraphs: paragraphs.clone() };
        let text = render_story(&story).unwrap();
        let blocks: Vec<&str> = text.split("\n\n").collect();
        prop_assert_eq!(blocks.len(), paragraphs.len());
        for (block, p) in blocks.iter().zip(&paragraphs) {
            let lines: Vec<&str> = block.split('\n').collect();
            prop_assert_eq!(lines, p.ordered_sentences().collect::<Vec<_>>());
        }
    }
}

fn small_event() -> Event {
    let mut posts = BTreeMap::new();
    let mut clusters = Vec::new();
    for m in 0..2 {
        let ids: Vec<String> = (0..3).map(|k| format!("m{m}p{k}")).collect();
        for (k, id) in ids.iter().enumerate() {
            posts.insert(
                id.clone(),
                Post {
                    id: id.clone(),
                    author: "a".into(),
                    ts_ms: (m * 10 + k) as i64,
                    text: format!("Keeper{m} saves shot{k} from Striker{m}"),
                    platform: Platform::Twitter,
                    media: vec![],
                    extra: BTreeMap::new(),
                },
            );
        }
        clusters.push(ClusterAssignment { cluster_id: format!("c{m}"), label: None, post_ids: ids });
    }
    build_event("ev", "#ev", posts, clusters).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Drives random partial runs and checks that advancing twice changes
    /// nothing the second time and that writers always see every approved answer.
    #[test]
    fn advance_is_idempotent_and_writers_see_all_answers(seed in any::<u64>(), steps in 1usize..80) {
        let pool = standard_pool(10, 2);
        let mut p = EventPipeline::new(small_event(), QuotaConfig::default()).unwrap();
        let mut now = 0;
        for _ in 0..steps {
            now += 1;
            p.plan_tasks(now);
            let Some(task_id) = p.open_tasks().map(|t| t.id.clone()).next() else {
                p.advance().unwrap();
                continue;
            };
            let Some(profile) = pick_worker(&p, &task_id, &pool, seed).cloned() else { break };
            p.assign_task(&task_id, &profile.worker(), now).unwrap();
            let view = p.view(&task_id).unwrap();
            if let TaskPayload::WriteSummary { qa, moment_id, .. } = &view.payload {
                let shown: usize = qa.iter().map(|pair| pair.answers.len()).sum();
                let approved = p.tasks().filter(|t| {
                    t.kind == TaskKind::AnswerQuestion
                        && t.state == TaskState::Approved
                        && t.moment_id.as_deref() == Some(moment_id.as_str())
                }).count();
                prop_assert_eq!(shown, approved);
            }
            let response = simulate_response(&view, &profile).unwrap();
            p.submit_task(&task_id, &profile.worker_id, response, now).unwrap();
            p.advance().unwrap();
            let before = serde_json::to_string(&p).unwrap();
            prop_assert!(p.advance().unwrap().is_noop());
            prop_assert_eq!(before, serde_json::to_string(&p).unwrap());
        }
    }
}

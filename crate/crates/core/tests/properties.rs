//! Invariants of metrics, graph operations, expansion probabilities, output
//! ranking and configuration, checked on generated inputs.

use proptest::prelude::*;

use bigraph_core::eval::{answer_recall, em_f1, hits_at_tokens, ndcg, HitsTokenizer};
use bigraph_core::expand::softmax;
use bigraph_core::graph::{rank_order, BipartiteGraph, ScoredEdge};
use bigraph_core::refine::rank_output;
use bigraph_core::PipelineConfig;

const WORDS: &[&str] = &[
    "alder", "birch", "cedar", "elm", "fir", "hazel", "larch", "oak",
];

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(WORDS).prop_map(str::to_owned)
}

fn texts() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(
        prop::collection::vec(word(), 1..5).prop_map(|w| w.join(" ")),
        0..12,
    )
}

fn edge() -> impl Strategy<Value = ScoredEdge> {
    (0..6usize, 0..6usize, -5.0f64..5.0)
        .prop_map(|(s, p, score)| ScoredEdge::new(format!("s{s}"), format!("p{p}"), score))
}

fn edges() -> impl Strategy<Value = Vec<ScoredEdge>> {
    prop::collection::vec(edge(), 0..30)
}

proptest! {
    #[test]
    fn answer_recall_is_monotone_in_k(texts in texts(), answer in word(), k in 0..15usize) {
        if answer_recall(&texts, &answer, k) {
            prop_assert!(answer_recall(&texts, &answer, k + 1));
        }
    }

    #[test]
    fn ndcg_lies_in_the_unit_interval(labels in prop::collection::vec(any::<bool>(), 0..20), k in 1..25usize) {
        let v = ndcg(&labels, k);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&v), "{v}");
        let mut ideal = labels.clone();
        ideal.sort_by(|a, b| b.cmp(a));
        let best = ndcg(&ideal, k);
        prop_assert!(best == 0.0 || (best - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unlimited_hits_budget_matches_recall_over_the_whole_list(texts in texts(), answer in word()) {
        for tokenizer in [HitsTokenizer::Whitespace, HitsTokenizer::Alphanumeric] {
            prop_assert_eq!(
                hits_at_tokens(&texts, &answer, usize::MAX, tokenizer),
                answer_recall(&texts, &answer, texts.len())
            );
        }
    }

    #[test]
    fn exact_match_implies_full_f1(pred in "[a-z ]{0,20}", gold in "[a-z ]{0,20}") {
        let (em, f1) = em_f1(&pred, &gold);
        prop_assert!((0.0..=1.0).contains(&f1));
        if em == 1.0 {
            prop_assert_eq!(f1, 1.0);
        }
        let (self_em, self_f1) = em_f1(&gold, &gold);
        prop_assert_eq!(self_em, self_f1);
    }

    #[test]
    fn adding_edges_keeps_the_larger_score(a in edges(), b in edges()) {
        let g = BipartiteGraph::merge_edges(a.clone()).unwrap();
        let merged = g.add_edges(b.clone()).unwrap();
        for e in a.iter().chain(&b) {
            let best = a.iter().chain(&b).filter(|x| x.key() == e.key()).map(|x| x.score).fold(f64::MIN, f64::max);
            prop_assert_eq!(merged.score(&e.key()), Some(best));
        }
        let reversed = BipartiteGraph::merge_edges(b).unwrap().add_edges(a).unwrap();
        prop_assert_eq!(merged, reversed);
    }

    #[test]
    fn removing_edges_leaves_no_isolated_touched_nodes(a in edges(), drop in prop::collection::vec(any::<prop::sample::Index>(), 0..10)) {
        let g = BipartiteGraph::merge_edges(a).unwrap();
        let keys: Vec<_> = g.edge_keys().cloned().collect();
        if keys.is_empty() {
            return Ok(());
        }
        let gone: Vec<_> = drop.iter().map(|i| keys[i.index(keys.len())].clone()).collect();
        let h = g.remove_edges(&gone);
        for key in &gone {
            prop_assert!(!h.contains_edge(key));
        }
        for node in h.nodes() {
            prop_assert!(h.degree(node) > 0);
        }
        prop_assert_eq!(h.edge_count() + gone.iter().collect::<std::collections::BTreeSet<_>>().len(), g.edge_count());
    }

    #[test]
    fn stars_partition_the_edge_set(a in edges()) {
        let g = BipartiteGraph::merge_edges(a).unwrap();
        let mut from_stars: Vec<_> = g.star_decompose().iter().flat_map(|s| s.edges().collect::<Vec<_>>()).collect();
        from_stars.sort_by(rank_order);
        prop_assert_eq!(from_stars, g.ranked_edges());
    }

    #[test]
    fn softmax_is_a_distribution_preserving_order(scores in prop::collection::vec(-50.0f64..50.0, 1..40)) {
        let p = softmax(&scores);
        prop_assert_eq!(p.len(), scores.len());
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if scores[i] > scores[j] {
                    prop_assert!(p[i] >= p[j]);
                }
            }
        }
    }

    #[test]
    fn output_prefers_refined_edges_then_fills_from_removed(kept in edges(), removed in edges(), k in 0..40usize) {
        let refined = BipartiteGraph::merge_edges(kept).unwrap();
        let removed: Vec<_> = {
            let fill = BipartiteGraph::merge_edges(removed).unwrap();
            fill.edges().filter(|e| !refined.contains_edge(&e.key())).collect()
        };
        let out = rank_output(&refined, &removed, k);
        prop_assert_eq!(out.len(), k.min(refined.edge_count() + removed.len()));
        let head = refined.edge_count().min(k);
        prop_assert_eq!(&out[..head], &refined.ranked_edges()[..head]);
        for w in out[head..].windows(2) {
            prop_assert_ne!(rank_order(&w[0], &w[1]), std::cmp::Ordering::Greater);
        }
        prop_assert!(out[head..].iter().all(|e| !refined.contains_edge(&e.key())));
    }

    #[test]
    fn config_serialization_is_canonical(seed in any::<u64>(), k in 1..50usize, b in 1..20usize, fanout in 1..64usize) {
        let mut config = PipelineConfig { seed, k, b, fanout, ..PipelineConfig::default() };
        config.propagate_seed();
        let text = config.to_toml().unwrap();
        let parsed = PipelineConfig::from_toml(&text).unwrap();
        prop_assert_eq!(parsed.to_toml().unwrap(), text);
        prop_assert_eq!(parsed, config);
    }
}

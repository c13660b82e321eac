use std::path::Path;

use proptest::prelude::*;

use sparsealign::align::{score_pair, AlignmentStrategy};
use sparsealign::eval::{mrr_at_k, ndcg_at_k, recall_at_k, Qrels};
use sparsealign::index::{build_index, IndexKind};
use sparsealign::retrieve::RankedList;
use sparsealign::salience::{prune_select, SalienceHead, Side};
use sparsealign::solver::{solve_relaxed_topk, SolverConfig};
use sparsealign::store::{
    decode_store, encode_store, DocumentRecord, EmbeddingStore, TokenEmbeddings,
};

fn scores_and_k() -> impl Strategy<Value = (Vec<f64>, usize)> {
    prop::collection::vec(-5.0f64..5.0, 2..64).prop_flat_map(|s| {
        let m = s.len();
        (Just(s), 1..=m)
    })
}

fn tokens(dim: usize, n: std::ops::Range<usize>) -> impl Strategy<Value = TokenEmbeddings> {
    prop::collection::vec(prop::collection::vec(-1.0f32..1.0, dim), n).prop_filter_map(
        "zero row",
        |rows| {
            if rows.iter().any(|r| r.iter().all(|v| v.abs() < 1e-3)) {
                return None;
            }
            let ids = (0..rows.len() as u32).collect();
            TokenEmbeddings::from_rows_normalized(&rows, ids).ok()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn solver_is_feasible((s, k) in scores_and_k(), eps in prop::sample::select(vec![1e-3, 0.01, 0.1, 1.0])) {
        let r = solve_relaxed_topk(&s, k, &SolverConfig::with_epsilon(eps)).unwrap();
        let sum: f64 = r.lambda.iter().sum();
        prop_assert!((sum - k as f64).abs() <= 1e-6);
        prop_assert!(r.lambda.iter().all(|&l| (0.0..=1.0 + 1e-9).contains(&l)));
        prop_assert!(r.dual_b.iter().all(|&b| b <= 0.0));
    }

    #[test]
    fn solver_gate_follows_score_order((s, k) in scores_and_k()) {
        let r = solve_relaxed_topk(&s, k, &SolverConfig::default()).unwrap();
        for i in 0..s.len() {
            for j in 0..s.len() {
                if s[i] > s[j] {
                    prop_assert!(r.lambda[i] >= r.lambda[j] - 1e-9);
                }
            }
        }
    }

    #[test]
    fn solver_commutes_with_permutation((s, k) in scores_and_k(), seed in any::<u64>()) {
        let m = s.len();
        let mut perm: Vec<usize> = (0..m).collect();
        perm.sort_by_key(|&i| (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed);
        let shuffled: Vec<f64> = perm.iter().map(|&i| s[i]).collect();
        let config = SolverConfig::with_epsilon(0.05);
        let a = solve_relaxed_topk(&s, k, &config).unwrap();
        let b = solve_relaxed_topk(&shuffled, k, &config).unwrap();
        for (slot, &i) in perm.iter().enumerate() {
            prop_assert!((a.lambda[i] - b.lambda[slot]).abs() <= 1e-7);
        }
    }

    #[test]
    fn pruning_nests_and_ignores_scale(
        sal in prop::collection::vec(0.0f64..10.0, 1..80),
        b1 in 0.01f64..1.0,
        b2 in 0.01f64..1.0,
        c in 0.1f64..100.0,
    ) {
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        let small = prune_select(&sal, lo);
        let large = prune_select(&sal, hi);
        prop_assert!(small.iter().all(|i| large.contains(i)));
        prop_assert!(small.windows(2).all(|w| w[0] < w[1]));
        let scaled: Vec<f64> = sal.iter().map(|v| v * c).collect();
        prop_assert_eq!(prune_select(&scaled, hi), large);
    }

    #[test]
    fn metrics_ignore_monotone_rescoring(
        scores in prop::collection::vec(-10.0f64..10.0, 1..30),
        rel in prop::collection::vec(0u32..3, 30),
        c in 0.01f64..100.0,
        shift in -5.0f64..5.0,
    ) {
        let mut qrels = Qrels::new();
        for (i, &r) in rel.iter().enumerate() {
            if r > 0 {
                qrels.insert("q", format!("d{i}"), r);
            }
        }
        prop_assume!(!qrels.is_empty());
        let list = |f: &dyn Fn(f64) -> f64| {
            let pairs = scores.iter().enumerate().map(|(i, &s)| (format!("d{i}"), f(s))).collect();
            RankedList::from_scores("q", pairs, 1000)
        };
        let a = list(&|s| s);
        let b = list(&|s| c * s + shift);
        prop_assert_eq!(ndcg_at_k(&a, &qrels, 10).unwrap(), ndcg_at_k(&b, &qrels, 10).unwrap());
        prop_assert_eq!(mrr_at_k(&a, &qrels, 10).unwrap(), mrr_at_k(&b, &qrels, 10).unwrap());
        prop_assert_eq!(recall_at_k(&a, &qrels, 5).unwrap(), recall_at_k(&b, &qrels, 5).unwrap());
    }

    #[test]
    fn store_roundtrips(docs in prop::collection::vec(tokens(6, 1..10), 1..6), with_salience in any::<bool>()) {
        let records: Vec<DocumentRecord> = docs
            .into_iter()
            .enumerate()
            .map(|(i, mut t)| {
                if with_salience {
                    let s = (0..t.len()).map(|j| j as f32 * 0.5).collect();
                    t.set_salience(Some(s)).unwrap();
                }
                DocumentRecord::new(format!("doc-{i}"), t)
            })
            .collect();
        let bytes = encode_store(&records).unwrap();
        let store = decode_store(&bytes).unwrap();
        prop_assert_eq!(store.to_records(), records.clone());
        prop_assert_eq!(encode_store(&store.to_records()).unwrap(), bytes);
    }

    #[test]
    fn top1_scores_are_bounded(q in tokens(5, 1..6), d in tokens(5, 1..12)) {
        let s = score_pair(q.view(), d.view(), &AlignmentStrategy::COLBERT, true, None).unwrap().score;
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&s));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pruned_index_is_contained(
        docs in prop::collection::vec(tokens(4, 1..12), 1..8),
        weights in prop::collection::vec(-1.0f64..1.0, 4),
        b1 in 0.05f64..1.0,
        b2 in 0.05f64..1.0,
    ) {
        let records = docs.into_iter().enumerate().map(|(i, t)| DocumentRecord::new(format!("d{i}"), t)).collect();
        let store = EmbeddingStore::from_records(records).unwrap();
        let head = SalienceHead::new(Side::Document, weights, 0.5);
        let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        let small = build_index(&store, Some(&head), lo, IndexKind::Flat, 0, 0).unwrap();
        let large = build_index(&store, Some(&head), hi, IndexKind::Flat, 0, 0).unwrap();
        for doc in 0..store.len() {
            let kept = large.doc_tokens(doc);
            prop_assert!(!small.doc_tokens(doc).is_empty());
            prop_assert!(small.doc_tokens(doc).iter().all(|t| kept.contains(t)));
        }
    }
}

#[test]
fn qrels_parse_rejects_bad_relevance() {
    assert!(Qrels::parse("q 0 d x\n", Path::new("bad")).is_err());
}

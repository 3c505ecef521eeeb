use std::collections::BTreeSet;

use proptest::prelude::*;

use villa_core::corpus::GroundTruthDataset;
use villa_core::embedding::EmbeddingVector;
use villa_core::evaluation::{
    aggregate, context_restricted_truth, mann_whitney_u, mann_whitney_u_normal, set_metrics, Cell, Metrics,
    PValueMethod, Scope, StdKind,
};
use villa_core::mutation::Mutation;
use villa_core::pipeline::Method;
use villa_core::vectorstore::{DatastoreEntry, Query, VectorStore};

fn small_set() -> impl Strategy<Value = BTreeSet<u8>> {
    proptest::collection::btree_set(0u8..30, 0..20)
}

fn cell(f1: f64, i: u32) -> Cell {
    Cell {
        method: Method::Villa,
        responder: "r".into(),
        datastore: "d".into(),
        protein: "p".into(),
        iteration: i,
        scope: Scope::Overall,
        metrics: Metrics {
            precision: f1,
            recall: f1,
            f1,
            tp: 0,
            fp: 0,
            fn_: 0,
        },
    }
}

proptest! {
    #[test]
    fn metrics_are_symmetric(a in small_set(), b in small_set()) {
        let ab = set_metrics(&a, &b);
        let ba = set_metrics(&b, &a);
        prop_assert_eq!(ab.f1, ba.f1);
        prop_assert_eq!(ab.precision, ba.recall);
        prop_assert!((0.0..=1.0).contains(&ab.f1));
    }

    #[test]
    fn context_precision_never_exceeds_overall(
        retrieved in proptest::collection::btree_set(0u8..30, 1..20),
        overall in small_set(),
        keep in proptest::collection::vec(any::<bool>(), 30),
    ) {
        let ctx: BTreeSet<u8> = overall.iter().copied().filter(|x| keep[*x as usize]).collect();
        prop_assert!(set_metrics(&retrieved, &ctx).precision <= set_metrics(&retrieved, &overall).precision);
    }

    #[test]
    fn restricted_truth_is_a_subset(
        rows in proptest::collection::vec((1u32..50, 0usize..6), 0..40),
        context in proptest::collection::btree_set(0usize..6, 0..6),
    ) {
        let mut gt = GroundTruthDataset::default();
        for (pos, p) in &rows {
            gt.insert("HA", Mutation::new('A', *pos, 'C').unwrap(), &format!("P{p}"));
        }
        let pubs: BTreeSet<String> = context.iter().map(|p| format!("P{p}")).collect();
        let sub = context_restricted_truth(&gt, "HA", &pubs);
        let all = gt.protein("HA").map(|t| t.mutations.clone()).unwrap_or_default();
        prop_assert!(sub.is_subset(&all));
    }

    #[test]
    fn aggregate_mean_lies_within_range(values in proptest::collection::vec(0.0f64..=1.0, 1..30)) {
        let cells: Vec<Cell> = values.iter().enumerate().map(|(i, v)| cell(*v, i as u32)).collect();
        let g = aggregate(&cells, StdKind::Population).unwrap().groups.remove(0);
        prop_assert!(g.f1.min - 1e-12 <= g.f1.mean && g.f1.mean <= g.f1.max + 1e-12);
        let all_equal = values.iter().all(|v| *v == values[0]);
        prop_assert_eq!(g.f1.std == 0.0, all_equal);
    }

    #[test]
    fn exact_and_normal_p_values_agree(
        pool in proptest::collection::btree_set(0u32..10_000, 16)
            .prop_map(|s| s.into_iter().collect::<Vec<_>>())
            .prop_shuffle(),
    ) {
        let values: Vec<f64> = pool.into_iter().map(f64::from).collect();
        let (a, b) = values.split_at(8);
        let exact = mann_whitney_u(a, b).unwrap();
        let normal = mann_whitney_u_normal(a, b).unwrap();
        prop_assert_eq!(exact.method, PValueMethod::Exact);
        prop_assert_eq!(exact.u_a, normal.u_a);
        prop_assert!((exact.p_two_sided - normal.p_two_sided).abs() <= 0.05,
            "exact {} normal {}", exact.p_two_sided, normal.p_two_sided);
    }

    #[test]
    fn u_statistics_sum_to_product(
        a in proptest::collection::vec(0u8..10, 1..12),
        b in proptest::collection::vec(0u8..10, 1..12),
    ) {
        let a: Vec<f64> = a.into_iter().map(f64::from).collect();
        let b: Vec<f64> = b.into_iter().map(f64::from).collect();
        let r = mann_whitney_u(&a, &b).unwrap();
        prop_assert_eq!(r.u_a + r.u_b, (a.len() * b.len()) as f64);
        prop_assert!((0.0..=1.0).contains(&r.p_two_sided));
    }

    #[test]
    fn top_k_is_a_prefix_of_larger_k(
        vectors in proptest::collection::vec(proptest::collection::vec(-1.0f32..1.0, 4), 1..40),
        query in proptest::collection::vec(-1.0f32..1.0, 4),
        k in 1usize..20,
        threshold in 0.0f64..=2.0,
    ) {
        prop_assume!(query.iter().any(|x| *x != 0.0));
        let mut store = VectorStore::new(4);
        for (i, v) in vectors.iter().enumerate() {
            if v.iter().all(|x| *x == 0.0) { continue; }
            store.insert(DatastoreEntry::chunk_entry("P", i as u32, EmbeddingVector::new(v.clone()).unwrap(), "")).unwrap();
        }
        let q = EmbeddingVector::new(query).unwrap();
        let small = store.top_k(Query { vector: &q, k, threshold, pub_id: None }).unwrap();
        let large = store.top_k(Query { vector: &q, k: k + 5, threshold, pub_id: None }).unwrap();
        prop_assert!(small.len() <= k);
        prop_assert_eq!(&large[..small.len()], &small[..]);
        prop_assert!(small.iter().all(|s| s.distance <= threshold));
        prop_assert!(small.windows(2).all(|w| w[0].distance <= w[1].distance));
    }
}

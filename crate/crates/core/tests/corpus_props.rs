use std::collections::HashSet;

use peswap::corpus::{
    build_flores_docs, read_pairs_tsv, select_top_k, write_pairs_tsv, ParallelPair, ToyKind, ToyTask, Vocab,
    FLORES_GROUP_KEYS,
};
use peswap::numerics::RngStream;
use proptest::prelude::*;

fn text() -> impl Strategy<Value = String> {
    "[a-z]{1,6}( [a-z.,]{1,6}){0,4}"
}

fn pair_strategy() -> impl Strategy<Value = ParallelPair> {
    (text(), text(), prop::option::of(-5.0f64..5.0), prop::option::of("[a-c]"), 0usize..3).prop_map(
        |(src, tgt, score, url, topic)| {
            let mut p = ParallelPair::new("", src, tgt);
            p.score = score;
            if let Some(u) = url {
                p = p.with_meta("url", u).with_meta("domain", "d").with_meta("topic", format!("t{topic}"));
            }
            p
        },
    )
}

fn pairs_strategy() -> impl Strategy<Value = Vec<ParallelPair>> {
    prop::collection::vec(pair_strategy(), 0..30).prop_map(|mut v| {
        for (i, p) in v.iter_mut().enumerate() {
            p.id = format!("p{i}");
        }
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tsv_roundtrip(pairs in pairs_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pairs.tsv");
        write_pairs_tsv(&path, &pairs).unwrap();
        prop_assert_eq!(read_pairs_tsv(&path).unwrap(), pairs);
    }

    #[test]
    fn flores_grouping_partitions_pairs(pairs in pairs_strategy(), window in 1usize..5) {
        let (docs, rejected) = build_flores_docs(&pairs, &FLORES_GROUP_KEYS, window).unwrap();
        let placed: Vec<&String> = docs.iter().flat_map(|d| &d.provenance).collect();
        prop_assert_eq!(placed.len() + rejected.len(), pairs.len());
        let unique: HashSet<&String> = placed.iter().copied().chain(rejected.iter().map(|r| &r.id)).collect();
        prop_assert_eq!(unique.len(), pairs.len());
        for d in &docs {
            prop_assert!(d.n_sentences >= 1 && d.n_sentences <= window);
            prop_assert_eq!(d.n_sentences, d.provenance.len());
        }
    }

    #[test]
    fn top_k_prefers_scores_and_is_seeded(pairs in pairs_strategy(), k in 0usize..40, seed in any::<u64>()) {
        let a = select_top_k(&pairs, k, &mut RngStream::named(seed, "select"));
        let b = select_top_k(&pairs, k, &mut RngStream::named(seed, "select"));
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), k.min(pairs.len()));
        let scored = pairs.iter().filter(|p| p.score.is_some()).count();
        let kept_scored: Vec<f64> = a.iter().filter_map(|p| p.score).collect();
        prop_assert_eq!(kept_scored.len(), k.min(scored));
        prop_assert!(kept_scored.windows(2).all(|w| w[0] >= w[1]));
        if let Some(&lowest) = kept_scored.last() {
            let ids: HashSet<&String> = a.iter().map(|p| &p.id).collect();
            for p in pairs.iter().filter(|p| !ids.contains(&p.id)) {
                prop_assert!(p.score.map_or(true, |s| s <= lowest));
            }
        }
    }

    #[test]
    fn toy_tasks_are_invertible(len in 1usize..30, seed in any::<u64>()) {
        let mut rng = RngStream::named(seed, "toy");
        for kind in [ToyKind::Copy, ToyKind::Reverse, ToyKind::MappedTranslate] {
            let task = ToyTask::new(kind, 40).unwrap();
            let src: Vec<usize> = (0..len).map(|_| rng.below(task.symbols())).collect();
            let out = task.apply(&src);
            prop_assert_eq!(out.len(), src.len());
            let mut sorted_src: Vec<usize> = src.iter().map(|&s| if kind == ToyKind::MappedTranslate { task.token_map()[s] } else { s }).collect();
            let mut sorted_out = out.clone();
            sorted_src.sort();
            sorted_out.sort();
            prop_assert_eq!(sorted_src, sorted_out);
        }
    }

    #[test]
    fn vocab_roundtrip(ids in prop::collection::vec(4usize..40, 0..20)) {
        let v = Vocab::toy(40);
        let text = v.decode(&ids);
        prop_assert_eq!(v.encode(&text), ids);
    }
}

#[test]
fn mapping_is_a_fixed_permutation() {
    let a = ToyTask::new(ToyKind::MappedTranslate, 40).unwrap();
    let b = ToyTask::new(ToyKind::MappedTranslate, 40).unwrap();
    assert_eq!(a.token_map(), b.token_map());
    let mut seen: Vec<usize> = a.token_map().to_vec();
    seen.sort();
    assert_eq!(seen, (0..36).collect::<Vec<_>>());
    assert_eq!(a.apply(&[0, 1, 2]), vec![a.token_map()[1], a.token_map()[0], a.token_map()[2]]);
}

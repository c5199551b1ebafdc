mod common;

use std::collections::BTreeSet;

use common::{hand_records, oracle, random_records};
use ntrd_core::corpus::{Catalog, ItemId};
use ntrd_core::metrics::{
    dist_n, item_diversity, item_ratio, item_token_ratio, novel_ratio, parse_record_line, perplexity, read_records,
    report, rer_at_k, write_records, GeneratedRecord, MetricsReport,
};
use proptest::prelude::*;

fn sentence(words: &str) -> GeneratedRecord {
    GeneratedRecord {
        conversation_id: "s".into(),
        turn_index: 0,
        response: words.split_whitespace().map(str::to_string).collect(),
        slots: vec![],
        ground_truth: vec![],
        nlls: vec![1.0],
    }
}

fn catalog(n: u64) -> Catalog {
    Catalog::new((0..n).map(|i| (ItemId(i), format!("t{i}"))).collect())
}

#[test]
fn dist_examples() {
    assert_eq!(dist_n(&[sentence("a b a b")], 2), 0.5);
    assert_eq!(dist_n(&[sentence("a")], 2), 0.0);
    assert_eq!(dist_n(&[sentence("a b c d")], 2), 0.75);
    assert_eq!(dist_n(&[sentence("a b c d")], 4), 0.25);
    assert_eq!(dist_n(&[sentence("a b a b"), sentence("a")], 2), 0.25);
}

#[test]
fn perplexity_examples() {
    let mut r = sentence("x");
    r.nlls = vec![50f64.ln(); 7];
    assert!((perplexity(&[r.clone()]).unwrap() - 50.0).abs() < 1e-9);
    r.nlls = vec![0.0; 3];
    assert_eq!(perplexity(&[r.clone()]).unwrap(), 1.0);
    r.nlls.clear();
    assert!(perplexity(&[r]).is_err());
}

#[test]
fn recall_examples() {
    let recs = hand_records();
    assert_eq!(rer_at_k(&recs, 1).unwrap(), 50.0);
    assert_eq!(rer_at_k(&recs, 3).unwrap(), 75.0);
    let err = rer_at_k(&recs, 10).unwrap_err().to_string();
    assert!(err.contains("slot 0") && err.contains("hand#1"), "{err}");
    let slotless: Vec<_> = recs
        .iter()
        .cloned()
        .map(|mut r| {
            r.slots.clear();
            r
        })
        .collect();
    assert_eq!(rer_at_k(&slotless, 1).unwrap(), 0.0);
    let perfect: Vec<_> = recs
        .iter()
        .cloned()
        .map(|mut r| {
            r.ground_truth = r.slots.iter().map(|s| s.item).take(1).collect();
            r
        })
        .filter(|r| !r.slots.is_empty())
        .collect();
    assert_eq!(rer_at_k(&perfect, 1).unwrap(), 100.0);
}

#[test]
fn item_ratio_and_diversity_examples() {
    let recs = hand_records();
    assert_eq!(item_ratio(&recs[..4]), 75.0);
    assert_eq!(item_ratio(&recs[3..]), 0.0);
    assert_eq!(item_ratio(&recs[..3]), 100.0);
    // 4 items over 11 words
    assert!((item_token_ratio(&recs) - 400.0 / 11.0).abs() < 1e-12);
    assert_eq!(item_diversity(&recs[..1], &catalog(8)), 12.5);
    assert_eq!(
        item_diversity(&[recs[0].clone(), recs[2].clone(), recs[0].clone()], &catalog(8)),
        12.5
    );
    assert_eq!(item_diversity(&recs[..2], &catalog(8)), 37.5);
    assert_eq!(item_diversity(&recs[3..], &catalog(8)), 0.0);
    let pair: Vec<_> = [recs[0].clone(), recs[0].clone()]
        .into_iter()
        .enumerate()
        .map(|(i, mut r)| {
            r.slots[0].item = ItemId(i as u64);
            r.response[1] = format!("@{i}");
            r
        })
        .collect();
    assert_eq!(item_diversity(&pair, &catalog(8)), 25.0);
    assert_eq!(item_diversity(&pair, &catalog(2)), 100.0);
}

#[test]
fn novel_ratio_examples() {
    let recs = hand_records();
    let none: BTreeSet<ItemId> = [ItemId(40), ItemId(41)].into();
    assert_eq!(novel_ratio(&recs, &none), 0.0);
    let all: BTreeSet<ItemId> = [ItemId(1), ItemId(3), ItemId(4)].into();
    assert_eq!(novel_ratio(&recs, &all), 100.0);
    let ids: BTreeSet<ItemId> = (0..373).map(ItemId).collect();
    let emitted: Vec<GeneratedRecord> = (0..50)
        .map(|i| {
            let mut r = hand_records().remove(0);
            r.slots[0].item = ItemId(i);
            r.response[1] = format!("@{i}");
            r
        })
        .collect();
    let v = novel_ratio(&emitted, &ids);
    assert_eq!(format!("{v:.2}"), "13.40");
}

#[test]
fn report_composes_the_individual_metrics() {
    let recs = hand_records();
    let cat = catalog(16);
    let novel: BTreeSet<ItemId> = [ItemId(4), ItemId(12)].into();
    let r = report(&recs, &cat, &novel).unwrap();
    assert_eq!(r.ppl, perplexity(&recs).unwrap());
    assert_eq!(r.dist2, dist_n(&recs, 2));
    assert_eq!(r.dist3, dist_n(&recs, 3));
    assert_eq!(r.dist4, dist_n(&recs, 4));
    assert_eq!(r.rer1, 50.0);
    assert_eq!(r.rer10, None);
    assert_eq!(r.item_ratio, item_ratio(&recs));
    assert_eq!(r.item_diversity, item_diversity(&recs, &cat));
    assert_eq!(r.novel_ratio, Some(50.0));
    assert_eq!(r.counts.item_turns, 4);
    assert_eq!(r.counts.responses, 5);
    assert_eq!(r.counts.tokens, 10);
    let json = r.to_json();
    let back: MetricsReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.to_json(), json);
    assert!(r.table().lines().any(|l| l.starts_with("ReR@1") && l.contains("50.00")));
    assert!(report(&[], &cat, &novel).is_err());
    assert_eq!(report(&recs, &cat, &BTreeSet::new()).unwrap().novel_ratio, None);
}

#[test]
fn records_file_round_trip_and_validation() {
    let recs = random_records(4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("records.jsonl");
    write_records(&path, &recs).unwrap();
    assert_eq!(read_records(&path).unwrap(), recs);
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), recs.len());

    let mut bad = hand_records().remove(0);
    bad.response[1] = "oops".into();
    assert!(bad.validate().is_err());
    let line = serde_json::to_string(&bad).unwrap();
    assert!(parse_record_line(&line).is_err());
    let mut neg = hand_records().remove(0);
    neg.nlls[0] = -0.1;
    assert!(neg.validate().is_err());
    assert!(parse_record_line("   ").unwrap().is_none());
    assert!(parse_record_line("{\"conversation_id\": 3}").is_err());
}

#[test]
fn matches_brute_force_oracle() {
    let cat = catalog(60);
    for seed in 0..50 {
        let recs = random_records(seed);
        let novel: Vec<ItemId> = (50..60).map(ItemId).collect();
        let novel_set: BTreeSet<ItemId> = novel.iter().copied().collect();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
        assert!(close(perplexity(&recs).unwrap(), oracle::ppl(&recs)));
        for n in [2, 3, 4] {
            assert!(close(dist_n(&recs, n), oracle::dist(&recs, n)), "dist-{n} seed {seed}");
        }
        for k in [1, 10, 50] {
            assert!(
                close(rer_at_k(&recs, k).unwrap(), oracle::rer(&recs, k)),
                "rer@{k} seed {seed}"
            );
        }
        assert!(close(item_ratio(&recs), oracle::item_ratio(&recs)));
        assert!(close(item_diversity(&recs, &cat), oracle::item_diversity(&recs, 60)));
        assert!(close(novel_ratio(&recs, &novel_set), oracle::novel(&recs, &novel)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn recall_is_monotone_in_k(seed in 0u64..10_000) {
        let recs = random_records(seed);
        let (a, b, c) = (rer_at_k(&recs, 1).unwrap(), rer_at_k(&recs, 10).unwrap(), rer_at_k(&recs, 50).unwrap());
        prop_assert!(b <= c);
        for v in [a, b, c] {
            prop_assert!((0.0..=100.0).contains(&v));
        }
    }

    #[test]
    fn diversity_grows_with_records(seed in 0u64..10_000) {
        let recs = random_records(seed);
        let cat = catalog(60);
        let mut prev = 0.0;
        for i in 0..=recs.len() {
            let d = item_diversity(&recs[..i], &cat);
            prop_assert!(d >= prev && d <= 100.0);
            prev = d;
        }
    }

    #[test]
    fn metrics_ignore_record_order(seed in 0u64..10_000) {
        let recs = random_records(seed);
        let mut rev = recs.clone();
        rev.reverse();
        for n in [2, 3, 4] {
            prop_assert!((dist_n(&recs, n) - dist_n(&rev, n)).abs() < 1e-12);
        }
        prop_assert_eq!(rer_at_k(&recs, 1).unwrap(), rer_at_k(&rev, 1).unwrap());
        let cat = catalog(60);
        prop_assert_eq!(report(&recs, &cat, &BTreeSet::new()).unwrap(), report(&recs, &cat, &BTreeSet::new()).unwrap());
    }
}

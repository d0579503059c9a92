mod common;

use std::collections::BTreeSet;

use common::*;
use proptest::prelude::*;
use ragops_core::coverage::*;
use ragops_core::evaluation::*;
use ragops_core::retrieval::embedding::HashingEmbedder;

fn ids(v: &[u8]) -> Vec<String> {
    v.iter().map(|i| format!("d{i}")).collect()
}

fn phrase(words: &[usize]) -> String {
    sentence(words.iter().copied())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn ranking_metrics_bounded_and_recall_monotone(
        ret in proptest::sample::subsequence((0u8..12).collect::<Vec<_>>(), 0..12).prop_shuffle(),
        rel in proptest::collection::btree_set(0u8..12, 1..6),
    ) {
        let ret = ids(&ret);
        let rel: BTreeSet<String> = rel.iter().map(|i| format!("d{i}")).collect();
        let mut prev = 0.0;
        for k in 1..=14 {
            let r = recall_at_k(&ret, &rel, k).unwrap();
            let p = precision_at_k(&ret, &rel, k).unwrap();
            let n = ndcg_binary(&ret, &rel, k);
            for v in [r, p, n] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(r >= prev);
            prev = r;
        }
        let m = mrr(&[first_relevant_rank(&ret, &rel)]);
        prop_assert!((0.0..=1.0).contains(&m));
    }

    #[test]
    fn text_metrics_bounded(a in proptest::collection::vec(0usize..30, 0..20), b in proptest::collection::vec(0usize..30, 1..20)) {
        let (a, b) = (phrase(&a), phrase(&b));
        let mut vals = vec![bleu(&a, &[&b], 4), faithfulness(&a, std::slice::from_ref(&b)), hallucination_rate(&a, std::slice::from_ref(&b))];
        for n in 1..=2 {
            let r = rouge_n(&a, &b, n);
            vals.extend([r.recall, r.precision, r.f1]);
        }
        for v in vals {
            prop_assert!(v.is_finite() && (0.0..=1.0).contains(&v), "{}", v);
        }
    }

    #[test]
    fn query_coverage_bounded_and_monotone(
        live in proptest::collection::vec(proptest::collection::vec(0usize..40, 1..6), 1..15),
        test in proptest::collection::vec(proptest::collection::vec(0usize..40, 1..6), 1..10),
        extra in proptest::collection::vec(proptest::collection::vec(0usize..40, 1..6), 0..10),
        tau in 0.0f64..1.0,
    ) {
        let emb = HashingEmbedder::default();
        let live: Vec<String> = live.iter().map(|w| phrase(w)).collect();
        let test: Vec<String> = test.iter().map(|w| phrase(w)).collect();
        let mut bigger = test.clone();
        bigger.extend(extra.iter().map(|w| phrase(w)));
        let w = (None, None);
        let a = query_coverage(&live, &test, &emb, tau, 0.85, 5, w).unwrap();
        let again = query_coverage(&live, &test, &emb, tau, 0.85, 5, w).unwrap();
        prop_assert_eq!(&a, &again);
        let b = query_coverage(&live, &bigger, &emb, tau, 0.85, 5, w).unwrap();
        let (sa, sb) = (a.score.unwrap(), b.score.unwrap());
        prop_assert!((0.0..=1.0).contains(&sa));
        prop_assert!(sb >= sa);
        prop_assert_eq!(a.breach, sa < 0.85);

        let g = generation_coverage(&live, &test, 0.85, w).unwrap();
        let v = vocabulary_coverage(&live, &test, 10, 0.85, w);
        for r in [&g, &v] {
            let s = r.score.unwrap();
            prop_assert!((0.0..=1.0).contains(&s));
            prop_assert_eq!(r.breach, s < r.threshold);
        }
        prop_assert_eq!(&v, &vocabulary_coverage(&live, &test, 10, 0.85, w));
    }
}

fn corpus_cases() -> (Vec<ragops_core::ingestion::RawItem>, Vec<TestCase>) {
    let mut items = Vec::new();
    let mut cases = Vec::new();
    for d in 0..30 {
        let words: Vec<usize> = (0..20).map(|j| (d * 17 + j * 3) % 120).collect();
        let lead = format!("{} {}", word(7000 + d), phrase(&words[..8]));
        items.push(item("c", &format!("d{d}"), &format!("{lead} {}", phrase(&words[8..])), 1));
        cases.push(TestCase {
            case_id: format!("case-{d}"),
            query: format!("{} {}", word(7000 + d), word(words[2])),
            relevant_doc_keys: [format!("c:d{d}")].into(),
            reference_answer: Some(lead),
            ..Default::default()
        });
    }
    (items, cases)
}

#[test]
fn suite_aggregation_ignores_case_order_and_seed() {
    let (items, cases) = corpus_cases();
    let e = engine();
    e.ingest_items("c", &items).unwrap();
    let mut reversed = cases.clone();
    reversed.reverse();
    for level in [Level::Component, Level::EndToEnd] {
        let a = e.run_suite(level, &cases, 1, None).unwrap();
        let b = e.run_suite(level, &reversed, 99, None).unwrap();
        assert_eq!(a.metrics.keys().collect::<Vec<_>>(), b.metrics.keys().collect::<Vec<_>>());
        for (k, v) in &a.metrics {
            assert!(v.is_finite(), "{k} = {v}");
            assert!((v - b.metrics[k]).abs() <= 1e-12, "{k}: {v} vs {}", b.metrics[k]);
        }
        assert_eq!(a.seed, 1);
        assert_eq!(b.seed, 99);
    }
}

#[test]
fn every_alert_references_a_stored_report() {
    let (items, cases) = corpus_cases();
    let e = engine();
    e.ingest_items("c", &items).unwrap();
    for i in 0..20 {
        // half the traffic is unlike anything in the test set
        let q = if i % 2 == 0 { cases[i].query.clone() } else { phrase(&[3000 + i, 3100 + i, 3200 + i]) };
        e.query(&q, None, Some(&format!("live-{i}"))).unwrap();
    }
    let out = e.coverage(&[Axis::Query, Axis::Retrieval, Axis::Generation, Axis::Vocabulary], &cases, (None, None)).unwrap();
    assert!(!out.alerts.is_empty());
    for a in e.alerts() {
        let stored = e.reports().get(&a.evidence).unwrap_or_else(|| panic!("alert {} has no report", a.alert_id));
        assert_eq!(stored["report_id"], a.evidence);
    }
    // same window, same config: same reports
    let again = e.coverage(&[Axis::Query, Axis::Retrieval, Axis::Generation, Axis::Vocabulary], &cases, (None, None)).unwrap();
    assert_eq!(out.reports, again.reports);
}

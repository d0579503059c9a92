mod common;

use std::collections::BTreeMap;

use common::ts;
use proptest::prelude::*;
use ragops_core::datalake::*;
use ragops_core::ingestion::{DocMetadata, NormalizedDocument, Operation};
use ragops_core::text::ContentHash;
use ragops_core::verification::{Decision, VerificationReport};

#[derive(Debug, Clone)]
enum Op {
    Upsert(u8, String),
    Delete(u8),
    Archive(u8),
    Rollback(u8, u32),
    Amend(u8, bool),
}

fn arb_op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (0u8..5, "[a-z]{1,8}( [a-z]{1,8}){0,6}").prop_map(|(k, t)| Op::Upsert(k, t)),
        1 => (0u8..5).prop_map(Op::Delete),
        1 => (0u8..5).prop_map(Op::Archive),
        2 => (0u8..5, 1u32..6).prop_map(|(k, v)| Op::Rollback(k, v)),
        1 => (0u8..5, any::<bool>()).prop_map(|(k, b)| Op::Amend(k, b)),
    ]
}

fn doc(key: &str, text: &str) -> NormalizedDocument {
    NormalizedDocument {
        doc_key: key.into(),
        text: text.into(),
        metadata: DocMetadata {
            source: "s".into(),
            timestamp: Some(ts(0)),
            ..Default::default()
        },
        acl: vec![],
        operation: Operation::Add,
        fetched_at: None,
    }
}

fn apply(lake: &mut DataLake, op: &Op) -> bool {
    let key = |k: &u8| format!("s:d{k}");
    match op {
        Op::Upsert(k, t) => lake
            .upsert(&doc(&key(k), t), &VerificationReport::bare(&key(k), Decision::Accept))
            .is_ok(),
        Op::Delete(k) => lake.delete(&key(k)).is_ok(),
        Op::Archive(k) => lake.archive(&key(k), "test").is_ok(),
        Op::Rollback(k, v) => lake.rollback(&key(k), *v).is_ok(),
        Op::Amend(k, b) => lake.amend_metadata(&key(k), "poison", serde_json::json!(b), "test").is_ok(),
    }
}

fn all_versions(lake: &DataLake) -> BTreeMap<(String, u32), DocumentVersion> {
    (0..5)
        .flat_map(|k| lake.history(&format!("s:d{k}")))
        .map(|v| ((v.doc_key.clone(), v.version), v))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn lake_invariants(ops in proptest::collection::vec(arb_op(), 0..50)) {
        let mut lake = DataLake::in_memory();
        let mut archived_bytes = 0;
        let mut seq = lake.current_seq();
        for op in &ops {
            let before = all_versions(&lake);
            let changed = apply(&mut lake, op);

            prop_assert!(lake.archived_bytes() >= archived_bytes);
            archived_bytes = lake.archived_bytes();
            if changed {
                prop_assert!(lake.current_seq() > seq);
            } else {
                prop_assert_eq!(lake.current_seq(), seq);
            }
            seq = lake.current_seq();

            let after = all_versions(&lake);
            for (id, old) in &before {
                let new = &after[id];
                // content and provenance never change; only live -> archived
                prop_assert_eq!(&old.text, &new.text);
                prop_assert_eq!(&old.content_hash, &new.content_hash);
                prop_assert_eq!(&old.metadata, &new.metadata);
                prop_assert_eq!(old.lake_seq, new.lake_seq);
                if old.status != VersionStatus::Live {
                    prop_assert_eq!(old.status, new.status);
                }
            }
            for k in 0..5 {
                let h = lake.history(&format!("s:d{k}"));
                let live = h.iter().filter(|v| v.status == VersionStatus::Live).count();
                prop_assert!(live <= 1);
                let numbers: Vec<u32> = h.iter().map(|v| v.version).collect();
                prop_assert_eq!(numbers, (1..=h.len() as u32).collect::<Vec<_>>());
            }
            prop_assert!(lake.integrity_check(&IntegrityInputs::default()).is_clean());
        }
    }

    #[test]
    fn rollback_round_trip(a in "[a-z]{1,8}( [a-z]{1,8}){0,8}", b in "[a-z]{1,8}( [a-z]{1,8}){0,8}") {
        prop_assume!(ContentHash::of(&a) != ContentHash::of(&b));
        let mut lake = DataLake::in_memory();
        let r = VerificationReport::bare("s:x", Decision::Accept);
        lake.upsert(&doc("s:x", &a), &r).unwrap();
        lake.upsert(&doc("s:x", &b), &r).unwrap();
        lake.rollback("s:x", 1).unwrap();
        let live = lake.get("s:x", None, None).unwrap();
        prop_assert_eq!(live.content_hash, ContentHash::of(&a));
        prop_assert_eq!(live.version, 3);
        prop_assert_eq!(lake.history("s:x").len(), 3);
    }
}

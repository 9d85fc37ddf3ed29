use proptest::prelude::*;
use veriflow_core::ingest::{
    augment, evaluate_extraction, parse_requirements, AugmentationConfig, Comparator, Condition, Priority,
    RequirementRecord, Scalar,
};

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["ledger", "account", "invoice", "report", "card", "order", "batch", "token"]).prop_map(String::from)
}

fn condition() -> impl Strategy<Value = Condition> {
    let subject = prop::sample::select(vec!["balance", "amount", "retry count", "score", "region"]);
    let numeric = (
        subject.clone(),
        prop::sample::select(vec![Comparator::Lt, Comparator::Le, Comparator::Gt, Comparator::Ge, Comparator::Eq, Comparator::Ne]),
        (-5000i64..5000, 0u32..3),
    )
        .prop_map(|(s, c, (m, d))| {
            let v = m as f64 / 10f64.powi(d as i32);
            Condition::new(s, c, Some(Scalar::Number(v))).unwrap()
        });
    let presence = (subject, prop::sample::select(vec![Comparator::Present, Comparator::Absent]))
        .prop_map(|(s, c)| Condition::new(s, c, None).unwrap());
    prop_oneof![3 => numeric, 1 => presence]
}

prop_compose! {
    fn record(idx: usize)(
        actor in prop::option::of(prop::sample::select(vec!["user", "clerk", "loan officer", "system"])),
        action in prop::sample::select(vec!["transfer", "approve", "log in", "archive", "sign off"]),
        object in prop::option::of(word()),
        conditions in prop::collection::vec(condition(), 0..4),
        outcome in prop::option::of(prop::sample::select(vec!["the ledger balances", "funds arrive"])),
        priority in prop::sample::select(vec![Priority::Low, Priority::Medium, Priority::High]),
    ) -> RequirementRecord {
        RequirementRecord {
            id: format!("P{idx}"),
            raw_text: String::new(),
            actor: actor.map(String::from),
            action: Some(action.to_string()),
            object,
            conditions,
            expected_outcome: outcome.map(String::from),
            priority,
            lineage: None,
            unparsed: false,
        }
    }
}

fn records() -> impl Strategy<Value = Vec<RequirementRecord>> {
    (1usize..6).prop_flat_map(|n| (0..n).map(record).collect::<Vec<_>>())
}

fn reparse(recs: &[RequirementRecord]) -> Vec<RequirementRecord> {
    let doc: String = recs.iter().map(|r| r.to_statement() + "\n").collect();
    parse_requirements(&doc).unwrap()
}

proptest! {
    #[test]
    fn serialize_then_parse_round_trips(recs in records()) {
        let once = reparse(&recs);
        prop_assert_eq!(once.len(), recs.len());
        for (a, b) in recs.iter().zip(&once) {
            prop_assert!(a.same_entities(b), "{:?}\n{:?}", a, b);
        }
        let twice = reparse(&once);
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn zero_noise_without_permutation_is_identity(recs in records(), variants in 0usize..4, seed: u64) {
        let cfg = AugmentationConfig { noise_rate: 0.0, permutation_enabled: false, variants_per_record: variants, seed };
        prop_assert_eq!(augment(&recs, &cfg).unwrap(), recs);
    }

    #[test]
    fn augmented_size_and_lineage(recs in records(), variants in 0usize..4, noise in 0.0f64..0.5, seed: u64) {
        let recs = reparse(&recs);
        let cfg = AugmentationConfig { noise_rate: noise, permutation_enabled: true, variants_per_record: variants, seed };
        let out = augment(&recs, &cfg).unwrap();
        prop_assert!(out.len() >= recs.len());
        prop_assert_eq!(&out[..recs.len()], &recs[..]);
        let augmentable = recs
            .iter()
            .filter(|r| r.conditions.len() >= 2 || (noise > 0.0 && r.conditions.iter().any(|c| c.numeric_value().is_some())))
            .count();
        prop_assert_eq!(out.len(), recs.len() + augmentable * variants);
        for v in &out[recs.len()..] {
            prop_assert!(v.lineage.is_some());
        }
        prop_assert_eq!(augment(&recs, &cfg).unwrap(), out);
    }

    #[test]
    fn self_evaluation_is_perfect(recs in records()) {
        let s = evaluate_extraction(&recs, &recs).unwrap();
        prop_assert_eq!(s.precision, 1.0);
        prop_assert_eq!(s.recall, 1.0);
        for (p, r) in s.per_entity.values() {
            prop_assert_eq!((*p, *r), (1.0, 1.0));
        }
    }
}

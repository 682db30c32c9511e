mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use common::*;
use conmem::clock::{Clock, SteppingClock};
use conmem::gateway::{Matcher, Stage};
use conmem::selection::{select, SelectionStrategy};
use conmem::store::{Concept, ConceptId, MemoryFormat, MemoryStore, OeConcept, Snapshot, SnapshotLabel};
use proptest::prelude::*;

fn oe_store(n: usize) -> MemoryStore {
    let clock = SteppingClock::default();
    let mut store = MemoryStore::new(MemoryFormat::Oe);
    for i in 0..n {
        let c = Concept::Oe(OeConcept {
            situation: format!("situation {i}"),
            suggestion: format!("suggestion {i}"),
        });
        store.add_concept(c, "p", clock.now()).unwrap();
    }
    store
}

fn ps_store(n: usize) -> MemoryStore {
    let mut store = MemoryStore::new(MemoryFormat::Ps);
    for i in 0..n {
        let c: conmem::store::PsConcept = serde_json::from_value(routine(&format!("step {i}"), "cue")).unwrap();
        store.add_concept(Concept::Ps(c), "p", SteppingClock::default().now()).unwrap();
    }
    store
}

fn snapshot(store: MemoryStore) -> Snapshot {
    Snapshot {
        label: SnapshotLabel::new("seed").unwrap(),
        store: Arc::new(store),
    }
}

const CAPTION: &str = "```caption\nOBSERVATIONS:\n- rows\nSPECULATIONS:\n- shift\n```";

#[test]
fn fixed_strategies_make_no_calls() {
    let p = counting_puzzle(1);
    for (strategy, store) in [
        (SelectionStrategy::All, ps_store(5)),
        (SelectionStrategy::All, oe_store(4)),
        (SelectionStrategy::None, ps_store(3)),
    ] {
        let (gateway, backend) = scripted(vec![reply(Matcher::any(), "unused")]);
        let expected = if strategy == SelectionStrategy::All { store.ids() } else { vec![] };
        let result = select(strategy, &p, &snapshot(store), 10, &gateway).unwrap();
        assert_eq!(result.ids, expected);
        assert!(backend.transcript().is_empty());
        assert_eq!(result.usage.total(), 0);
    }
}

#[test]
fn strategy_and_format_must_agree() {
    let (gateway, _) = scripted(vec![reply(Matcher::any(), "unused")]);
    let p = counting_puzzle(1);
    assert!(select(SelectionStrategy::OeTopk, &p, &snapshot(ps_store(1)), 3, &gateway).is_err());
    assert!(select(SelectionStrategy::PsReasoning, &p, &snapshot(oe_store(1)), 3, &gateway).is_err());
}

#[test]
fn ps_selection_drops_unknown_and_repeated_ids() {
    let (gateway, _) = scripted(vec![reply(
        Matcher::any().stage(Stage::Selection),
        "Steps 2 and 0 fit.\n```selection\n2, 17, 0, 2\n```",
    )]);
    let result = select(SelectionStrategy::PsReasoning, &counting_puzzle(1), &snapshot(ps_store(3)), 10, &gateway).unwrap();
    assert_eq!(result.ids, vec![ConceptId(2), ConceptId(0)]);
    assert_eq!(result.dropped, vec![17, 2]);
    assert_eq!(result.rationale.as_deref(), Some("Steps 2 and 0 fit."));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn oe_topk_stays_within_k_and_the_store(
        n in 0usize..12,
        k in 1usize..6,
        raw in proptest::collection::vec(0u64..20, 0..12),
    ) {
        let listed = raw.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(", ");
        let (gateway, backend) = scripted(vec![
            reply(Matcher::any().stage(Stage::Captioning), CAPTION),
            reply(Matcher::any().stage(Stage::Selection), format!("```selection\n{listed}\n```")),
        ]);
        let store = oe_store(n);
        let valid: BTreeSet<ConceptId> = store.ids().into_iter().collect();
        let result = select(SelectionStrategy::OeTopk, &counting_puzzle(1), &snapshot(store), k, &gateway).unwrap();
        prop_assert!(result.ids.len() <= k);
        prop_assert!(result.ids.iter().all(|id| valid.contains(id)));
        let unique: BTreeSet<_> = result.ids.iter().collect();
        prop_assert_eq!(unique.len(), result.ids.len());
        prop_assert!(result.dropped.iter().all(|d| !valid.contains(&ConceptId(*d)) || raw.iter().filter(|r| *r == d).count() > 1));
        // Exactly one caption call and one selection call.
        prop_assert_eq!(backend.transcript().len(), 2);
    }
}

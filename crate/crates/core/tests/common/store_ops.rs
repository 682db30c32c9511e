use std::collections::BTreeSet;

use conmem::clock::{Clock, SteppingClock};
use conmem::store::{Concept, ConceptKind, MemoryFormat, MemoryStore, PsConcept, PsParameter};
use proptest::prelude::*;

const TITLES: [&str; 8] = ["object", "color", "grid", "shape", "sort objects", "recolor", "line", "mask"];

#[derive(Debug, Clone)]
pub enum StoreOp {
    Add { title: usize, upper: bool, kind: u8, refs: Vec<usize> },
    Revise { target: usize, cue: u8, kind_change: bool, title_change: bool, refs: Vec<usize> },
    Rename { target: usize, title: usize },
}

pub fn arb_op() -> impl Strategy<Value = StoreOp> {
    let refs = proptest::collection::vec(0..TITLES.len(), 0..3);
    prop_oneof![
        4 => (0..TITLES.len(), any::<bool>(), 0u8..3, refs.clone())
            .prop_map(|(title, upper, kind, refs)| StoreOp::Add { title, upper, kind, refs }),
        3 => (0usize..16, any::<u8>(), prop::bool::weighted(0.2), prop::bool::weighted(0.2), refs)
            .prop_map(|(target, cue, kind_change, title_change, refs)| StoreOp::Revise {
                target, cue, kind_change, title_change, refs
            }),
        1 => (0usize..16, 0..TITLES.len()).prop_map(|(target, title)| StoreOp::Rename { target, title }),
    ]
}

pub fn arb_ops() -> impl Strategy<Value = Vec<StoreOp>> {
    proptest::collection::vec(arb_op(), 1..30)
}

fn kind(k: u8) -> ConceptKind {
    [ConceptKind::Type, ConceptKind::Structure, ConceptKind::Routine][k as usize % 3]
}

fn concept(title: String, kind: ConceptKind, refs: &[usize], cue: String) -> Concept {
    Concept::Ps(PsConcept {
        title,
        description: "d".into(),
        kind,
        parameters: refs
            .iter()
            .enumerate()
            .map(|(i, r)| PsParameter {
                name: format!("p{i}"),
                description: String::new(),
                type_annotation: format!("list of {{{}}}", TITLES[*r]),
            })
            .collect(),
        output_typing: (kind == ConceptKind::Routine).then(|| "grid".to_string()),
        relevance_cues: vec![cue],
        implementation_notes: vec![],
    })
}

pub fn apply(store: &mut MemoryStore, op: &StoreOp, clock: &SteppingClock) {
    let ids = store.ids();
    let _ = match op {
        StoreOp::Add { title, upper, kind: k, refs } => {
            let mut t = TITLES[*title].to_string();
            if *upper {
                t = t.to_uppercase();
            }
            store.add_concept(concept(t, kind(*k), refs, "new".into()), "p", clock.now()).map(|_| ())
        }
        StoreOp::Revise { target, cue, kind_change, title_change, refs } => {
            if ids.is_empty() {
                return;
            }
            let id = ids[target % ids.len()];
            let Concept::Ps(old) = &store.get(id).unwrap().concept else { unreachable!() };
            let mut k = old.kind;
            if *kind_change {
                k = kind(old.kind as u8 + 1);
            }
            let mut t = old.title.clone();
            if *title_change {
                t.push_str(" v2");
            }
            store.revise_concept(id, concept(t, k, refs, format!("cue {cue}")), "q").map(|_| ())
        }
        StoreOp::Rename { target, title } => {
            if ids.is_empty() {
                return;
            }
            store.rename_concept(ids[target % ids.len()], TITLES[*title])
        }
    };
}

fn braced(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = s;
    while let Some(open) = rest.find('{') {
        let Some(close) = rest[open..].find('}') else { break };
        out.push(rest[open + 1..open + close].trim().to_lowercase());
        rest = &rest[open + close + 1..];
    }
    out
}

/// Independent check of the persisted-store invariants: titles and aliases
/// are unique ignoring case, and every braced reference names one of them.
pub fn violations(store: &MemoryStore) -> Vec<String> {
    let mut names = BTreeSet::new();
    let mut problems = Vec::new();
    for e in store.entries() {
        let Concept::Ps(c) = &e.concept else { continue };
        for n in std::iter::once(&c.title).chain(&e.aliases) {
            if !names.insert(n.trim().to_lowercase()) {
                problems.push(format!("duplicate title {n:?}"));
            }
        }
    }
    for e in store.entries() {
        let Concept::Ps(c) = &e.concept else { continue };
        let annotations = c.parameters.iter().map(|p| p.type_annotation.as_str()).chain(c.output_typing.as_deref());
        for r in annotations.flat_map(braced) {
            if !names.contains(&r) {
                problems.push(format!("{:?} references missing {r:?}", c.title));
            }
        }
    }
    problems
}

/// Applies `ops`, checking the invariants after every step and a save/load
/// round-trip at the end.
pub fn check_sequence(ops: &[StoreOp]) -> Result<(), String> {
    let mut store = MemoryStore::new(MemoryFormat::Ps);
    let clock = SteppingClock::default();
    for (i, op) in ops.iter().enumerate() {
        apply(&mut store, op, &clock);
        let v = violations(&store);
        if !v.is_empty() {
            return Err(format!("after op {i} {op:?}: {v:?}"));
        }
        store.check_integrity().map_err(|e| format!("after op {i}: {e}"))?;
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("store.json");
    store.save(&path).map_err(|e| e.to_string())?;
    let loaded = MemoryStore::load(&path).map_err(|e| e.to_string())?;
    if loaded != store {
        return Err("save/load changed the store".into());
    }
    if MemoryStore::from_json(&store.to_json()).map_err(|e| e.to_string())? != store {
        return Err("json round-trip changed the store".into());
    }
    Ok(())
}

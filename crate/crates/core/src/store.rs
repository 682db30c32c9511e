//! Concept memory: a flat, persistent, provenance-tracked collection of
//! concepts in one of two formats.
//!
//! * **OE** entries are situation/suggestion pairs.
//! * **PS** entries are typed, parameterized types, structures and routines.
//!   A parameter's `type_annotation` (and a routine's `output_typing`) may
//!   reference another concept by writing its title in braces, e.g.
//!   `Callable[[{object}], int]`. References must resolve at write time.
//!
//! Stores persist as versioned JSON documents written with
//! write-temp-then-rename, and can be frozen into labeled [`Snapshot`]s.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MemoryFormat {
    #[serde(rename = "OE")]
    Oe,
    #[serde(rename = "PS")]
    Ps,
}

impl fmt::Display for MemoryFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MemoryFormat::Oe => "OE",
            MemoryFormat::Ps => "PS",
        })
    }
}

impl std::str::FromStr for MemoryFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "OE" => Ok(MemoryFormat::Oe),
            "PS" => Ok(MemoryFormat::Ps),
            other => Err(format!("unknown memory format {other:?} (expected OE or PS)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptId(pub u64);

impl fmt::Display for ConceptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OeConcept {
    pub situation: String,
    pub suggestion: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptKind {
    Type,
    Structure,
    Routine,
}

impl fmt::Display for ConceptKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConceptKind::Type => "type",
            ConceptKind::Structure => "structure",
            ConceptKind::Routine => "routine",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PsParameter {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub type_annotation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PsConcept {
    pub title: String,
    #[serde(default)]
    pub description: String,
    pub kind: ConceptKind,
    #[serde(default)]
    pub parameters: Vec<PsParameter>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_typing: Option<String>,
    #[serde(default)]
    pub relevance_cues: Vec<String>,
    #[serde(default)]
    pub implementation_notes: Vec<String>,
}

impl PsConcept {
    /// Titles referenced as `{title}` in parameter annotations and output typing.
    pub fn referenced_titles(&self) -> Vec<String> {
        let mut refs = Vec::new();
        for p in &self.parameters {
            refs.extend(braced_references(&p.type_annotation));
        }
        if let Some(out) = &self.output_typing {
            refs.extend(braced_references(out));
        }
        refs
    }
}

/// Extracts `{...}` spans (trimmed, non-empty) from an annotation.
pub fn braced_references(annotation: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = annotation;
    while let Some(start) = rest.find('{') {
        let after = &rest[start + 1..];
        match after.find('}') {
            Some(end) => {
                let name = after[..end].trim();
                if !name.is_empty() {
                    out.push(name.to_string());
                }
                rest = &after[end + 1..];
            }
            None => break,
        }
    }
    out
}

fn title_key(title: &str) -> String {
    title.trim().to_lowercase()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "format")]
pub enum Concept {
    #[serde(rename = "OE")]
    Oe(OeConcept),
    #[serde(rename = "PS")]
    Ps(PsConcept),
}

impl Concept {
    pub fn format(&self) -> MemoryFormat {
        match self {
            Concept::Oe(_) => MemoryFormat::Oe,
            Concept::Ps(_) => MemoryFormat::Ps,
        }
    }

    pub fn as_ps(&self) -> Option<&PsConcept> {
        match self {
            Concept::Ps(c) => Some(c),
            Concept::Oe(_) => None,
        }
    }

    pub fn as_oe(&self) -> Option<&OeConcept> {
        match self {
            Concept::Oe(c) => Some(c),
            Concept::Ps(_) => None,
        }
    }

    /// Checks field-level invariants that do not depend on the store.
    pub fn validate_shape(&self) -> Result<(), StoreError> {
        match self {
            Concept::Oe(c) => {
                if c.situation.trim().is_empty() {
                    return Err(StoreError::InvalidConcept("empty situation".into()));
                }
                if c.suggestion.trim().is_empty() {
                    return Err(StoreError::InvalidConcept("empty suggestion".into()));
                }
            }
            Concept::Ps(c) => {
                if c.title.trim().is_empty() {
                    return Err(StoreError::InvalidConcept("empty title".into()));
                }
                let mut names = BTreeSet::new();
                for p in &c.parameters {
                    if p.name.trim().is_empty() {
                        return Err(StoreError::InvalidConcept(format!(
                            "{:?}: parameter with empty name",
                            c.title
                        )));
                    }
                    if !names.insert(p.name.trim()) {
                        return Err(StoreError::InvalidConcept(format!(
                            "{:?}: duplicate parameter {:?}",
                            c.title, p.name
                        )));
                    }
                }
                let has_output = c
                    .output_typing
                    .as_deref()
                    .is_some_and(|o| !o.trim().is_empty());
                match c.kind {
                    ConceptKind::Routine if !has_output => {
                        return Err(StoreError::InvalidConcept(format!(
                            "{:?}: routine requires output typing",
                            c.title
                        )))
                    }
                    ConceptKind::Type if c.output_typing.is_some() => {
                        return Err(StoreError::InvalidConcept(format!(
                            "{:?}: type must not have output typing",
                            c.title
                        )))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_puzzle_ids: Vec<String>,
    pub created_at: DateTime<Utc>,
    pub revision_count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub id: ConceptId,
    pub concept: Concept,
    pub provenance: Provenance,
    /// Former titles of a renamed PS concept; references to them still resolve.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("format mismatch: store is {store}, got {found}")]
    FormatMismatch {
        store: MemoryFormat,
        found: MemoryFormat,
    },
    #[error("a concept titled {0:?} already exists")]
    DuplicateTitle(String),
    #[error("concept {concept:?} references unknown concept {reference:?}")]
    DanglingTypeReference { concept: String, reference: String },
    #[error("unknown concept id {0}")]
    UnknownId(ConceptId),
    #[error("revision changes kind from {from} to {to}")]
    KindChange { from: ConceptKind, to: ConceptKind },
    #[error("revision changes title from {from:?} to {to:?}; use rename")]
    TitleChange { from: String, to: String },
    #[error("invalid concept: {0}")]
    InvalidConcept(String),
    #[error("io failure: {0}")]
    IoFailure(String),
    #[error("schema version {found} is not supported (expected {expected})")]
    SchemaVersionMismatch { found: u64, expected: u32 },
    #[error("corrupt store: {0}")]
    CorruptEntry(String),
    #[error("snapshot label {0:?} already exists")]
    DuplicateLabel(String),
    #[error("invalid snapshot label {0:?}")]
    InvalidLabel(String),
}

/// Counts for `memory stats`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub format: MemoryFormat,
    pub concepts: usize,
    /// PS kinds; empty for OE stores.
    pub by_kind: BTreeMap<ConceptKind, usize>,
    /// Revision count to number of concepts with that count.
    pub revisions: BTreeMap<u32, usize>,
    /// Concepts that name at least one source puzzle.
    pub with_provenance: usize,
    pub source_puzzles: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryStore {
    format: MemoryFormat,
    entries: BTreeMap<ConceptId, Entry>,
    next_id: u64,
}

#[derive(Serialize, Deserialize)]
struct StoreFile {
    schema_version: u32,
    format: MemoryFormat,
    entries: Vec<Entry>,
    next_id: u64,
}

impl MemoryStore {
    pub fn new(format: MemoryFormat) -> Self {
        Self {
            format,
            entries: BTreeMap::new(),
            next_id: 0,
        }
    }

    pub fn format(&self) -> MemoryFormat {
        self.format
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn get(&self, id: ConceptId) -> Option<&Entry> {
        self.entries.get(&id)
    }

    pub fn contains(&self, id: ConceptId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn ids(&self) -> Vec<ConceptId> {
        self.entries.keys().copied().collect()
    }

    pub fn stats(&self) -> StoreStats {
        let mut by_kind = BTreeMap::new();
        let mut revisions = BTreeMap::new();
        let mut sources = BTreeSet::new();
        let mut with_provenance = 0;
        for e in self.entries.values() {
            if let Concept::Ps(c) = &e.concept {
                *by_kind.entry(c.kind).or_insert(0) += 1;
            }
            *revisions.entry(e.provenance.revision_count).or_insert(0) += 1;
            if !e.provenance.source_puzzle_ids.is_empty() {
                with_provenance += 1;
            }
            sources.extend(e.provenance.source_puzzle_ids.iter().cloned());
        }
        StoreStats {
            format: self.format,
            concepts: self.entries.len(),
            by_kind,
            revisions,
            with_provenance,
            source_puzzles: sources.len(),
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = &Entry> {
        self.entries.values()
    }

    /// Looks up a PS concept by current title or alias, case-insensitively.
    pub fn resolve_title(&self, title: &str) -> Option<ConceptId> {
        let key = title_key(title);
        self.entries.values().find_map(|e| match &e.concept {
            Concept::Ps(c)
                if title_key(&c.title) == key || e.aliases.iter().any(|a| title_key(a) == key) =>
            {
                Some(e.id)
            }
            _ => None,
        })
    }

    fn check_format(&self, concept: &Concept) -> Result<(), StoreError> {
        if concept.format() != self.format {
            return Err(StoreError::FormatMismatch {
                store: self.format,
                found: concept.format(),
            });
        }
        Ok(())
    }

    fn check_references(&self, concept: &PsConcept) -> Result<(), StoreError> {
        let own = title_key(&concept.title);
        for reference in concept.referenced_titles() {
            if title_key(&reference) == own {
                continue;
            }
            if self.resolve_title(&reference).is_none() {
                return Err(StoreError::DanglingTypeReference {
                    concept: concept.title.clone(),
                    reference,
                });
            }
        }
        Ok(())
    }

    pub fn add_concept(
        &mut self,
        concept: Concept,
        source_puzzle_id: &str,
        now: DateTime<Utc>,
    ) -> Result<ConceptId, StoreError> {
        self.check_format(&concept)?;
        concept.validate_shape()?;
        if let Concept::Ps(c) = &concept {
            if self.resolve_title(&c.title).is_some() {
                return Err(StoreError::DuplicateTitle(c.title.clone()));
            }
            self.check_references(c)?;
        }
        let id = ConceptId(self.next_id);
        self.next_id += 1;
        self.entries.insert(
            id,
            Entry {
                id,
                concept,
                provenance: Provenance {
                    source_puzzle_ids: vec![source_puzzle_id.to_string()],
                    created_at: now,
                    revision_count: 0,
                },
                aliases: Vec::new(),
            },
        );
        Ok(id)
    }

    /// Replaces an entry's fields; kind and title must not change.
    pub fn revise_concept(
        &mut self,
        id: ConceptId,
        updated: Concept,
        source_puzzle_id: &str,
    ) -> Result<&Entry, StoreError> {
        self.check_format(&updated)?;
        updated.validate_shape()?;
        let current = self.entries.get(&id).ok_or(StoreError::UnknownId(id))?;
        if let (Concept::Ps(old), Concept::Ps(new)) = (&current.concept, &updated) {
            if old.kind != new.kind {
                return Err(StoreError::KindChange {
                    from: old.kind,
                    to: new.kind,
                });
            }
            if title_key(&old.title) != title_key(&new.title) {
                return Err(StoreError::TitleChange {
                    from: old.title.clone(),
                    to: new.title.clone(),
                });
            }
            let dropped: Vec<&str> = old
                .parameters
                .iter()
                .filter(|p| !new.parameters.iter().any(|q| q.name == p.name))
                .map(|p| p.name.as_str())
                .collect();
            if !dropped.is_empty() {
                log::warn!(
                    "revision of {:?} removes parameters {:?}",
                    old.title,
                    dropped
                );
            }
            self.check_references(new)?;
        }
        let entry = self.entries.get_mut(&id).expect("checked above");
        entry.concept = updated;
        entry.provenance.revision_count += 1;
        if !entry
            .provenance
            .source_puzzle_ids
            .iter()
            .any(|p| p == source_puzzle_id)
        {
            entry
                .provenance
                .source_puzzle_ids
                .push(source_puzzle_id.to_string());
        }
        Ok(entry)
    }

    /// Renames a PS concept. The old title becomes an alias so existing
    /// `{old title}` references keep resolving.
    pub fn rename_concept(&mut self, id: ConceptId, new_title: &str) -> Result<(), StoreError> {
        let entry = self.entries.get(&id).ok_or(StoreError::UnknownId(id))?;
        let Concept::Ps(c) = &entry.concept else {
            return Err(StoreError::FormatMismatch {
                store: self.format,
                found: MemoryFormat::Oe,
            });
        };
        if new_title.trim().is_empty() {
            return Err(StoreError::InvalidConcept("empty title".into()));
        }
        if let Some(other) = self.resolve_title(new_title) {
            if other != id {
                return Err(StoreError::DuplicateTitle(new_title.to_string()));
            }
        }
        let old = c.title.clone();
        let entry = self.entries.get_mut(&id).expect("checked above");
        if let Concept::Ps(c) = &mut entry.concept {
            c.title = new_title.to_string();
        }
        let key = title_key(new_title);
        entry.aliases.retain(|a| title_key(a) != key);
        if title_key(&old) != key {
            entry.aliases.push(old);
        }
        Ok(())
    }

    /// Whole-store invariant check: format homogeneity, id counter, unique
    /// PS titles and resolvable references.
    pub fn check_integrity(&self) -> Result<(), StoreError> {
        let mut titles = BTreeSet::new();
        for (id, e) in &self.entries {
            if *id != e.id {
                return Err(StoreError::CorruptEntry(format!("entry key {id} holds id {}", e.id)));
            }
            if id.0 >= self.next_id {
                return Err(StoreError::CorruptEntry(format!(
                    "id {id} not below next_id {}",
                    self.next_id
                )));
            }
            self.check_format(&e.concept)?;
            e.concept.validate_shape()?;
            if e.provenance.source_puzzle_ids.is_empty() {
                return Err(StoreError::CorruptEntry(format!("entry {id} has no provenance")));
            }
            if let Concept::Ps(c) = &e.concept {
                for t in std::iter::once(&c.title).chain(e.aliases.iter()) {
                    if !titles.insert(title_key(t)) {
                        return Err(StoreError::DuplicateTitle(t.clone()));
                    }
                }
            }
        }
        for e in self.entries.values() {
            if let Concept::Ps(c) = &e.concept {
                self.check_references(c)?;
            }
        }
        Ok(())
    }

    fn selected(&self, ids: Option<&[ConceptId]>) -> Result<Vec<&Entry>, StoreError> {
        match ids {
            None => Ok(self.entries.values().collect()),
            Some(ids) => ids
                .iter()
                .map(|id| self.entries.get(id).ok_or(StoreError::UnknownId(*id)))
                .collect(),
        }
    }

    /// Id-labeled rendering of every field of the requested entries, in the
    /// order given (store order when `ids` is `None`).
    pub fn render_full(&self, ids: Option<&[ConceptId]>) -> Result<String, StoreError> {
        let blocks: Vec<String> = self
            .selected(ids)?
            .into_iter()
            .map(render_entry_full)
            .collect();
        Ok(blocks.join("\n\n"))
    }

    /// Title, kind, typed parameters and output typing only (PS stores).
    pub fn render_compressed(&self) -> Result<String, StoreError> {
        if self.format != MemoryFormat::Ps {
            return Err(StoreError::FormatMismatch {
                store: self.format,
                found: MemoryFormat::Ps,
            });
        }
        let blocks: Vec<String> = self
            .entries
            .values()
            .filter_map(|e| e.concept.as_ps().map(|c| render_ps_compressed(e.id, c)))
            .collect();
        Ok(blocks.join("\n\n"))
    }

    /// Compressed blocks of the requested entries (PS stores).
    pub fn render_compressed_subset(&self, ids: &[ConceptId]) -> Result<String, StoreError> {
        if self.format != MemoryFormat::Ps {
            return Err(StoreError::FormatMismatch {
                store: self.format,
                found: MemoryFormat::Ps,
            });
        }
        let blocks: Vec<String> = self
            .selected(Some(ids))?
            .into_iter()
            .filter_map(|e| e.concept.as_ps().map(|c| render_ps_compressed(e.id, c)))
            .collect();
        Ok(blocks.join("\n\n"))
    }

    /// Compressed blocks plus relevance cues; the catalog shown to
    /// reasoning-based selection.
    pub fn render_catalog(&self) -> Result<String, StoreError> {
        if self.format != MemoryFormat::Ps {
            return Err(StoreError::FormatMismatch {
                store: self.format,
                found: MemoryFormat::Ps,
            });
        }
        let blocks: Vec<String> = self
            .entries
            .values()
            .filter_map(|e| {
                e.concept.as_ps().map(|c| {
                    let mut s = render_ps_compressed(e.id, c);
                    for cue in &c.relevance_cues {
                        let _ = write!(s, "\n  cue: {cue}");
                    }
                    s
                })
            })
            .collect();
        Ok(blocks.join("\n\n"))
    }

    pub fn to_json(&self) -> String {
        let file = StoreFile {
            schema_version: SCHEMA_VERSION,
            format: self.format,
            entries: self.entries.values().cloned().collect(),
            next_id: self.next_id,
        };
        let mut s = serde_json::to_string_pretty(&file).expect("store always serializes");
        s.push('\n');
        s
    }

    pub fn from_json(raw: &str) -> Result<Self, StoreError> {
        let doc: serde_json::Value =
            serde_json::from_str(raw).map_err(|e| StoreError::CorruptEntry(e.to_string()))?;
        let version = doc
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| StoreError::CorruptEntry("missing schema_version".into()))?;
        if version != SCHEMA_VERSION as u64 {
            return Err(StoreError::SchemaVersionMismatch {
                found: version,
                expected: SCHEMA_VERSION,
            });
        }
        let format: MemoryFormat = doc
            .get("format")
            .cloned()
            .ok_or_else(|| StoreError::CorruptEntry("missing format".into()))
            .and_then(|v| {
                serde_json::from_value(v).map_err(|e| StoreError::CorruptEntry(e.to_string()))
            })?;
        let next_id = doc
            .get("next_id")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| StoreError::CorruptEntry("missing next_id".into()))?;
        let raw_entries = doc
            .get("entries")
            .and_then(|v| v.as_array())
            .ok_or_else(|| StoreError::CorruptEntry("missing entries".into()))?;
        let mut entries = BTreeMap::new();
        for (i, v) in raw_entries.iter().enumerate() {
            let e: Entry = serde_json::from_value(v.clone())
                .map_err(|err| StoreError::CorruptEntry(format!("entry {i}: {err}")))?;
            if entries.insert(e.id, e).is_some() {
                return Err(StoreError::CorruptEntry(format!("entry {i}: duplicate id")));
            }
        }
        let store = Self {
            format,
            entries,
            next_id,
        };
        store
            .check_integrity()
            .map_err(|e| StoreError::CorruptEntry(e.to_string()))?;
        Ok(store)
    }

    /// Atomic save: writes a sibling temp file, syncs, then renames.
    pub fn save(&self, path: &Path) -> Result<(), StoreError> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self, StoreError> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| StoreError::IoFailure(format!("{}: {e}", path.display())))?;
        Self::from_json(&raw)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let io = |e: std::io::Error| StoreError::IoFailure(format!("{}: {e}", path.display()));
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn render_entry_full(e: &Entry) -> String {
    match &e.concept {
        Concept::Oe(c) => format!("[{}] WHEN {} THEN {}", e.id, c.situation, c.suggestion),
        Concept::Ps(c) => {
            let mut s = format!("[{}] {}\n  kind: {}\n  description: {}", e.id, c.title, c.kind, c.description);
            if c.parameters.is_empty() {
                s.push_str("\n  parameters: none");
            } else {
                s.push_str("\n  parameters:");
                for p in &c.parameters {
                    let _ = write!(s, "\n    - {}: {}", p.name, p.type_annotation);
                    if !p.description.is_empty() {
                        let _ = write!(s, " -- {}", p.description);
                    }
                }
            }
            if let Some(out) = &c.output_typing {
                let _ = write!(s, "\n  output: {out}");
            }
            s.push_str("\n  relevance cues:");
            for cue in &c.relevance_cues {
                let _ = write!(s, "\n    - {cue}");
            }
            s.push_str("\n  implementation notes:");
            for note in &c.implementation_notes {
                let _ = write!(s, "\n    - {note}");
            }
            s
        }
    }
}

fn render_ps_compressed(id: ConceptId, c: &PsConcept) -> String {
    let mut s = format!("[{id}] {} ({})", c.title, c.kind);
    if !c.parameters.is_empty() {
        let params: Vec<String> = c
            .parameters
            .iter()
            .map(|p| format!("{}: {}", p.name, p.type_annotation))
            .collect();
        let _ = write!(s, "\n  params: {}", params.join("; "));
    }
    if let Some(out) = &c.output_typing {
        let _ = write!(s, "\n  output: {out}");
    }
    s
}

/// Snapshot label with natural ordering: `seed` < `after_9` < `after_10`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SnapshotLabel(String);

impl SnapshotLabel {
    pub fn new(label: impl Into<String>) -> Result<Self, StoreError> {
        let label = label.into();
        let ok = !label.is_empty()
            && label
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-'));
        if ok {
            Ok(Self(label))
        } else {
            Err(StoreError::InvalidLabel(label))
        }
    }

    /// Label for the write point after 1-based item `i`.
    pub fn after_item(i: usize) -> Self {
        Self(format!("after_{i}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    fn natural_key(&self) -> Vec<(bool, u64, String)> {
        let mut key = Vec::new();
        let mut digits = String::new();
        let mut text = String::new();
        for ch in self.0.chars() {
            if ch.is_ascii_digit() {
                if !text.is_empty() {
                    key.push((false, 0, std::mem::take(&mut text)));
                }
                digits.push(ch);
            } else {
                if !digits.is_empty() {
                    key.push((true, digits.parse().unwrap_or(u64::MAX), std::mem::take(&mut digits)));
                }
                text.push(ch);
            }
        }
        if !text.is_empty() {
            key.push((false, 0, text));
        }
        if !digits.is_empty() {
            key.push((true, digits.parse().unwrap_or(u64::MAX), digits));
        }
        key
    }
}

impl fmt::Display for SnapshotLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl PartialOrd for SnapshotLabel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for SnapshotLabel {
    fn cmp(&self, other: &Self) -> Ordering {
        self.natural_key().cmp(&other.natural_key())
    }
}

/// Immutable point-in-time copy of a store.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub label: SnapshotLabel,
    pub store: Arc<MemoryStore>,
}

/// Labeled snapshots, optionally mirrored to `snapshot-<label>.json` files.
#[derive(Debug, Default)]
pub struct SnapshotRegistry {
    dir: Option<PathBuf>,
    snapshots: Vec<Snapshot>,
}

impl SnapshotRegistry {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            snapshots: Vec::new(),
        }
    }

    pub fn file_name(label: &SnapshotLabel) -> String {
        format!("snapshot-{label}.json")
    }

    pub fn take(&mut self, store: &MemoryStore, label: SnapshotLabel) -> Result<Snapshot, StoreError> {
        if self.snapshots.iter().any(|s| s.label == label) {
            return Err(StoreError::DuplicateLabel(label.0));
        }
        if let Some(dir) = &self.dir {
            let path = dir.join(Self::file_name(&label));
            if path.exists() {
                return Err(StoreError::DuplicateLabel(label.0));
            }
            store.save(&path)?;
        }
        let snap = Snapshot {
            label,
            store: Arc::new(store.clone()),
        };
        self.snapshots.push(snap.clone());
        Ok(snap)
    }

    pub fn get(&self, label: &str) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| s.label.as_str() == label)
    }

    pub fn latest(&self) -> Option<&Snapshot> {
        self.snapshots.last()
    }

    pub fn labels(&self) -> Vec<SnapshotLabel> {
        self.snapshots.iter().map(|s| s.label.clone()).collect()
    }

    pub fn load(dir: &Path, label: &str) -> Result<MemoryStore, StoreError> {
        let label = SnapshotLabel::new(label)?;
        MemoryStore::load(&dir.join(Self::file_name(&label)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn t0() -> DateTime<Utc> {
        Utc.timestamp_opt(1_700_000_000, 0).unwrap()
    }

    fn oe(situation: &str, suggestion: &str) -> Concept {
        Concept::Oe(OeConcept {
            situation: situation.into(),
            suggestion: suggestion.into(),
        })
    }

    fn object_type() -> Concept {
        Concept::Ps(PsConcept {
            title: "object".into(),
            description: "connected component of same-colored cells".into(),
            kind: ConceptKind::Type,
            parameters: vec![],
            output_typing: None,
            relevance_cues: vec!["grid contains distinct shapes".into()],
            implementation_notes: vec!["4-connectivity flood fill".into()],
        })
    }

    fn sort_objects() -> Concept {
        Concept::Ps(PsConcept {
            title: "sort objects".into(),
            description: "order objects by a caller-provided key".into(),
            kind: ConceptKind::Routine,
            parameters: vec![
                PsParameter {
                    name: "objects".into(),
                    description: "objects to order".into(),
                    type_annotation: "list[{object}]".into(),
                },
                PsParameter {
                    name: "key".into(),
                    description: "ranking criterion such as size or color count".into(),
                    type_annotation: "Callable[[{object}], int]".into(),
                },
            ],
            output_typing: Some("list[{object}]".into()),
            relevance_cues: vec!["output arranges shapes by a measurable property".into()],
            implementation_notes: vec!["use a stable sort so ties keep input order".into()],
        })
    }

    fn ps_store() -> MemoryStore {
        let mut s = MemoryStore::new(MemoryFormat::Ps);
        s.add_concept(object_type(), "9af7a82c", t0()).unwrap();
        s.add_concept(sort_objects(), "9af7a82c", t0()).unwrap();
        s
    }

    #[test]
    fn first_oe_insertion_gets_id_zero() {
        let mut s = MemoryStore::new(MemoryFormat::Oe);
        let id = s
            .add_concept(
                oe("objects must be ordered by size", "count cells per object and sort"),
                "p1",
                t0(),
            )
            .unwrap();
        assert_eq!(id, ConceptId(0));
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn higher_order_routine_accepted_and_duplicates_rejected() {
        let mut s = ps_store();
        assert_eq!(s.len(), 2);
        assert_eq!(
            s.add_concept(sort_objects(), "p2", t0()),
            Err(StoreError::DuplicateTitle("sort objects".into()))
        );
        let mut upper = sort_objects();
        if let Concept::Ps(c) = &mut upper {
            c.title = "Sort Objects".into();
        }
        assert!(matches!(s.add_concept(upper, "p2", t0()), Err(StoreError::DuplicateTitle(_))));
        let mut no_output = sort_objects();
        if let Concept::Ps(c) = &mut no_output {
            c.title = "other".into();
            c.output_typing = None;
        }
        assert!(matches!(s.add_concept(no_output, "p2", t0()), Err(StoreError::InvalidConcept(_))));
    }

    #[test]
    fn dangling_reference_and_format_mismatch_rejected() {
        let mut s = MemoryStore::new(MemoryFormat::Ps);
        assert!(matches!(
            s.add_concept(sort_objects(), "p", t0()),
            Err(StoreError::DanglingTypeReference { .. })
        ));
        assert!(matches!(
            s.add_concept(oe("a", "b"), "p", t0()),
            Err(StoreError::FormatMismatch { .. })
        ));
        assert!(s.is_empty());
        assert_eq!(s.next_id(), 0);
    }

    #[test]
    fn revise_counts_and_rejects_kind_change() {
        let mut s = ps_store();
        let id = s.resolve_title("sort objects").unwrap();
        let mut updated = sort_objects();
        if let Concept::Ps(c) = &mut updated {
            c.relevance_cues.push("ranking by color frequency".into());
        }
        let e = s.revise_concept(id, updated, "p2").unwrap();
        assert_eq!(e.provenance.revision_count, 1);
        assert_eq!(e.concept.as_ps().unwrap().relevance_cues.len(), 2);

        let mut as_type = sort_objects();
        if let Concept::Ps(c) = &mut as_type {
            c.kind = ConceptKind::Type;
            c.output_typing = None;
        }
        assert_eq!(
            s.revise_concept(id, as_type, "p3"),
            Err(StoreError::KindChange {
                from: ConceptKind::Routine,
                to: ConceptKind::Type
            })
        );
        assert!(matches!(s.revise_concept(ConceptId(99), sort_objects(), "p"), Err(StoreError::UnknownId(_))));
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn provenance_grows_by_one_per_distinct_reviser() {
        let mut s = ps_store();
        let id = s.resolve_title("sort objects").unwrap();
        let n = 7;
        for i in 0..n {
            s.revise_concept(id, sort_objects(), &format!("reviser{i}")).unwrap();
        }
        let p = &s.get(id).unwrap().provenance;
        assert_eq!(p.revision_count, n);
        assert_eq!(p.source_puzzle_ids.len(), n as usize + 1);
    }

    #[test]
    fn rename_keeps_references_resolving() {
        let mut s = ps_store();
        let obj = s.resolve_title("object").unwrap();
        s.rename_concept(obj, "shape").unwrap();
        assert_eq!(s.resolve_title("object"), Some(obj));
        assert_eq!(s.resolve_title("shape"), Some(obj));
        s.check_integrity().unwrap();
        let sort = s.resolve_title("sort objects").unwrap();
        assert!(matches!(s.rename_concept(sort, "SHAPE"), Err(StoreError::DuplicateTitle(_))));
    }

    #[test]
    fn renderings() {
        let s = ps_store();
        assert_eq!(s.render_full(Some(&[])).unwrap(), "");
        let full = s.render_full(None).unwrap();
        assert_eq!(full, s.render_full(None).unwrap());
        let compressed = s.render_compressed().unwrap();
        assert!(compressed.contains("sort objects"));
        assert!(compressed.contains("Callable[[{object}], int]"));
        assert!(!compressed.contains("stable sort"));
        assert!(full.contains("stable sort"));
        assert!(compressed.len() <= full.len());
        assert_eq!(MemoryStore::new(MemoryFormat::Ps).render_compressed().unwrap(), "");
        assert!(matches!(
            MemoryStore::new(MemoryFormat::Oe).render_compressed(),
            Err(StoreError::FormatMismatch { .. })
        ));
        assert!(matches!(s.render_full(Some(&[ConceptId(5)])), Err(StoreError::UnknownId(_))));

        let mut o = MemoryStore::new(MemoryFormat::Oe);
        o.add_concept(oe("a grid is symmetric", "mirror it"), "p", t0()).unwrap();
        assert_eq!(o.render_full(None).unwrap(), "[0] WHEN a grid is symmetric THEN mirror it");
    }

    #[test]
    fn save_load_roundtrip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mem.json");
        let s = ps_store();
        s.save(&path).unwrap();
        assert_eq!(MemoryStore::load(&path).unwrap(), s);

        let raw = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &raw[..raw.len() / 2]).unwrap();
        assert!(matches!(MemoryStore::load(&path), Err(StoreError::CorruptEntry(_))));

        let bumped = raw.replace("\"schema_version\": 1", "\"schema_version\": 9");
        std::fs::write(&path, bumped).unwrap();
        assert!(matches!(
            MemoryStore::load(&path),
            Err(StoreError::SchemaVersionMismatch { found: 9, .. })
        ));
        assert!(matches!(
            MemoryStore::load(&dir.path().join("missing.json")),
            Err(StoreError::IoFailure(_))
        ));
    }

    #[test]
    fn snapshots_are_isolated_and_ordered() {
        let mut s = MemoryStore::new(MemoryFormat::Oe);
        let mut reg = SnapshotRegistry::in_memory();
        let snap = reg.take(&s, SnapshotLabel::new("seed").unwrap()).unwrap();
        s.add_concept(oe("x", "y"), "p", t0()).unwrap();
        assert_eq!(snap.store.len(), 0);
        assert!(matches!(
            reg.take(&s, SnapshotLabel::new("seed").unwrap()),
            Err(StoreError::DuplicateLabel(_))
        ));
        let mut labels: Vec<SnapshotLabel> = [100, 20, 10, 30]
            .iter()
            .map(|&i| SnapshotLabel::after_item(i))
            .collect();
        labels.sort();
        let names: Vec<&str> = labels.iter().map(|l| l.as_str()).collect();
        assert_eq!(names, ["after_10", "after_20", "after_30", "after_100"]);
        assert!(SnapshotLabel::new("../x").is_err());
    }

    #[test]
    fn braced_reference_extraction() {
        assert_eq!(braced_references("Callable[[{object}], { grid }]"), vec!["object", "grid"]);
        assert!(braced_references("int").is_empty());
        assert!(braced_references("{}").is_empty());
    }
}

//! Structured personal visual memory: entities with visual references,
//! relationship edges, durable user facts, and the provenance needed to audit
//! them.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use chrono::NaiveDate;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conversation::count_tokens;
use crate::gateway::schema::SceneOwner;
use crate::gateway::{cosine, EmbedKind, Embedder, EmbeddingVector, GatewayError};

pub const USER_ID: &str = "user";
const FORMAT_NAME: &str = "visualmem-visual-store";
const FORMAT_VERSION: u32 = 1;
/// Slack applied to threshold comparisons so that an exactly-on-threshold
/// similarity is not lost to rounding in the cosine.
const THRESHOLD_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("embedding dimension {got} does not match store dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("fact {statement:?} rests only on images attributed to a third party")]
    ThirdPartyEvidence { statement: String },
    #[error("invalid relationship: {0}")]
    InvalidEdge(String),
    #[error("invalid fact: {0}")]
    InvalidFact(String),
    #[error("entity candidate has no visual reference")]
    MissingVisualRef,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt store: {0}")]
    CorruptStore(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    Person,
    Asset,
    Pet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OwnerRelation {
    SelfUser,
    UserAssociated,
    ThirdParty,
    Unknown,
}

impl OwnerRelation {
    pub fn is_known(self) -> bool {
        self != OwnerRelation::Unknown
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactCategory {
    Possession,
    Habit,
    Health,
    Relationship,
    Environment,
    Other,
}

macro_rules! snake_display {
    ($($t:ty),*) => {$(
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let v = serde_json::to_value(self).map_err(|_| fmt::Error)?;
                f.write_str(v.as_str().unwrap_or_default())
            }
        }
    )*};
}
snake_display!(EntityKind, OwnerRelation, FactCategory, SceneOwner);

impl std::str::FromStr for FactCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.trim().to_lowercase()))
            .map_err(|_| format!("unknown fact category {s:?}"))
    }
}

impl std::str::FromStr for EntityKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(serde_json::Value::String(s.trim().to_lowercase()))
            .map_err(|_| format!("unknown entity kind {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualRef {
    pub image_id: String,
    pub embedding: EmbeddingVector,
    /// Appearance as described when this reference was taken.
    pub descriptor: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualEntity {
    pub entity_id: String,
    pub kind: EntityKind,
    pub display_name: String,
    pub aliases: BTreeSet<String>,
    pub owner_relation: OwnerRelation,
    pub visual_refs: Vec<VisualRef>,
    pub first_seen: NaiveDate,
    pub last_seen: NaiveDate,
    /// Embedding of the verbalized card, for free-text lookup.
    #[serde(default)]
    pub card: Option<CardEmbedding>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CardEmbedding {
    pub text: String,
    pub embedding: EmbeddingVector,
}

impl VisualEntity {
    pub fn answers_to(&self, name: &str) -> bool {
        let name = name.trim();
        self.entity_id.eq_ignore_ascii_case(name)
            || self.display_name.eq_ignore_ascii_case(name)
            || self.aliases.iter().any(|a| a.eq_ignore_ascii_case(name))
    }

    fn best_ref_similarity(&self, candidate: &EmbeddingVector) -> f64 {
        self.visual_refs
            .iter()
            .map(|r| cosine(candidate, &r.embedding))
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EvidenceRef {
    pub event_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn_index: Option<usize>,
}

impl EvidenceRef {
    pub fn image(event_id: impl Into<String>, image_id: impl Into<String>) -> Self {
        Self { event_id: event_id.into(), image_id: Some(image_id.into()), turn_index: None }
    }

    pub fn turn(event_id: impl Into<String>, turn_index: usize) -> Self {
        Self { event_id: event_id.into(), image_id: None, turn_index: Some(turn_index) }
    }

    pub fn is_valid(&self) -> bool {
        self.image_id.is_some() || self.turn_index.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationshipEdge {
    pub subject_id: String,
    pub relation: String,
    pub object_id: String,
    pub evidence: Vec<EvidenceRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurableFact {
    pub fact_id: String,
    pub statement: String,
    pub category: FactCategory,
    pub evidence: Vec<EvidenceRef>,
    pub confidence: f64,
    pub first_seen: NaiveDate,
    pub last_seen: NaiveDate,
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OwnerConflict {
    pub entity_id: String,
    pub existing: OwnerRelation,
    pub observed: OwnerRelation,
    pub image_id: String,
    pub date: NaiveDate,
}

/// Attribution of a committed image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub event_id: String,
    pub date: NaiveDate,
    pub scene_owner: SceneOwner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_id: String,
    pub date: NaiveDate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityCandidate {
    pub kind: EntityKind,
    pub display_name: String,
    pub aliases: BTreeSet<String>,
    pub owner_relation: OwnerRelation,
    pub visual_refs: Vec<VisualRef>,
    pub seen: NaiveDate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactCandidate {
    pub statement: String,
    pub category: FactCategory,
    pub evidence: Vec<EvidenceRef>,
    pub confidence: f64,
    pub seen: NaiveDate,
    pub embedding: EmbeddingVector,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UpsertOutcome {
    Created(String),
    Merged(String),
    /// Matched an entity whose known owner disagrees; nothing was changed.
    Conflict(String),
}

impl UpsertOutcome {
    pub fn entity_id(&self) -> &str {
        match self {
            UpsertOutcome::Created(id) | UpsertOutcome::Merged(id) | UpsertOutcome::Conflict(id) => id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StoreConfig {
    pub match_threshold: f64,
    pub name_hint_relaxation: f64,
    pub max_visual_refs: usize,
    pub fact_merge_threshold: f64,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self { match_threshold: 0.85, name_hint_relaxation: 0.10, max_visual_refs: 8, fact_merge_threshold: 0.95 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LookupKind {
    ByEntityIdentity,
    ByFactCategory,
    ByFreeText,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "type", content = "id", rename_all = "snake_case")]
pub enum StoreItem {
    Entity(String),
    Fact(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredItem {
    pub item: StoreItem,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Default)]
struct ReadCounter(AtomicU64);

impl Clone for ReadCounter {
    fn clone(&self) -> Self {
        Self(AtomicU64::new(self.0.load(AtomicOrdering::Relaxed)))
    }
}

impl PartialEq for ReadCounter {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct VisualStore {
    config: StoreConfig,
    dim: Option<usize>,
    entities: BTreeMap<String, VisualEntity>,
    edges: BTreeMap<(String, String, String), RelationshipEdge>,
    facts: BTreeMap<String, DurableFact>,
    conflicts: Vec<OwnerConflict>,
    images: BTreeMap<String, ImageRecord>,
    events: BTreeMap<String, EventRecord>,
    next_entity: u64,
    next_fact: u64,
    reads: ReadCounter,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditIssue(pub String);

impl VisualStore {
    pub fn new(config: StoreConfig) -> Self {
        Self { config, ..Self::default() }
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn entities(&self) -> impl Iterator<Item = &VisualEntity> {
        self.entities.values()
    }

    pub fn entity(&self, id: &str) -> Option<&VisualEntity> {
        self.entities.get(id)
    }

    pub fn edges(&self) -> impl Iterator<Item = &RelationshipEdge> {
        self.edges.values()
    }

    pub fn facts(&self) -> impl Iterator<Item = &DurableFact> {
        self.facts.values()
    }

    pub fn fact(&self, id: &str) -> Option<&DurableFact> {
        self.facts.get(id)
    }

    pub fn conflicts(&self) -> &[OwnerConflict] {
        &self.conflicts
    }

    pub fn images(&self) -> impl Iterator<Item = &ImageRecord> {
        self.images.values()
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images.get(image_id)
    }

    pub fn events(&self) -> impl Iterator<Item = &EventRecord> {
        self.events.values()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty() && self.edges.is_empty() && self.facts.is_empty()
    }

    /// Number of read operations served (match, lookup, digest).
    pub fn read_count(&self) -> u64 {
        self.reads.0.load(AtomicOrdering::Relaxed)
    }

    fn note_read(&self) {
        self.reads.0.fetch_add(1, AtomicOrdering::Relaxed);
    }

    fn check_dim(&self, v: &EmbeddingVector) -> Result<(), StoreError> {
        match self.dim {
            Some(expected) if expected != v.dim() => Err(StoreError::DimensionMismatch { expected, got: v.dim() }),
            _ => Ok(()),
        }
    }

    fn claim_dim(&mut self, v: &EmbeddingVector) -> Result<(), StoreError> {
        self.check_dim(v)?;
        self.dim.get_or_insert(v.dim());
        Ok(())
    }

    pub fn record_event(&mut self, event_id: &str, date: NaiveDate) {
        self.events
            .entry(event_id.to_string())
            .or_insert_with(|| EventRecord { event_id: event_id.to_string(), date });
    }

    pub fn record_image(&mut self, image_id: &str, event_id: &str, date: NaiveDate, scene_owner: SceneOwner) {
        self.images.insert(
            image_id.to_string(),
            ImageRecord { image_id: image_id.to_string(), event_id: event_id.to_string(), date, scene_owner },
        );
    }

    /// Best entity of `kind` whose closest visual reference clears the
    /// threshold. A name hint matching the entity's name or an alias lowers
    /// that entity's threshold by the configured relaxation. Ties go to the
    /// lexicographically smallest id.
    pub fn match_entity(
        &self,
        candidate: &EmbeddingVector,
        kind: EntityKind,
        name_hint: Option<&str>,
    ) -> Result<Option<(String, f64)>, StoreError> {
        self.check_dim(candidate)?;
        self.note_read();
        Ok(self.best_match(candidate, Some(kind), name_hint))
    }

    /// Like [`match_entity`](Self::match_entity) across all kinds.
    pub fn match_any_kind(&self, candidate: &EmbeddingVector) -> Result<Option<(String, f64)>, StoreError> {
        self.check_dim(candidate)?;
        self.note_read();
        Ok(self.best_match(candidate, None, None))
    }

    fn best_match(
        &self,
        candidate: &EmbeddingVector,
        kind: Option<EntityKind>,
        name_hint: Option<&str>,
    ) -> Option<(String, f64)> {
        let mut best: Option<(String, f64)> = None;
        for entity in self.entities.values() {
            if kind.is_some_and(|k| k != entity.kind) || entity.visual_refs.is_empty() {
                continue;
            }
            let sim = entity.best_ref_similarity(candidate);
            let mut threshold = self.config.match_threshold;
            if name_hint.is_some_and(|h| !h.trim().is_empty() && entity.answers_to(h)) {
                threshold -= self.config.name_hint_relaxation;
            }
            if sim + THRESHOLD_EPS < threshold {
                continue;
            }
            if best.as_ref().is_none_or(|(_, b)| sim > *b) {
                best = Some((entity.entity_id.clone(), sim));
            }
        }
        best
    }

    pub fn upsert_entity(&mut self, candidate: EntityCandidate) -> Result<UpsertOutcome, StoreError> {
        let first = candidate.visual_refs.first().ok_or(StoreError::MissingVisualRef)?;
        for r in &candidate.visual_refs {
            self.check_dim(&r.embedding)?;
        }
        let hint = Some(candidate.display_name.as_str());
        let matched = self.best_match(&first.embedding, Some(candidate.kind), hint);
        self.claim_dim(&first.embedding.clone())?;

        let Some((entity_id, _)) = matched else {
            self.next_entity += 1;
            let entity_id = format!("ent-{:04}", self.next_entity);
            let mut aliases = candidate.aliases;
            aliases.retain(|a| !a.eq_ignore_ascii_case(&candidate.display_name));
            let mut refs = candidate.visual_refs;
            let cap = self.config.max_visual_refs;
            if refs.len() > cap {
                refs.drain(..refs.len() - cap);
            }
            self.entities.insert(
                entity_id.clone(),
                VisualEntity {
                    entity_id: entity_id.clone(),
                    kind: candidate.kind,
                    display_name: candidate.display_name,
                    aliases,
                    owner_relation: candidate.owner_relation,
                    visual_refs: refs,
                    first_seen: candidate.seen,
                    last_seen: candidate.seen,
                    card: None,
                },
            );
            return Ok(UpsertOutcome::Created(entity_id));
        };

        let cap = self.config.max_visual_refs;
        let entity = self.entities.get_mut(&entity_id).expect("matched entity exists");
        let (existing, observed) = (entity.owner_relation, candidate.owner_relation);
        if existing.is_known() && observed.is_known() && existing != observed {
            self.conflicts.push(OwnerConflict {
                entity_id: entity_id.clone(),
                existing,
                observed,
                image_id: first.image_id.clone(),
                date: candidate.seen,
            });
            return Ok(UpsertOutcome::Conflict(entity_id));
        }
        if !existing.is_known() {
            entity.owner_relation = observed;
        }
        for alias in candidate.aliases.into_iter().chain(std::iter::once(candidate.display_name)) {
            if !entity.answers_to(&alias) {
                entity.aliases.insert(alias);
            }
        }
        for r in candidate.visual_refs {
            if !entity.visual_refs.iter().any(|x| x.image_id == r.image_id) {
                entity.visual_refs.push(r);
            }
        }
        if entity.visual_refs.len() > cap {
            let excess = entity.visual_refs.len() - cap;
            entity.visual_refs.drain(..excess);
        }
        entity.first_seen = entity.first_seen.min(candidate.seen);
        entity.last_seen = entity.last_seen.max(candidate.seen);
        Ok(UpsertOutcome::Merged(entity_id))
    }

    /// Resolves a name used in an extraction to an entity id: `user`, an id,
    /// or a case-insensitive name/alias (smallest id wins).
    pub fn resolve_name(&self, name: &str) -> Option<String> {
        if name.trim().eq_ignore_ascii_case(USER_ID) {
            return Some(USER_ID.to_string());
        }
        self.entities.values().find(|e| e.answers_to(name)).map(|e| e.entity_id.clone())
    }

    fn endpoint_exists(&self, id: &str) -> bool {
        id == USER_ID || self.entities.contains_key(id)
    }

    pub fn add_relationship(&mut self, edge: RelationshipEdge) -> Result<(), StoreError> {
        for id in [&edge.subject_id, &edge.object_id] {
            if !self.endpoint_exists(id) {
                return Err(StoreError::UnknownEntity(id.clone()));
            }
        }
        if edge.subject_id == edge.object_id {
            return Err(StoreError::InvalidEdge("subject and object are the same".into()));
        }
        if edge.relation.trim().is_empty() {
            return Err(StoreError::InvalidEdge("empty relation".into()));
        }
        if edge.evidence.is_empty() || !edge.evidence.iter().all(EvidenceRef::is_valid) {
            return Err(StoreError::InvalidEdge("missing or invalid evidence".into()));
        }
        let key = (edge.subject_id.clone(), edge.relation.clone(), edge.object_id.clone());
        match self.edges.get_mut(&key) {
            Some(existing) => merge_evidence(&mut existing.evidence, edge.evidence),
            None => {
                let mut edge = edge;
                let evidence = std::mem::take(&mut edge.evidence);
                merge_evidence(&mut edge.evidence, evidence);
                self.edges.insert(key, edge);
            }
        }
        Ok(())
    }

    /// Adds or merges a durable fact and returns its id. A fact whose every
    /// evidence reference is an image attributed to a third party is refused.
    pub fn add_fact(&mut self, fact: FactCandidate) -> Result<String, StoreError> {
        if fact.statement.trim().is_empty() {
            return Err(StoreError::InvalidFact("empty statement".into()));
        }
        if fact.evidence.is_empty() || !fact.evidence.iter().all(EvidenceRef::is_valid) {
            return Err(StoreError::InvalidFact("missing or invalid evidence".into()));
        }
        if !(0.0..=1.0).contains(&fact.confidence) {
            return Err(StoreError::InvalidFact(format!("confidence {} outside [0, 1]", fact.confidence)));
        }
        self.check_dim(&fact.embedding)?;
        let third_party_only = fact.evidence.iter().all(|ev| {
            ev.image_id
                .as_ref()
                .and_then(|id| self.images.get(id))
                .is_some_and(|img| img.scene_owner == SceneOwner::ThirdParty)
        });
        if third_party_only {
            return Err(StoreError::ThirdPartyEvidence { statement: fact.statement });
        }
        self.claim_dim(&fact.embedding.clone())?;

        let threshold = self.config.fact_merge_threshold;
        let existing = self
            .facts
            .values()
            .filter(|f| f.category == fact.category)
            .find(|f| cosine(&f.embedding, &fact.embedding) + THRESHOLD_EPS >= threshold)
            .map(|f| f.fact_id.clone());
        if let Some(id) = existing {
            let f = self.facts.get_mut(&id).expect("fact exists");
            merge_evidence(&mut f.evidence, fact.evidence);
            f.first_seen = f.first_seen.min(fact.seen);
            f.last_seen = f.last_seen.max(fact.seen);
            f.confidence = f.confidence.max(fact.confidence);
            return Ok(id);
        }
        self.next_fact += 1;
        let fact_id = format!("fact-{:04}", self.next_fact);
        let mut evidence = Vec::new();
        merge_evidence(&mut evidence, fact.evidence);
        self.facts.insert(
            fact_id.clone(),
            DurableFact {
                fact_id: fact_id.clone(),
                statement: fact.statement,
                category: fact.category,
                evidence,
                confidence: fact.confidence,
                first_seen: fact.seen,
                last_seen: fact.seen,
                embedding: fact.embedding,
            },
        );
        Ok(fact_id)
    }

    fn display(&self, id: &str) -> String {
        if id == USER_ID {
            return USER_ID.to_string();
        }
        self.entities.get(id).map(|e| e.display_name.clone()).unwrap_or_else(|| id.to_string())
    }

    /// Text card for one entity: name, kind, owner, appearance, relations and
    /// the dates of the photos it was seen in.
    pub fn verbalize_entity(&self, entity_id: &str) -> Option<String> {
        let e = self.entities.get(entity_id)?;
        let mut out = format!("{} ({}, {})", e.display_name, e.kind, e.owner_relation);
        if !e.aliases.is_empty() {
            out.push_str(&format!(", also called {}", e.aliases.iter().cloned().collect::<Vec<_>>().join(", ")));
        }
        if let Some(r) = e.visual_refs.last() {
            out.push_str(&format!(". Appearance: {}", r.descriptor));
        }
        let relations: Vec<String> = self
            .edges
            .values()
            .filter(|edge| edge.subject_id == e.entity_id || edge.object_id == e.entity_id)
            .map(|edge| format!("{} {} {}", self.display(&edge.subject_id), edge.relation, self.display(&edge.object_id)))
            .collect();
        if !relations.is_empty() {
            out.push_str(&format!(". Relations: {}", relations.join("; ")));
        }
        let dates: BTreeSet<NaiveDate> = e
            .visual_refs
            .iter()
            .filter_map(|r| self.images.get(&r.image_id).map(|img| img.date))
            .collect();
        if dates.is_empty() {
            out.push_str(&format!(". Seen {} to {}", e.first_seen, e.last_seen));
        } else {
            let dates: Vec<String> = dates.iter().map(ToString::to_string).collect();
            out.push_str(&format!(". Seen in photos from {}", dates.join(", ")));
        }
        out.push('.');
        Some(out)
    }

    pub fn verbalize_fact(&self, fact_id: &str) -> Option<String> {
        let f = self.facts.get(fact_id)?;
        Some(format!(
            "{} ({}; first seen {}, last seen {})",
            f.statement, f.category, f.first_seen, f.last_seen
        ))
    }

    /// Re-embeds cards whose text changed since they were last embedded.
    pub fn refresh_cards(&mut self, embedder: &dyn Embedder) -> Result<usize, StoreError> {
        let stale: Vec<(String, String)> = self
            .entities
            .keys()
            .filter_map(|id| {
                let text = self.verbalize_entity(id)?;
                let current = self.entities[id].card.as_ref().map(|c| c.text.as_str());
                (current != Some(text.as_str())).then(|| (id.clone(), text))
            })
            .collect();
        let n = stale.len();
        for (id, text) in stale {
            let embedding = embedder.embed(EmbedKind::Text, &text)?;
            self.check_dim(&embedding)?;
            self.entities.get_mut(&id).expect("entity exists").card = Some(CardEmbedding { text, embedding });
        }
        Ok(n)
    }

    pub fn lookup(
        &self,
        kind: LookupKind,
        key: &str,
        k: usize,
        embedder: &dyn Embedder,
    ) -> Result<Vec<ScoredItem>, StoreError> {
        if k == 0 || key.trim().is_empty() {
            return Ok(Vec::new());
        }
        self.note_read();
        let mut items = match kind {
            LookupKind::ByEntityIdentity => {
                let mut exact = self.exact_entity_hits(key);
                if exact.len() < k && !self.entities.is_empty() {
                    let q = embedder.embed(EmbedKind::Text, key)?;
                    self.check_dim(&q)?;
                    let mut rest: Vec<ScoredItem> = self
                        .entities
                        .values()
                        .filter(|e| !e.answers_to(key))
                        .map(|e| {
                            let card = e.card.as_ref().map(|c| cosine(&q, &c.embedding)).unwrap_or(f64::NEG_INFINITY);
                            let score = card.max(e.best_ref_similarity(&q));
                            self.entity_item(&e.entity_id, score)
                        })
                        .collect();
                    sort_scored(&mut rest);
                    exact.extend(rest);
                }
                exact
            }
            LookupKind::ByFactCategory => {
                let category: FactCategory = match key.parse() {
                    Ok(c) => c,
                    Err(_) => return Ok(Vec::new()),
                };
                let mut facts: Vec<&DurableFact> = self.facts.values().filter(|f| f.category == category).collect();
                facts.sort_by(|a, b| b.last_seen.cmp(&a.last_seen).then_with(|| a.fact_id.cmp(&b.fact_id)));
                facts.iter().map(|f| self.fact_item(&f.fact_id, 1.0)).collect()
            }
            LookupKind::ByFreeText => {
                if self.is_empty() {
                    return Ok(Vec::new());
                }
                let q = embedder.embed(EmbedKind::Text, key)?;
                self.rank_free_text(&q)?
            }
        };
        items.truncate(k);
        Ok(items)
    }

    /// Every verbalized item (entity cards and facts) ranked by cosine to `query`.
    pub fn rank_free_text(&self, query: &EmbeddingVector) -> Result<Vec<ScoredItem>, StoreError> {
        self.check_dim(query)?;
        self.note_read();
        let mut items: Vec<ScoredItem> = self
            .entities
            .values()
            .filter_map(|e| e.card.as_ref().map(|c| self.entity_item(&e.entity_id, cosine(query, &c.embedding))))
            .chain(self.facts.values().map(|f| self.fact_item(&f.fact_id, cosine(query, &f.embedding))))
            .collect();
        sort_scored(&mut items);
        Ok(items)
    }

    /// Entities whose id, name or alias equals `key` (case-insensitive), score 1.
    pub fn exact_entity_hits(&self, key: &str) -> Vec<ScoredItem> {
        self.note_read();
        self.entities
            .values()
            .filter(|e| e.answers_to(key))
            .map(|e| self.entity_item(&e.entity_id, 1.0))
            .collect()
    }

    fn entity_item(&self, id: &str, score: f64) -> ScoredItem {
        ScoredItem {
            item: StoreItem::Entity(id.to_string()),
            text: self.verbalize_entity(id).unwrap_or_default(),
            score,
        }
    }

    fn fact_item(&self, id: &str, score: f64) -> ScoredItem {
        ScoredItem { item: StoreItem::Fact(id.to_string()), text: self.verbalize_fact(id).unwrap_or_default(), score }
    }

    /// Compact memory state: most recently seen entities and facts, verbalized
    /// one per line, stopping before the token cap is exceeded.
    pub fn memory_digest(&self, max_entities: usize, max_facts: usize, token_cap: u64) -> String {
        self.note_read();
        let mut entities: Vec<&VisualEntity> = self.entities.values().collect();
        entities.sort_by(|a, b| b.last_seen.cmp(&a.last_seen).then_with(|| a.entity_id.cmp(&b.entity_id)));
        let mut facts: Vec<&DurableFact> = self.facts.values().collect();
        facts.sort_by(|a, b| b.last_seen.cmp(&a.last_seen).then_with(|| a.fact_id.cmp(&b.fact_id)));

        let lines = entities
            .iter()
            .take(max_entities)
            .filter_map(|e| self.verbalize_entity(&e.entity_id))
            .chain(facts.iter().take(max_facts).filter_map(|f| self.verbalize_fact(&f.fact_id)));
        let mut out = String::new();
        let mut used = 0;
        for line in lines {
            let cost = count_tokens(&line) + u64::from(!out.is_empty());
            if used + cost > token_cap {
                break;
            }
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&line);
            used += cost;
        }
        out
    }

    /// Referential-integrity check: every stored item carries evidence that
    /// resolves to a recorded image or event.
    pub fn audit(&self) -> Vec<AuditIssue> {
        let mut issues = Vec::new();
        let mut issue = |s: String| issues.push(AuditIssue(s));
        for e in self.entities.values() {
            if e.visual_refs.is_empty() {
                issue(format!("entity {} has no visual references", e.entity_id));
            }
            if e.last_seen < e.first_seen {
                issue(format!("entity {} last_seen precedes first_seen", e.entity_id));
            }
            for r in &e.visual_refs {
                match self.images.get(&r.image_id) {
                    None => issue(format!("entity {} references unrecorded image {}", e.entity_id, r.image_id)),
                    Some(img) if !self.events.contains_key(&img.event_id) => {
                        issue(format!("image {} belongs to unrecorded event {}", img.image_id, img.event_id))
                    }
                    Some(_) => {}
                }
            }
        }
        let check_evidence = |owner: &str, ev: &[EvidenceRef], issue: &mut dyn FnMut(String)| {
            if ev.is_empty() {
                issue(format!("{owner} has no evidence"));
            }
            for r in ev {
                if !r.is_valid() {
                    issue(format!("{owner} has evidence with neither image nor turn"));
                }
                if !self.events.contains_key(&r.event_id) {
                    issue(format!("{owner} cites unrecorded event {}", r.event_id));
                }
                if let Some(img) = &r.image_id {
                    if !self.images.contains_key(img) {
                        issue(format!("{owner} cites unrecorded image {img}"));
                    }
                }
            }
        };
        for edge in self.edges.values() {
            let owner = format!("edge {} {} {}", edge.subject_id, edge.relation, edge.object_id);
            if !self.endpoint_exists(&edge.subject_id) || !self.endpoint_exists(&edge.object_id) {
                issue(format!("{owner} has a dangling endpoint"));
            }
            check_evidence(&owner, &edge.evidence, &mut issue);
        }
        for f in self.facts.values() {
            check_evidence(&format!("fact {}", f.fact_id), &f.evidence, &mut issue);
            if !(0.0..=1.0).contains(&f.confidence) {
                issue(format!("fact {} confidence out of range", f.fact_id));
            }
        }
        issues
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), StoreError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        write_jsonl(&dir.join("entities.jsonl"), self.entities.values())?;
        write_jsonl(&dir.join("edges.jsonl"), self.edges.values())?;
        write_jsonl(&dir.join("facts.jsonl"), self.facts.values())?;
        write_jsonl(&dir.join("conflicts.jsonl"), self.conflicts.iter())?;
        write_jsonl(&dir.join("images.jsonl"), self.images.values())?;
        write_jsonl(&dir.join("events.jsonl"), self.events.values())?;
        let manifest = Manifest {
            format: FORMAT_NAME.to_string(),
            version: FORMAT_VERSION,
            embedding_dim: self.dim,
            config: self.config,
            next_entity: self.next_entity,
            next_fact: self.next_fact,
            counts: Counts {
                entities: self.entities.len(),
                edges: self.edges.len(),
                facts: self.facts.len(),
                conflicts: self.conflicts.len(),
                images: self.images.len(),
                events: self.events.len(),
            },
        };
        let mut body = serde_json::to_string_pretty(&manifest).map_err(std::io::Error::from)?;
        body.push('\n');
        fs::write(dir.join("manifest.json"), body)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref();
        let raw = fs::read_to_string(dir.join("manifest.json"))?;
        let m: Manifest = serde_json::from_str(&raw).map_err(|e| StoreError::CorruptStore(format!("manifest: {e}")))?;
        if m.format != FORMAT_NAME || m.version != FORMAT_VERSION {
            return Err(StoreError::CorruptStore(format!("unsupported format {} v{}", m.format, m.version)));
        }
        let entities: Vec<VisualEntity> = read_jsonl(&dir.join("entities.jsonl"), m.counts.entities)?;
        let edges: Vec<RelationshipEdge> = read_jsonl(&dir.join("edges.jsonl"), m.counts.edges)?;
        let facts: Vec<DurableFact> = read_jsonl(&dir.join("facts.jsonl"), m.counts.facts)?;
        let conflicts: Vec<OwnerConflict> = read_jsonl(&dir.join("conflicts.jsonl"), m.counts.conflicts)?;
        let images: Vec<ImageRecord> = read_jsonl(&dir.join("images.jsonl"), m.counts.images)?;
        let events: Vec<EventRecord> = read_jsonl(&dir.join("events.jsonl"), m.counts.events)?;

        let dims = entities
            .iter()
            .flat_map(|e| e.visual_refs.iter().map(|r| &r.embedding).chain(e.card.iter().map(|c| &c.embedding)))
            .chain(facts.iter().map(|f| &f.embedding));
        for v in dims {
            if Some(v.dim()) != m.embedding_dim {
                return Err(StoreError::CorruptStore(format!(
                    "embedding of dimension {} in a store of dimension {:?}",
                    v.dim(),
                    m.embedding_dim
                )));
            }
        }
        let store = Self {
            config: m.config,
            dim: m.embedding_dim,
            entities: entities.into_iter().map(|e| (e.entity_id.clone(), e)).collect(),
            edges: edges
                .into_iter()
                .map(|e| ((e.subject_id.clone(), e.relation.clone(), e.object_id.clone()), e))
                .collect(),
            facts: facts.into_iter().map(|f| (f.fact_id.clone(), f)).collect(),
            conflicts,
            images: images.into_iter().map(|i| (i.image_id.clone(), i)).collect(),
            events: events.into_iter().map(|e| (e.event_id.clone(), e)).collect(),
            next_entity: m.next_entity,
            next_fact: m.next_fact,
            reads: ReadCounter::default(),
        };
        if store.entities.len() != m.counts.entities
            || store.edges.len() != m.counts.edges
            || store.facts.len() != m.counts.facts
        {
            return Err(StoreError::CorruptStore("duplicate keys in collection files".into()));
        }
        Ok(store)
    }
}

fn merge_evidence(into: &mut Vec<EvidenceRef>, new: Vec<EvidenceRef>) {
    for ev in new {
        if !into.contains(&ev) {
            into.push(ev);
        }
    }
}

/// Score descending, ties by item key.
fn sort_scored(items: &mut [ScoredItem]) {
    items.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.item.cmp(&b.item))
    });
}

#[derive(Debug, Serialize, Deserialize)]
struct Counts {
    entities: usize,
    edges: usize,
    facts: usize,
    conflicts: usize,
    images: usize,
    events: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    embedding_dim: Option<usize>,
    config: StoreConfig,
    next_entity: u64,
    next_fact: u64,
    counts: Counts,
}

fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl Iterator<Item = &'a T>) -> Result<(), StoreError> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_jsonl<T: DeserializeOwned>(path: &Path, expected: usize) -> Result<Vec<T>, StoreError> {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| StoreError::CorruptStore(format!("{name} line {}: {e}", i + 1)))?;
        out.push(item);
    }
    if out.len() != expected {
        return Err(StoreError::CorruptStore(format!(
            "{name} holds {} records, manifest expects {expected}",
            out.len()
        )));
    }
    Ok(out)
}

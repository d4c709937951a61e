//! Command-line and HTTP front end over the memory engine.

pub mod config;
pub mod service;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;
use visualmem_core::eval::{load_benchmark, LoadError, LoadedBenchmark};
use visualmem_core::pipeline::{ImageObservation, ObservationStatus, PipelineError};
use visualmem_core::text_memory::TextMemoryBackend;
use chrono::NaiveDate;
use visualmem_core::visual_store::{
    DurableFact, EntityKind, EvidenceRef, FactCategory, LookupKind, OwnerRelation, StoreItem, VisualEntity,
};
use visualmem_core::{Engine, Event, EventInput, Gateway};

pub use config::{EngineConfig, GatewayConfig, GatewayKind};

#[derive(Debug, Error)]
pub enum ShellError {
    #[error("config: {0}")]
    Config(String),
    #[error("{}:{line}: {detail}", path.display())]
    Events { path: PathBuf, line: usize, detail: String },
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("io error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

/// The saved engine under `store_dir`, or a fresh one when nothing is saved yet.
pub fn open_engine(config: &EngineConfig, gateway: Arc<dyn Gateway>) -> Result<Engine, ShellError> {
    if Engine::exists(&config.store_dir) {
        Ok(Engine::load(&config.store_dir, config.pipeline, gateway)?)
    } else {
        Ok(Engine::new(config.pipeline, gateway)?)
    }
}

/// Reads an events file: one [`EventInput`] JSON object per line.
pub fn read_events(path: &Path) -> Result<Vec<Event>, ShellError> {
    let body = std::fs::read_to_string(path).map_err(|source| ShellError::Io { path: path.to_path_buf(), source })?;
    let mut events = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| ShellError::Events { path: path.to_path_buf(), line: i + 1, detail };
        let input: EventInput = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        events.push(input.into_event().map_err(|e| bad(e.to_string()))?);
    }
    Ok(events)
}

/// Accepts either a benchmark root (with `manifest.json`) or a directory
/// holding one under `benchmark/`.
pub fn load_benchmark_dir(dir: &Path) -> Result<LoadedBenchmark, ShellError> {
    let nested = dir.join("benchmark");
    let root = if !dir.join("manifest.json").is_file() && nested.join("manifest.json").is_file() { nested } else { dir.to_path_buf() };
    Ok(load_benchmark(root)?)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityFilter {
    pub kind: Option<EntityKind>,
    pub owner: Option<OwnerRelation>,
    /// Case-insensitive substring of the name or an alias.
    pub name: Option<String>,
}

impl EntityFilter {
    pub fn matches(&self, e: &VisualEntity) -> bool {
        self.kind.is_none_or(|k| k == e.kind)
            && self.owner.is_none_or(|o| o == e.owner_relation)
            && self.name.as_ref().is_none_or(|n| {
                let n = n.to_lowercase();
                e.display_name.to_lowercase().contains(&n) || e.aliases.iter().any(|a| a.to_lowercase().contains(&n))
            })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FactFilter {
    pub category: Option<FactCategory>,
    pub contains: Option<String>,
}

impl FactFilter {
    pub fn matches(&self, f: &DurableFact) -> bool {
        self.category.is_none_or(|c| c == f.category)
            && self.contains.as_ref().is_none_or(|s| f.statement.to_lowercase().contains(&s.to_lowercase()))
    }
}

pub fn entities<'a>(engine: &'a Engine, filter: &EntityFilter) -> Vec<&'a VisualEntity> {
    engine.visual_store().entities().filter(|e| filter.matches(e)).collect()
}

pub fn facts<'a>(engine: &'a Engine, filter: &FactFilter) -> Vec<&'a DurableFact> {
    engine.visual_store().facts().filter(|f| filter.matches(f)).collect()
}

/// Observations, by default only those still pending.
pub fn observations(engine: &Engine, status: Option<ObservationStatus>) -> Vec<&ImageObservation> {
    let status = status.unwrap_or(ObservationStatus::Pending);
    engine.state().observations().filter(|o| o.status == status).collect()
}

/// Entity without its embeddings, for listings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntityView {
    pub entity_id: String,
    pub kind: EntityKind,
    pub display_name: String,
    pub aliases: Vec<String>,
    pub owner_relation: OwnerRelation,
    /// `(image_id, descriptor)` per visual reference.
    pub visual_refs: Vec<(String, String)>,
    pub first_seen: NaiveDate,
    pub last_seen: NaiveDate,
    pub card: Option<String>,
}

impl From<&VisualEntity> for EntityView {
    fn from(e: &VisualEntity) -> Self {
        Self {
            entity_id: e.entity_id.clone(),
            kind: e.kind,
            display_name: e.display_name.clone(),
            aliases: e.aliases.iter().cloned().collect(),
            owner_relation: e.owner_relation,
            visual_refs: e.visual_refs.iter().map(|r| (r.image_id.clone(), r.descriptor.clone())).collect(),
            first_seen: e.first_seen,
            last_seen: e.last_seen,
            card: e.card.as_ref().map(|c| c.text.clone()),
        }
    }
}

/// Fact without its embedding, for listings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FactView {
    pub fact_id: String,
    pub statement: String,
    pub category: FactCategory,
    pub evidence: Vec<EvidenceRef>,
    pub confidence: f64,
    pub first_seen: NaiveDate,
    pub last_seen: NaiveDate,
}

impl From<&DurableFact> for FactView {
    fn from(f: &DurableFact) -> Self {
        Self {
            fact_id: f.fact_id.clone(),
            statement: f.statement.clone(),
            category: f.category,
            evidence: f.evidence.clone(),
            confidence: f.confidence,
            first_seen: f.first_seen,
            last_seen: f.last_seen,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PreviewHit {
    pub store: &'static str,
    pub id: String,
    pub text: String,
    pub score: f64,
}

/// Free-text retrieval preview over both stores, without answering.
pub fn search(engine: &Engine, text: &str, k: usize) -> Result<Vec<PreviewHit>, ShellError> {
    let gw = engine.gateway().as_ref();
    let mut hits = Vec::new();
    if !engine.visual_store().is_empty() {
        let items = engine
            .visual_store()
            .lookup(LookupKind::ByFreeText, text, k, gw)
            .map_err(|e| ShellError::Pipeline(e.into()))?;
        hits.extend(items.into_iter().map(|s| PreviewHit {
            store: "visual",
            id: match s.item {
                StoreItem::Entity(id) | StoreItem::Fact(id) => id,
            },
            text: s.text,
            score: s.score,
        }));
    }
    if !engine.text_memory().is_empty() {
        let items = engine.text_memory().search_text_memory(text, k, gw).map_err(|e| ShellError::Pipeline(e.into()))?;
        hits.extend(items.into_iter().map(|h| PreviewHit {
            store: "text",
            id: h.item.item_id,
            text: h.item.text,
            score: h.score,
        }));
    }
    hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.store.cmp(b.store)).then_with(|| a.id.cmp(&b.id)));
    hits.truncate(k);
    Ok(hits)
}

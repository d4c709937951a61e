//! Ingestion: text turns go straight to text memory, images go through
//! context-guided interpretation, deferred commitment and structured
//! extraction into the visual store.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::conversation::{Event, Role, Turn, TurnError};
use crate::gateway::schema::{parse_checked, Decision, Extraction, Interpretation, SceneOwner};
use crate::gateway::{EmbedKind, Gateway, GatewayError, GenerationRequest, Message, Part, SchemaId};
use crate::text_memory::{TextMemory, TextMemoryBackend, TextMemoryError, TextSource};
use crate::visual_store::{
    AuditIssue, EntityCandidate, EvidenceRef, FactCandidate, OwnerRelation, RelationshipEdge, StoreConfig,
    StoreError, UpsertOutcome, VisualRef, VisualStore,
};

pub const DIGEST_MAX_ENTITIES: usize = 10;
pub const DIGEST_MAX_FACTS: usize = 10;
pub const DIGEST_TOKEN_CAP: u64 = 600;

const INTERPRET_INSTRUCTIONS: &str = "You maintain a personal visual memory for a user. Interpret the shared image \
together with the surrounding conversation and the current memory. Decide who is present, whose space or \
belongings are shown (the user's own, a third party's, a public place, or unknown), and which people, pets, \
objects or personal facts are worth remembering. Confirm only when ownership and identity are clear; defer when \
they are ambiguous; reject images with nothing worth remembering.";

const EXTRACT_INSTRUCTIONS: &str = "Convert the confirmed image into structured memory: the recurring people, pets \
and personal objects it shows (with a short visual descriptor each), relationships between them and the user \
(use the name \"user\" for the user), and durable facts about the user supported by the image and conversation.";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid pipeline configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid event: {0}")]
    InvalidEvent(#[from] TurnError),
    #[error("event {event_id} dated {date} precedes the last ingested event ({last})")]
    OutOfOrder { event_id: String, date: NaiveDate, last: NaiveDate },
    #[error("event {0} was already ingested")]
    DuplicateEvent(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    TextMemory(#[from] TextMemoryError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt engine state: {0}")]
    Corrupt(String),
}

/// Dialogue supplied alongside an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ContextWindow {
    /// n turns either side of the image turn.
    Turns(usize),
    FullSession,
}

impl fmt::Display for ContextWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContextWindow::Turns(n) => write!(f, "{n}"),
            ContextWindow::FullSession => f.write_str("full"),
        }
    }
}

impl std::str::FromStr for ContextWindow {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("full") || s.eq_ignore_ascii_case("full_session") {
            return Ok(ContextWindow::FullSession);
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(ContextWindow::Turns(n)),
            _ => Err(format!("context window must be a positive turn count or \"full\", got {s:?}")),
        }
    }
}

// Serialized as a bare integer or the string "full".
impl Serialize for ContextWindow {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ContextWindow::Turns(n) => s.serialize_u64(*n as u64),
            ContextWindow::FullSession => s.serialize_str("full"),
        }
    }
}

impl<'de> Deserialize<'de> for ContextWindow {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u64),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Count(n) => n.to_string().parse().map_err(serde::de::Error::custom),
            Raw::Name(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "yes")]
    pub enable_text: bool,
    #[serde(default = "yes")]
    pub enable_visual: bool,
    #[serde(default = "yes")]
    pub enable_pending: bool,
    #[serde(default = "default_window")]
    pub context_window: ContextWindow,
    #[serde(default = "default_interval")]
    pub reeval_interval_events: u64,
    #[serde(default = "default_attempts")]
    pub max_reeval_attempts: u32,
    #[serde(default = "default_threshold")]
    pub confirm_confidence_threshold: f64,
}

fn yes() -> bool {
    true
}
fn default_window() -> ContextWindow {
    ContextWindow::FullSession
}
fn default_interval() -> u64 {
    5
}
fn default_attempts() -> u32 {
    3
}
fn default_threshold() -> f64 {
    0.7
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            enable_text: true,
            enable_visual: true,
            enable_pending: true,
            context_window: default_window(),
            reeval_interval_events: default_interval(),
            max_reeval_attempts: default_attempts(),
            confirm_confidence_threshold: default_threshold(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::InvalidConfig(m.to_string()));
        if !self.enable_text && !self.enable_visual {
            return bad("at least one of enable_text and enable_visual must be set");
        }
        if self.context_window == ContextWindow::Turns(0) {
            return bad("context window must cover at least one turn");
        }
        if self.reeval_interval_events == 0 {
            return bad("reeval_interval_events must be positive");
        }
        if self.max_reeval_attempts == 0 {
            return bad("max_reeval_attempts must be positive");
        }
        if !(0.0..=1.0).contains(&self.confirm_confidence_threshold) {
            return bad("confirm_confidence_threshold must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationStatus {
    Pending,
    Confirmed,
    Rejected,
    Stale,
}

impl ObservationStatus {
    pub fn is_terminal(self) -> bool {
        self != ObservationStatus::Pending
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageObservation {
    pub image_id: String,
    pub event_id: String,
    pub date: NaiveDate,
    pub turn_index: usize,
    /// Visual prompt from the inline markup.
    pub visual_prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    pub context: Vec<Turn>,
    pub status: ObservationStatus,
    pub attempts: u32,
    /// Ordinal of the event after which this was last interpreted.
    pub last_evaluated: u64,
    #[serde(default)]
    pub interpretation: Option<Interpretation>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub image_id: String,
    pub from: Option<ObservationStatus>,
    pub to: ObservationStatus,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub event_id: String,
    pub text_items_added: usize,
    pub images_confirmed: usize,
    pub images_deferred: usize,
    pub images_rejected: usize,
    pub pending_reevaluated: usize,
    /// Candidate facts refused because their only evidence was a third party's scene.
    pub facts_rejected: usize,
    pub transitions: Vec<Transition>,
}

/// Turns supplied with the image at `image_turn_index`.
pub fn assemble_context(event: &Event, image_turn_index: usize, window: ContextWindow) -> Vec<Turn> {
    match window {
        ContextWindow::FullSession => event.turns.clone(),
        ContextWindow::Turns(n) => {
            let start = image_turn_index.saturating_sub(n);
            let end = (image_turn_index + n + 1).min(event.turns.len());
            event.turns[start.min(end)..end].to_vec()
        }
    }
}

/// Fact line forwarded to text memory.
pub fn verbalize_fact(date: NaiveDate, statement: &str, event_id: &str) -> String {
    format!("As of {date}: {statement} (evidence: {event_id})")
}

pub fn image_id_for(event_id: &str, turn_index: usize) -> String {
    format!("{event_id}/t{turn_index}")
}

/// Everything one persona's engine remembers. Cloned wholesale to make event
/// ingestion atomic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MemoryState {
    pub text: TextMemory,
    pub visual: VisualStore,
    observations: BTreeMap<String, ImageObservation>,
    ingested: Vec<(String, NaiveDate)>,
    verbalized: BTreeSet<String>,
}

impl MemoryState {
    pub fn new(store: StoreConfig) -> Self {
        Self { visual: VisualStore::new(store), ..Self::default() }
    }

    pub fn observations(&self) -> impl Iterator<Item = &ImageObservation> {
        self.observations.values()
    }

    pub fn observation(&self, image_id: &str) -> Option<&ImageObservation> {
        self.observations.get(image_id)
    }

    pub fn pending(&self) -> impl Iterator<Item = &ImageObservation> {
        self.observations.values().filter(|o| o.status == ObservationStatus::Pending)
    }

    pub fn ingested_events(&self) -> impl Iterator<Item = &str> {
        self.ingested.iter().map(|(id, _)| id.as_str())
    }

    pub fn last_event(&self) -> Option<&str> {
        self.ingested.last().map(|(id, _)| id.as_str())
    }

    fn ordinal(&self) -> u64 {
        self.ingested.len() as u64
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EngineMeta {
    format: String,
    version: u32,
    config: PipelineConfig,
    ingested: Vec<(String, NaiveDate)>,
    verbalized: BTreeSet<String>,
    observations: usize,
}

const ENGINE_FORMAT: &str = "visualmem-engine";

#[derive(Clone)]
pub struct Engine {
    config: PipelineConfig,
    gateway: Arc<dyn Gateway>,
    state: MemoryState,
}

impl fmt::Debug for Engine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Engine").field("config", &self.config).field("state", &self.state).finish_non_exhaustive()
    }
}

impl Engine {
    pub fn new(config: PipelineConfig, gateway: Arc<dyn Gateway>) -> Result<Self, PipelineError> {
        config.validate()?;
        Ok(Self { config, gateway, state: MemoryState::new(StoreConfig::default()) })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Arc<dyn Gateway> {
        &self.gateway
    }

    pub fn state(&self) -> &MemoryState {
        &self.state
    }

    pub fn text_memory(&self) -> &TextMemory {
        &self.state.text
    }

    pub fn visual_store(&self) -> &VisualStore {
        &self.state.visual
    }

    /// Ingests one event. On any error the engine is left exactly as before.
    pub fn ingest_event(&mut self, event: &Event) -> Result<IngestReport, PipelineError> {
        event.validate()?;
        if event.turns.is_empty() {
            return Err(PipelineError::InvalidEvent(TurnError::EmptyTurn { turn_index: 0 }));
        }
        if self.state.ingested.iter().any(|(id, _)| id == &event.event_id) {
            return Err(PipelineError::DuplicateEvent(event.event_id.clone()));
        }
        if let Some((_, last)) = self.state.ingested.last() {
            if event.date < *last {
                return Err(PipelineError::OutOfOrder { event_id: event.event_id.clone(), date: event.date, last: *last });
            }
        }

        let mut next = self.state.clone();
        let mut report = IngestReport { event_id: event.event_id.clone(), ..IngestReport::default() };
        next.ingested.push((event.event_id.clone(), event.date));
        let ordinal = next.ordinal();
        let gw = self.gateway.as_ref();

        if self.config.enable_text {
            for turn in &event.turns {
                for seg in turn.segments.iter().filter(|s| !s.is_image()) {
                    let text = format!("{}: {}", turn.role, seg.text);
                    let out = next.text.add_text_memory(&text, TextSource::DialogueTurn, &event.event_id, event.date, gw)?;
                    report.text_items_added += usize::from(out.created);
                }
            }
        }

        if self.config.enable_visual {
            next.visual.record_event(&event.event_id, event.date);
            for turn in &event.turns {
                let Some(seg) = turn.image() else { continue };
                let mut obs = ImageObservation {
                    image_id: image_id_for(&event.event_id, turn.turn_index),
                    event_id: event.event_id.clone(),
                    date: event.date,
                    turn_index: turn.turn_index,
                    visual_prompt: seg.text.clone(),
                    image_path: seg.image_path.clone(),
                    context: assemble_context(event, turn.turn_index, self.config.context_window),
                    status: ObservationStatus::Pending,
                    attempts: 0,
                    last_evaluated: ordinal,
                    interpretation: None,
                };
                let digest = memory_digest(&next.visual);
                let interp = interpret_image(gw, &obs, &digest, false)?;
                let to = self.commit_or_defer(&mut next, &mut obs, interp, &mut report)?;
                match to {
                    ObservationStatus::Confirmed => report.images_confirmed += 1,
                    ObservationStatus::Rejected => report.images_rejected += 1,
                    _ => report.images_deferred += 1,
                }
                report.transitions.push(Transition { image_id: obs.image_id.clone(), from: None, to, attempts: 0 });
                next.observations.insert(obs.image_id.clone(), obs);
            }
            if self.config.enable_pending {
                self.reevaluate_pending(&mut next, ordinal, &mut report);
            }
        }

        self.state = next;
        Ok(report)
    }

    /// Applies an interpretation to an observation, running extraction when it
    /// commits. Returns the new status.
    fn commit_or_defer(
        &self,
        state: &mut MemoryState,
        obs: &mut ImageObservation,
        interp: Interpretation,
        report: &mut IngestReport,
    ) -> Result<ObservationStatus, PipelineError> {
        let decision = effective_decision(&interp, self.config.confirm_confidence_threshold);
        obs.interpretation = Some(interp);
        let status = match decision {
            Decision::Reject => ObservationStatus::Rejected,
            Decision::Defer if self.config.enable_pending => {
                if obs.attempts >= self.config.max_reeval_attempts {
                    ObservationStatus::Stale
                } else {
                    ObservationStatus::Pending
                }
            }
            // Confirm, or Defer with deferral disabled: commit under this reading.
            _ => {
                obs.status = ObservationStatus::Confirmed;
                report.facts_rejected += self.extract_structured(state, obs)?;
                ObservationStatus::Confirmed
            }
        };
        obs.status = status;
        Ok(status)
    }

    /// Re-interprets due pending observations against the current memory.
    /// A gateway or store failure leaves that observation untouched so it is
    /// retried at the next interval.
    fn reevaluate_pending(&self, state: &mut MemoryState, ordinal: u64, report: &mut IngestReport) {
        let due: Vec<String> = state
            .pending()
            .filter(|o| ordinal.saturating_sub(o.last_evaluated) >= self.config.reeval_interval_events)
            .map(|o| o.image_id.clone())
            .collect();
        if due.is_empty() {
            return;
        }
        let digest = memory_digest(&state.visual);
        let gw = self.gateway.as_ref();
        let max = self.config.max_reeval_attempts;

        // Interpretations read one digest snapshot, so they can run side by side.
        let readings: Vec<Option<Result<Interpretation, GatewayError>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = due
                .iter()
                .map(|id| {
                    let obs = state.observations[id].clone();
                    let digest = &digest;
                    scope.spawn(move || {
                        (obs.attempts < max).then(|| {
                            let mut probe = obs;
                            probe.attempts += 1;
                            interpret_image(gw, &probe, digest, true)
                        })
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("interpretation thread panicked")).collect()
        });

        for (id, reading) in due.into_iter().zip(readings) {
            let mut obs = state.observations[&id].clone();
            let from = obs.status;
            let Some(reading) = reading else {
                obs.status = ObservationStatus::Stale;
                report.transitions.push(Transition { image_id: id.clone(), from: Some(from), to: obs.status, attempts: obs.attempts });
                state.observations.insert(id, obs);
                continue;
            };
            let interp = match reading {
                Ok(i) => i,
                Err(err) => {
                    tracing::warn!(image_id = %id, %err, "re-evaluation failed; will retry");
                    continue;
                }
            };
            let mut trial = state.clone();
            let mut trial_report = IngestReport::default();
            obs.attempts += 1;
            obs.last_evaluated = ordinal;
            match self.commit_or_defer(&mut trial, &mut obs, interp, &mut trial_report) {
                Ok(to) => {
                    report.pending_reevaluated += 1;
                    report.facts_rejected += trial_report.facts_rejected;
                    report.transitions.push(Transition { image_id: id.clone(), from: Some(from), to, attempts: obs.attempts });
                    trial.observations.insert(id, obs);
                    *state = trial;
                }
                Err(err) => tracing::warn!(image_id = %id, %err, "re-evaluation commit failed; will retry"),
            }
        }
    }

    /// Writes entities, edges and facts from a confirmed observation and
    /// returns how many facts the store refused on provenance grounds.
    fn extract_structured(&self, state: &mut MemoryState, obs: &ImageObservation) -> Result<usize, PipelineError> {
        debug_assert_eq!(obs.status, ObservationStatus::Confirmed);
        let interp = obs.interpretation.as_ref().expect("confirmed observation carries its interpretation");
        let gw = self.gateway.as_ref();
        let request = GenerationRequest::new(
            SchemaId::Extraction,
            vec![
                Message::system(EXTRACT_INSTRUCTIONS),
                Message::user(vec![
                    image_part(obs),
                    Part::text(render_context(obs)),
                    Part::text(format!(
                        "Interpretation:\n{}",
                        serde_json::to_string(interp).expect("interpretation serializes")
                    )),
                ]),
            ],
        );
        let doc = gw.generate_structured(&request)?;
        let extraction: Extraction = parse_checked(&doc).map_err(|detail| GatewayError::NonConformingOutput {
            schema: SchemaId::Extraction,
            detail,
        })?;

        let store = &mut state.visual;
        store.record_image(&obs.image_id, &obs.event_id, obs.date, interp.scene_owner);
        let evidence = EvidenceRef::image(&obs.event_id, &obs.image_id);

        let mut local: BTreeMap<String, Option<String>> = BTreeMap::new();
        for ent in &extraction.entities {
            let owner = match (interp.scene_owner, ent.owner_relation) {
                (SceneOwner::ThirdParty, _) => OwnerRelation::ThirdParty,
                (_, Some(o)) => o,
                (SceneOwner::SelfUser, None) => OwnerRelation::UserAssociated,
                _ => OwnerRelation::Unknown,
            };
            let embedding = gw.embed(EmbedKind::ImagePrompt, &ent.descriptor)?;
            let outcome = store.upsert_entity(EntityCandidate {
                kind: ent.kind,
                display_name: ent.name.trim().to_string(),
                aliases: ent.aliases.iter().map(|a| a.trim().to_string()).filter(|a| !a.is_empty()).collect(),
                owner_relation: owner,
                visual_refs: vec![VisualRef {
                    image_id: obs.image_id.clone(),
                    embedding,
                    descriptor: ent.descriptor.clone(),
                }],
                seen: obs.date,
            })?;
            let resolved = match outcome {
                UpsertOutcome::Conflict(id) => {
                    tracing::debug!(entity = %id, image_id = %obs.image_id, "owner conflict; entity left unchanged");
                    None
                }
                other => Some(other.entity_id().to_string()),
            };
            local.insert(ent.name.trim().to_lowercase(), resolved);
        }

        let resolve = |name: &str, store: &VisualStore| -> Option<String> {
            match local.get(&name.trim().to_lowercase()) {
                Some(hit) => hit.clone(),
                None => store.resolve_name(name),
            }
        };
        for rel in &extraction.relationships {
            let (Some(s), Some(o)) = (resolve(&rel.subject, store), resolve(&rel.object, store)) else {
                tracing::debug!(?rel, "relationship endpoint unresolved; skipped");
                continue;
            };
            if s == o {
                continue;
            }
            store.add_relationship(RelationshipEdge {
                subject_id: s,
                relation: rel.relation.trim().to_string(),
                object_id: o,
                evidence: vec![evidence.clone()],
            })?;
        }

        let mut refused = 0;
        let mut touched = Vec::new();
        for fact in &extraction.facts {
            let embedding = gw.embed(EmbedKind::Text, &fact.statement)?;
            match store.add_fact(FactCandidate {
                statement: fact.statement.trim().to_string(),
                category: fact.category,
                evidence: vec![evidence.clone()],
                confidence: fact.confidence,
                seen: obs.date,
                embedding,
            }) {
                Ok(id) => touched.push(id),
                Err(StoreError::ThirdPartyEvidence { .. }) => refused += 1,
                Err(e) => return Err(e.into()),
            }
        }
        store.refresh_cards(gw)?;

        if self.config.enable_text {
            for id in touched {
                if state.verbalized.contains(&id) {
                    continue;
                }
                let f = state.visual.fact(&id).expect("fact just stored");
                let text = verbalize_fact(f.first_seen, &f.statement, &f.evidence[0].event_id);
                let event_id = f.evidence[0].event_id.clone();
                let date = f.first_seen;
                state.text.add_text_memory(&text, TextSource::VerbalizedVisualFact, &event_id, date, gw)?;
                state.verbalized.insert(id);
            }
        }
        Ok(refused)
    }

    /// Store audit plus the pipeline's own rule: every piece of image evidence
    /// belongs to a confirmed observation.
    pub fn audit(&self) -> Vec<AuditIssue> {
        let mut issues = self.state.visual.audit();
        let store = &self.state.visual;
        let evidence = store
            .edges()
            .flat_map(|e| e.evidence.iter())
            .chain(store.facts().flat_map(|f| f.evidence.iter()))
            .filter_map(|ev| ev.image_id.clone())
            .chain(store.entities().flat_map(|e| e.visual_refs.iter().map(|r| r.image_id.clone())))
            .collect::<BTreeSet<_>>();
        for image_id in evidence {
            match self.state.observations.get(&image_id) {
                Some(o) if o.status == ObservationStatus::Confirmed => {}
                Some(o) => issues.push(AuditIssue(format!("evidence {image_id} comes from a {:?} observation", o.status))),
                None => issues.push(AuditIssue(format!("evidence {image_id} has no observation"))),
            }
        }
        for o in self.state.observations.values() {
            if o.attempts > self.config.max_reeval_attempts {
                issues.push(AuditIssue(format!("observation {} exceeded the attempt cap", o.image_id)));
            }
            if o.status == ObservationStatus::Confirmed && o.interpretation.is_none() {
                issues.push(AuditIssue(format!("confirmed observation {} lacks an interpretation", o.image_id)));
            }
        }
        issues
    }

    /// Writes the visual store files, `text.jsonl`, `pending.jsonl` (every
    /// observation with its status) and `engine.json`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), PipelineError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.state.visual.save(dir)?;
        self.state.text.save(dir.join("text.jsonl"))?;
        let mut w = BufWriter::new(fs::File::create(dir.join("pending.jsonl"))?);
        for o in self.state.observations.values() {
            serde_json::to_writer(&mut w, o).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let meta = EngineMeta {
            format: ENGINE_FORMAT.to_string(),
            version: 1,
            config: self.config,
            ingested: self.state.ingested.clone(),
            verbalized: self.state.verbalized.clone(),
            observations: self.state.observations.len(),
        };
        let mut body = serde_json::to_string_pretty(&meta).map_err(std::io::Error::from)?;
        body.push('\n');
        fs::write(dir.join("engine.json"), body)?;
        Ok(())
    }

    /// Restores a saved engine. The configuration comes from the caller; a
    /// store written under a different configuration still loads.
    pub fn load(dir: impl AsRef<Path>, config: PipelineConfig, gateway: Arc<dyn Gateway>) -> Result<Self, PipelineError> {
        config.validate()?;
        let dir = dir.as_ref();
        let raw = fs::read_to_string(dir.join("engine.json"))?;
        let meta: EngineMeta =
            serde_json::from_str(&raw).map_err(|e| PipelineError::Corrupt(format!("engine.json: {e}")))?;
        if meta.format != ENGINE_FORMAT || meta.version != 1 {
            return Err(PipelineError::Corrupt(format!("unsupported format {} v{}", meta.format, meta.version)));
        }
        let visual = VisualStore::load(dir)?;
        let text = TextMemory::load(dir.join("text.jsonl"))?;
        let mut observations = BTreeMap::new();
        let reader = BufReader::new(fs::File::open(dir.join("pending.jsonl"))?);
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let o: ImageObservation = serde_json::from_str(&line)
                .map_err(|e| PipelineError::Corrupt(format!("pending.jsonl line {}: {e}", i + 1)))?;
            observations.insert(o.image_id.clone(), o);
        }
        if observations.len() != meta.observations {
            return Err(PipelineError::Corrupt(format!(
                "pending.jsonl holds {} observations, engine.json expects {}",
                observations.len(),
                meta.observations
            )));
        }
        let state = MemoryState { text, visual, observations, ingested: meta.ingested, verbalized: meta.verbalized };
        Ok(Self { config, gateway, state })
    }

    /// Whether a saved engine exists in `dir`.
    pub fn exists(dir: impl AsRef<Path>) -> bool {
        dir.as_ref().join("engine.json").is_file()
    }
}

/// A Confirm reported below the threshold counts as a Defer.
fn effective_decision(interp: &Interpretation, threshold: f64) -> Decision {
    match interp.decision {
        Decision::Confirm if interp.confidence < threshold => Decision::Defer,
        d => d,
    }
}

pub fn memory_digest(store: &VisualStore) -> String {
    store.memory_digest(DIGEST_MAX_ENTITIES, DIGEST_MAX_FACTS, DIGEST_TOKEN_CAP)
}

fn image_part(obs: &ImageObservation) -> Part {
    match &obs.image_path {
        Some(p) if Path::new(p).is_file() => Part::image_path(p.clone()),
        _ => Part::image_prompt(obs.visual_prompt.clone()),
    }
}

fn render_context(obs: &ImageObservation) -> String {
    let mut out = format!("Conversation context (image shared in turn {} on {}):", obs.turn_index, obs.date);
    for t in &obs.context {
        let who = match t.role {
            Role::User => "user",
            Role::Assistant => "assistant",
        };
        out.push_str(&format!("\n[t{}] {}: {}", t.turn_index, who, t.content()));
    }
    out
}

/// One Interpretation call for `obs`.
pub fn interpret_image(
    gateway: &dyn Gateway,
    obs: &ImageObservation,
    digest: &str,
    reevaluation: bool,
) -> Result<Interpretation, GatewayError> {
    let mut parts = vec![
        image_part(obs),
        Part::text(render_context(obs)),
        Part::text(format!("Current memory:\n{}", if digest.is_empty() { "(empty)" } else { digest })),
    ];
    if reevaluation {
        parts.push(Part::text(format!(
            "This image was deferred earlier. Re-evaluation attempt {} in light of the current memory.",
            obs.attempts
        )));
    }
    let request = GenerationRequest::new(
        SchemaId::Interpretation,
        vec![Message::system(INTERPRET_INSTRUCTIONS), Message::user(parts)],
    );
    let doc = gateway.generate_structured(&request)?;
    parse_checked(&doc).map_err(|detail| GatewayError::NonConformingOutput { schema: SchemaId::Interpretation, detail })
}

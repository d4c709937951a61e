//! Ingestion scenarios driven by a gateway whose replies are set per image.

use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};
use visualmem_core::gateway::{hashed_embedding, EmbedKind, Embedder, GenerationRequest, PartKind, SchemaId, SCRIPTED_DIM};
use visualmem_core::pipeline::{ContextWindow, ObservationStatus};
use visualmem_core::visual_store::OwnerRelation;
use visualmem_core::{EmbeddingVector, Engine, Event, EventInput, Gateway, GatewayError, PipelineConfig};

/// Interpretations are queued per visual prompt; once a queue is empty the
/// image is confirmed as the user's own. Extraction always yields one pet
/// named after the prompt's first word and one possession fact.
#[derive(Default)]
struct Programmable {
    readings: Mutex<HashMap<String, VecDeque<Value>>>,
    fail: Mutex<Option<(SchemaId, String)>>,
    calls: Mutex<Vec<(SchemaId, String)>>,
}

impl Programmable {
    fn queue(&self, prompt: &str, readings: impl IntoIterator<Item = Value>) {
        self.readings.lock().unwrap().entry(prompt.into()).or_default().extend(readings);
    }

    fn fail_on(&self, schema: SchemaId, prompt: &str) {
        *self.fail.lock().unwrap() = Some((schema, prompt.into()));
    }

    fn heal(&self) {
        *self.fail.lock().unwrap() = None;
    }

    fn calls(&self, schema: SchemaId, prompt: &str) -> usize {
        self.calls.lock().unwrap().iter().filter(|(s, p)| *s == schema && p == prompt).count()
    }
}

fn reading(owner: &str, confidence: f64, decision: &str) -> Value {
    json!({"scene_owner": owner, "confidence": confidence, "decision": decision})
}

impl Embedder for Programmable {
    fn embed(&self, _: EmbedKind, value: &str) -> Result<EmbeddingVector, GatewayError> {
        Ok(hashed_embedding(value, SCRIPTED_DIM))
    }
}

impl Gateway for Programmable {
    fn generate_structured(&self, request: &GenerationRequest) -> Result<Value, GatewayError> {
        let prompt = request
            .content_parts()
            .find(|p| p.kind == PartKind::ImagePrompt)
            .map(|p| p.value.clone())
            .unwrap_or_default();
        self.calls.lock().unwrap().push((request.schema, prompt.clone()));
        if let Some((schema, p)) = &*self.fail.lock().unwrap() {
            if *schema == request.schema && *p == prompt {
                return Err(GatewayError::Transport("injected".into()));
            }
        }
        match request.schema {
            SchemaId::Interpretation => Ok(self
                .readings
                .lock()
                .unwrap()
                .get_mut(&prompt)
                .and_then(VecDeque::pop_front)
                .unwrap_or_else(|| reading("self_user", 0.9, "confirm"))),
            SchemaId::Extraction => {
                let name = prompt.split_whitespace().next().unwrap_or("thing").to_string();
                Ok(json!({
                    "entities": [{"name": name, "kind": "pet", "descriptor": prompt}],
                    "relationships": [{"subject": "user", "relation": "owns", "object": name}],
                    "facts": [{"statement": format!("The user has a pet called {name}"), "category": "possession", "confidence": 0.9}]
                }))
            }
            other => Err(GatewayError::InvalidRequest(format!("unexpected {other}"))),
        }
    }
}

fn event(id: &str, day: u32, lines: &[&str]) -> Event {
    let turns: Vec<Value> = lines
        .iter()
        .enumerate()
        .map(|(i, l)| json!({"role": if i % 2 == 0 { "user" } else { "assistant" }, "content": l}))
        .collect();
    let input: EventInput =
        serde_json::from_value(json!({"event_id": id, "date": format!("2024-03-{day:02}"), "turns": turns})).unwrap();
    input.into_event().unwrap()
}

fn chatter(id: &str, day: u32) -> Event {
    event(id, day, &["Busy day at work.", "Hope it calms down soon."])
}

const BISCUIT: &str = "Biscuit a small brown dog asleep on a couch";

fn image_event(id: &str, day: u32, prompt: &str) -> Event {
    event(id, day, &["Look at this!", "Cute!", &format!("<image> {prompt} </image> My friend sent me this."), "Nice."])
}

fn engine(gw: &Arc<Programmable>, config: PipelineConfig) -> Engine {
    Engine::new(config, gw.clone()).unwrap()
}

fn pending_config() -> PipelineConfig {
    PipelineConfig { reeval_interval_events: 1, max_reeval_attempts: 3, ..PipelineConfig::default() }
}

#[test]
fn deferred_image_is_confirmed_on_reevaluation() {
    let gw = Arc::new(Programmable::default());
    gw.queue(BISCUIT, [reading("unknown", 0.3, "defer")]);
    let mut e = engine(&gw, pending_config());

    let r = e.ingest_event(&image_event("e1", 1, BISCUIT)).unwrap();
    assert_eq!((r.images_deferred, r.images_confirmed), (1, 0));
    assert_eq!(e.visual_store().entities().count(), 0);
    assert_eq!(e.state().pending().count(), 1);

    let r = e.ingest_event(&chatter("e2", 2)).unwrap();
    assert_eq!(r.pending_reevaluated, 1);
    let t = &r.transitions[0];
    assert_eq!((t.from, t.to, t.attempts), (Some(ObservationStatus::Pending), ObservationStatus::Confirmed, 1));
    assert_eq!(gw.calls(SchemaId::Extraction, BISCUIT), 1);

    let pet = e.visual_store().entities().next().unwrap();
    assert_eq!(pet.display_name, "Biscuit");
    assert_eq!(pet.owner_relation, OwnerRelation::UserAssociated);
    let verbalized = e.text_memory().items().iter().filter(|i| i.text.contains("pet called Biscuit")).count();
    assert_eq!(verbalized, 1);
    assert!(e.audit().is_empty(), "{:?}", e.audit());

    // Confirmed observations are never interpreted again.
    e.ingest_event(&chatter("e3", 3)).unwrap();
    assert_eq!(gw.calls(SchemaId::Interpretation, BISCUIT), 2);
}

#[test]
fn repeated_deferral_goes_stale_at_the_attempt_cap() {
    let gw = Arc::new(Programmable::default());
    gw.queue(BISCUIT, std::iter::repeat_n(reading("unknown", 0.3, "defer"), 10));
    let mut e = engine(&gw, PipelineConfig { max_reeval_attempts: 2, ..pending_config() });
    e.ingest_event(&image_event("e1", 1, BISCUIT)).unwrap();
    for day in 2..8 {
        e.ingest_event(&chatter(&format!("e{day}"), day)).unwrap();
    }
    let obs = e.state().observations().next().unwrap();
    assert_eq!(obs.status, ObservationStatus::Stale);
    assert_eq!(obs.attempts, 2);
    // One initial reading plus two re-evaluations, then nothing more.
    assert_eq!(gw.calls(SchemaId::Interpretation, BISCUIT), 3);
    assert_eq!(e.visual_store().entities().count(), 0);
}

#[test]
fn reevaluation_waits_for_the_interval() {
    let gw = Arc::new(Programmable::default());
    gw.queue(BISCUIT, [reading("unknown", 0.3, "defer")]);
    let mut e = engine(&gw, PipelineConfig { reeval_interval_events: 3, ..pending_config() });
    e.ingest_event(&image_event("e1", 1, BISCUIT)).unwrap();
    assert_eq!(e.ingest_event(&chatter("e2", 2)).unwrap().pending_reevaluated, 0);
    assert_eq!(e.ingest_event(&chatter("e3", 3)).unwrap().pending_reevaluated, 0);
    assert_eq!(e.ingest_event(&chatter("e4", 4)).unwrap().pending_reevaluated, 1);
}

#[test]
fn low_confidence_confirm_waits_and_deferral_commits_without_pending() {
    let gw = Arc::new(Programmable::default());
    gw.queue(BISCUIT, [reading("self_user", 0.5, "confirm")]);
    let mut e = engine(&gw, PipelineConfig { confirm_confidence_threshold: 0.6, ..pending_config() });
    assert_eq!(e.ingest_event(&image_event("e1", 1, BISCUIT)).unwrap().images_deferred, 1);

    let gw = Arc::new(Programmable::default());
    gw.queue(BISCUIT, [reading("unknown", 0.3, "defer")]);
    let mut e = engine(&gw, PipelineConfig { enable_pending: false, ..pending_config() });
    let r = e.ingest_event(&image_event("e1", 1, BISCUIT)).unwrap();
    assert_eq!((r.images_confirmed, r.images_deferred), (1, 0));
    assert_eq!(e.visual_store().entities().count(), 1);
}

#[test]
fn third_party_scenes_keep_entities_but_refuse_facts() {
    let gw = Arc::new(Programmable::default());
    gw.queue(BISCUIT, [reading("third_party", 0.95, "confirm")]);
    let mut e = engine(&gw, pending_config());
    let r = e.ingest_event(&image_event("e1", 1, BISCUIT)).unwrap();
    assert_eq!((r.images_confirmed, r.facts_rejected), (1, 1));
    assert_eq!(e.visual_store().facts().count(), 0);
    assert_eq!(e.visual_store().entities().next().unwrap().owner_relation, OwnerRelation::ThirdParty);

    let gw = Arc::new(Programmable::default());
    gw.queue(BISCUIT, [reading("third_party", 0.95, "reject")]);
    let mut e = engine(&gw, pending_config());
    assert_eq!(e.ingest_event(&image_event("e1", 1, BISCUIT)).unwrap().images_rejected, 1);
    assert_eq!(gw.calls(SchemaId::Extraction, BISCUIT), 0);
}

#[test]
fn failed_ingest_leaves_the_engine_untouched() {
    let gw = Arc::new(Programmable::default());
    let mut e = engine(&gw, pending_config());
    e.ingest_event(&chatter("e1", 1)).unwrap();
    let before = e.state().clone();

    gw.fail_on(SchemaId::Extraction, BISCUIT);
    let err = e.ingest_event(&image_event("e2", 2, BISCUIT)).unwrap_err();
    assert!(err.to_string().contains("injected"), "{err}");
    assert_eq!(e.state(), &before);

    // The same event goes through once the gateway recovers.
    gw.heal();
    assert_eq!(e.ingest_event(&image_event("e2", 2, BISCUIT)).unwrap().images_confirmed, 1);
}

#[test]
fn reevaluation_failure_skips_only_that_image() {
    let gw = Arc::new(Programmable::default());
    gw.queue(BISCUIT, [reading("unknown", 0.3, "defer")]);
    let mut e = engine(&gw, pending_config());
    e.ingest_event(&image_event("e1", 1, BISCUIT)).unwrap();

    gw.fail_on(SchemaId::Interpretation, BISCUIT);
    let r = e.ingest_event(&chatter("e2", 2)).unwrap();
    assert_eq!(r.pending_reevaluated, 0);
    let obs = e.state().observations().next().unwrap();
    assert_eq!((obs.status, obs.attempts), (ObservationStatus::Pending, 0));

    gw.heal();
    let r = e.ingest_event(&chatter("e3", 3)).unwrap();
    assert_eq!(r.pending_reevaluated, 1);
    assert_eq!(e.state().observations().next().unwrap().status, ObservationStatus::Confirmed);
}

#[test]
fn disabled_stores_stay_empty() {
    let gw = Arc::new(Programmable::default());
    let mut e = engine(&gw, PipelineConfig { enable_text: false, ..pending_config() });
    let r = e.ingest_event(&image_event("e1", 1, BISCUIT)).unwrap();
    assert_eq!((r.text_items_added, r.images_confirmed), (0, 1));
    assert!(e.text_memory().is_empty());

    let mut e = engine(&gw, PipelineConfig { enable_visual: false, ..pending_config() });
    let r = e.ingest_event(&image_event("e1", 1, BISCUIT)).unwrap();
    assert!(r.text_items_added > 0);
    assert_eq!(e.state().observations().count(), 0);
    assert!(e.visual_store().is_empty());
}

#[test]
fn context_window_limits_what_interpretation_sees() {
    let gw = Arc::new(Programmable::default());
    let mut e = engine(&gw, PipelineConfig { context_window: ContextWindow::Turns(1), ..pending_config() });
    e.ingest_event(&image_event("e1", 1, BISCUIT)).unwrap();
    let ctx: Vec<usize> = e.state().observations().next().unwrap().context.iter().map(|t| t.turn_index).collect();
    assert_eq!(ctx, vec![1, 2, 3]);
}

#[test]
fn duplicates_and_reordering_are_refused() {
    let gw = Arc::new(Programmable::default());
    let mut e = engine(&gw, pending_config());
    e.ingest_event(&chatter("e2", 5)).unwrap();
    let before = e.state().clone();
    assert!(e.ingest_event(&chatter("e2", 6)).is_err());
    assert!(e.ingest_event(&chatter("e1", 4)).is_err());
    assert_eq!(e.state(), &before);
    // Same day is fine.
    e.ingest_event(&chatter("e3", 5)).unwrap();
}

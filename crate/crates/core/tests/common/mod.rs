#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use chrono::{Days, NaiveDate};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use visualmem_core::eval::{load_benchmark, LoadedBenchmark};
use visualmem_core::gateway::schema::SchemaId;
use visualmem_core::gateway::{
    hashed_embedding, EmbedKind, Embedder, EmbeddingVector, Gateway, GatewayError, GenerationRequest, PartKind,
    ScriptedGateway, SCRIPTED_DIM,
};
use visualmem_core::text_memory::{TextMemory, TextSource};
use visualmem_core::visual_store::{
    EntityCandidate, EntityKind, EvidenceRef, FactCandidate, FactCategory, OwnerRelation, RelationshipEdge,
    StoreConfig, VisualRef, VisualStore,
};
use visualmem_core::Event;

pub fn fixtures_dir() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/../../fixtures"))
}

pub fn benchmark() -> LoadedBenchmark {
    load_benchmark(fixtures_dir().join("benchmark")).expect("bundled benchmark loads")
}

pub fn scripted() -> Arc<dyn Gateway> {
    Arc::new(ScriptedGateway::load(fixtures_dir().join("gateway.json")).expect("bundled gateway fixtures load"))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rng_for(seed: u64, key: &str) -> ChaCha8Rng {
    let digest = Sha256::digest(format!("{seed}:{key}").as_bytes());
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(s)
}

/// Model that answers every structured call with a random but well-formed
/// document (a function of the seed and the request), and optionally fails
/// a random fraction of calls.
pub struct RandomGateway {
    seed: u64,
    fail_prob: f64,
    failures: Mutex<ChaCha8Rng>,
    pub injected: AtomicU64,
}

impl RandomGateway {
    pub fn new(seed: u64, fail_prob: f64) -> Self {
        Self { seed, fail_prob, failures: Mutex::new(rng(seed ^ 0x5eed)), injected: AtomicU64::new(0) }
    }
}

const OWNERS: [&str; 4] = ["self_user", "third_party", "public", "unknown"];
const RELATIONS: [&str; 4] = ["self_user", "user_associated", "third_party", "unknown"];
const KINDS: [&str; 3] = ["person", "asset", "pet"];
const FACT_CATEGORIES: [FactCategory; 6] = [
    FactCategory::Possession,
    FactCategory::Habit,
    FactCategory::Health,
    FactCategory::Relationship,
    FactCategory::Environment,
    FactCategory::Other,
];
const CATEGORIES: [&str; 6] = ["possession", "habit", "health", "relationship", "environment", "other"];

fn pick<'a>(r: &mut ChaCha8Rng, xs: &[&'a str]) -> &'a str {
    xs[r.random_range(0..xs.len())]
}

impl Embedder for RandomGateway {
    fn embed(&self, _kind: EmbedKind, value: &str) -> Result<EmbeddingVector, GatewayError> {
        Ok(hashed_embedding(value, SCRIPTED_DIM))
    }
}

impl Gateway for RandomGateway {
    fn generate_structured(&self, req: &GenerationRequest) -> Result<Value, GatewayError> {
        if self.fail_prob > 0.0 && self.failures.lock().unwrap().random_bool(self.fail_prob) {
            self.injected.fetch_add(1, Ordering::Relaxed);
            return Err(GatewayError::Transport("injected failure".into()));
        }
        let prompt = req
            .content_parts()
            .find(|p| p.kind == PartKind::ImagePrompt)
            .map(|p| p.value.clone())
            .unwrap_or_default();
        let mut r = rng_for(self.seed, &req.fingerprint());
        // A few stock descriptors so that separate images can land on one entity.
        let descriptor = if r.random_bool(0.5) { format!("stock look {}", r.random_range(0..4)) } else { prompt.clone() };
        Ok(match req.schema {
            SchemaId::Interpretation => json!({
                "scene_owner": pick(&mut r, &OWNERS),
                "present_entities": [{"kind": pick(&mut r, &KINDS), "name_hint": null, "descriptor": descriptor}],
                "candidate_facts": [],
                "confidence": r.random_range(0.0..1.0),
                "decision": pick(&mut r, &["confirm", "defer", "reject"]),
            }),
            SchemaId::Extraction => {
                let name = format!("thing {}", r.random_range(0..6));
                json!({
                    "entities": [{
                        "name": name, "kind": pick(&mut r, &KINDS), "aliases": [],
                        "owner_relation": if r.random_bool(0.3) { Value::Null } else { json!(pick(&mut r, &RELATIONS)) },
                        "descriptor": descriptor,
                    }],
                    "relationships": [{"subject": "user", "relation": "knows", "object": name}],
                    "facts": [{"statement": format!("The user is near {prompt}"), "category": pick(&mut r, &CATEGORIES),
                               "confidence": r.random_range(0.0..1.0)}],
                })
            }
            SchemaId::McqAnswer => json!({"choice": pick(&mut r, &["A", "B", "C", "D"]), "rationale": "random"}),
            SchemaId::RouteDecision => json!({"route": pick(&mut r, &["visual_only", "text_only", "both"])}),
        })
    }
}

/// Every fixture event from both personas, shuffled, optionally thinned, with
/// ids made unique and dates re-assigned so the order is chronological.
pub fn shuffled_events(bench: &LoadedBenchmark, r: &mut ChaCha8Rng) -> Vec<Event> {
    let mut events: Vec<Event> = bench
        .personas
        .iter()
        .flat_map(|p| {
            p.events.iter().map(move |e| Event { event_id: format!("{}-{}", p.persona_id, e.event_id), ..e.clone() })
        })
        .filter(|_| r.random_bool(0.8))
        .collect();
    events.shuffle(r);
    let start = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap();
    let mut day = 0u64;
    for e in &mut events {
        day += r.random_range(0..3);
        e.date = start + Days::new(day);
    }
    events
}

pub fn random_unit(r: &mut ChaCha8Rng, dim: usize) -> EmbeddingVector {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
        if v.iter().any(|x| x.abs() > 1e-3) {
            return EmbeddingVector::new(v).unwrap().normalized();
        }
    }
}

/// `base` nudged by noise of the given size.
pub fn perturb(r: &mut ChaCha8Rng, base: &EmbeddingVector, noise: f64) -> EmbeddingVector {
    let v: Vec<f64> = base.values().iter().map(|x| x + r.random_range(-noise..noise)).collect();
    EmbeddingVector::new(v).unwrap().normalized()
}

pub fn date(r: &mut ChaCha8Rng) -> NaiveDate {
    NaiveDate::from_ymd_opt(2024, 1, 1).unwrap() + Days::new(r.random_range(0..300))
}

pub fn random_text_memory(r: &mut ChaCha8Rng, n: usize, dim: usize) -> TextMemory {
    let mut mem = TextMemory::new();
    let pool: Vec<EmbeddingVector> = (0..4).map(|_| random_unit(r, dim)).collect();
    for i in 0..n {
        // Occasional exact duplicates exercise tie-breaking.
        let e = if r.random_bool(0.2) { pool[r.random_range(0..pool.len())].clone() } else { random_unit(r, dim) };
        let source = if r.random_bool(0.5) { TextSource::DialogueTurn } else { TextSource::VerbalizedVisualFact };
        mem.insert(&format!("item {i} {}", r.random_range(0..1000)), source, &format!("e{}", i % 7), date(r), e)
            .unwrap();
    }
    mem
}

/// A store built only through the public API with text-derived embeddings,
/// so free-text lookup and cards agree with the hashed embedder.
pub fn random_store(r: &mut ChaCha8Rng, entities: usize, facts: usize) -> VisualStore {
    let embedder = ScriptedGateway::new();
    let mut store = VisualStore::new(StoreConfig::default());
    let words = ["red", "blue", "cat", "dog", "laptop", "mug", "beard", "kayak", "scarf", "garden", "desk", "lake"];
    let phrase = |r: &mut ChaCha8Rng| -> String {
        (0..r.random_range(2..5)).map(|_| words[r.random_range(0..words.len())]).collect::<Vec<_>>().join(" ")
    };
    let mut ids = Vec::new();
    for i in 0..entities {
        let event = format!("e{:03}", i);
        let image = format!("{event}/t0");
        let owner = [
            visualmem_core::gateway::schema::SceneOwner::SelfUser,
            visualmem_core::gateway::schema::SceneOwner::ThirdParty,
            visualmem_core::gateway::schema::SceneOwner::Unknown,
        ][r.random_range(0..3)];
        let d = date(r);
        store.record_event(&event, d);
        store.record_image(&image, &event, d, owner);
        let descriptor = phrase(r);
        let cand = EntityCandidate {
            kind: [EntityKind::Person, EntityKind::Asset, EntityKind::Pet][r.random_range(0..3)],
            display_name: format!("name{}", r.random_range(0..entities.max(1) * 2)),
            aliases: BTreeSet::from([format!("alias{}", r.random_range(0..5))]),
            owner_relation: [OwnerRelation::SelfUser, OwnerRelation::UserAssociated, OwnerRelation::ThirdParty, OwnerRelation::Unknown]
                [r.random_range(0..4)],
            visual_refs: vec![VisualRef {
                image_id: image.clone(),
                embedding: embedder.embed(EmbedKind::ImagePrompt, &descriptor).unwrap(),
                descriptor,
            }],
            seen: d,
        };
        let id = store.upsert_entity(cand).unwrap().entity_id().to_string();
        ids.push((id, event, image));
    }
    for (i, (id, event, image)) in ids.iter().enumerate() {
        if r.random_bool(0.5) {
            let object = if i > 0 && r.random_bool(0.5) { ids[r.random_range(0..i)].0.clone() } else { "user".into() };
            if &object != id {
                let edge = RelationshipEdge {
                    subject_id: id.clone(),
                    relation: ["knows", "owns", "sibling_of"][r.random_range(0..3)].into(),
                    object_id: object,
                    evidence: vec![EvidenceRef::image(event, image)],
                };
                store.add_relationship(edge).unwrap();
            }
        }
    }
    for i in 0..facts {
        let statement = format!("The user {} {}", ["likes", "owns", "visits"][r.random_range(0..3)], phrase(r));
        let ev = if ids.is_empty() || r.random_bool(0.3) {
            EvidenceRef::turn(format!("e{:03}", i), r.random_range(0..6))
        } else {
            let (_, event, image) = &ids[r.random_range(0..ids.len())];
            EvidenceRef::image(event, image)
        };
        let cand = FactCandidate {
            embedding: embedder.embed(EmbedKind::Text, &statement).unwrap(),
            statement,
            category: FACT_CATEGORIES[r.random_range(0..FACT_CATEGORIES.len())],
            evidence: vec![ev],
            confidence: r.random_range(0.0..=1.0),
            seen: date(r),
        };
        // Third-party-only evidence is refused by design; that is fine here.
        let _ = store.add_fact(cand);
    }
    store.refresh_cards(&embedder).unwrap();
    store
}

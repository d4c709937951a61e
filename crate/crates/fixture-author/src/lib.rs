//! Authoring side of the replay fixtures.
//!
//! [`SimulatedModel`] is a deterministic stand-in for a multimodal model. Its
//! behaviour lives in `script.json`: per image, a list of readings guarded by
//! what the context and memory digest mention; per question, rules over the
//! memory items it is shown. Running every evaluation setting through a
//! [`RecordingGateway`] wrapped around it yields the fixture set the scripted
//! backend replays.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use visualmem_core::eval::{self, BenchmarkPersona, ReferenceMode};
use visualmem_core::gateway::schema::{Extraction, Interpretation};
use visualmem_core::gateway::{
    hashed_embedding, EmbedKind, Embedder, EmbeddingVector, Fixture, Gateway, GatewayError, GenerationRequest,
    PartKind, RecordingGateway, SchemaId, SCRIPTED_DIM,
};
use visualmem_core::TokenBudget;

pub fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn script_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("script.json")
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct When {
    #[serde(default)]
    pub context_contains: Vec<String>,
    #[serde(default)]
    pub digest_contains: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reading {
    #[serde(default)]
    pub when: When,
    pub interpretation: Interpretation,
    #[serde(default)]
    pub extraction: Extraction,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageScript {
    pub prompt: String,
    pub readings: Vec<Reading>,
}

/// Substring test over what the answering model is shown. `item` needs all
/// strings inside one memory item, `bundle` anywhere in the memory.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    Item(Vec<String>),
    Bundle(Vec<String>),
}

impl Rule {
    fn holds(&self, items: &[&str]) -> bool {
        match self {
            Rule::Item(needles) => items.iter().any(|it| needles.iter().all(|n| it.contains(n.as_str()))),
            Rule::Bundle(needles) => needles.iter().all(|n| items.iter().any(|it| it.contains(n.as_str()))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Misleading {
    pub when: Rule,
    #[serde(default)]
    pub unless: Option<Rule>,
    pub answer: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionScript {
    pub question: String,
    pub answer: String,
    pub fallback: String,
    #[serde(default)]
    pub misleading: Vec<Misleading>,
    pub support: Vec<Rule>,
}

impl QuestionScript {
    /// Misleading evidence wins over support; with neither the model guesses.
    pub fn decide(&self, items: &[&str]) -> (&str, &'static str) {
        for m in &self.misleading {
            if m.when.holds(items) && !m.unless.as_ref().is_some_and(|u| u.holds(items)) {
                return (&m.answer, "misled by memory");
            }
        }
        if self.support.iter().any(|r| r.holds(items)) {
            return (&self.answer, "supported by memory");
        }
        (&self.fallback, "guess")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    pub images: Vec<ImageScript>,
    pub questions: Vec<QuestionScript>,
}

impl Script {
    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&raw).with_context(|| format!("parsing {}", path.display()))
    }
}

pub struct SimulatedModel {
    script: Script,
}

fn miss(what: impl Into<String>) -> GatewayError {
    GatewayError::Fixture(what.into())
}

fn text_with_prefix<'a>(req: &'a GenerationRequest, prefix: &str) -> Option<&'a str> {
    req.content_parts().find(|p| p.kind == PartKind::Text && p.value.starts_with(prefix)).map(|p| p.value.as_str())
}

fn lower_contains(hay: &str, needles: &[String]) -> bool {
    let hay = hay.to_lowercase();
    needles.iter().all(|n| hay.contains(&n.to_lowercase()))
}

impl SimulatedModel {
    pub fn new(script: Script) -> Self {
        Self { script }
    }

    fn image(&self, req: &GenerationRequest) -> Result<&ImageScript, GatewayError> {
        let prompt = req
            .content_parts()
            .find(|p| p.kind == PartKind::ImagePrompt)
            .ok_or_else(|| miss("simulated model only reads image surrogates"))?;
        self.script
            .images
            .iter()
            .find(|i| i.prompt == prompt.value)
            .ok_or_else(|| miss(format!("no script for image {:?}", prompt.value)))
    }

    fn interpret(&self, req: &GenerationRequest) -> Result<Value, GatewayError> {
        let image = self.image(req)?;
        let context = text_with_prefix(req, "Conversation context").unwrap_or("");
        let digest = text_with_prefix(req, "Current memory:").unwrap_or("");
        let reading = image
            .readings
            .iter()
            .find(|r| lower_contains(context, &r.when.context_contains) && lower_contains(digest, &r.when.digest_contains))
            .ok_or_else(|| miss(format!("no reading applies to {:?}", image.prompt)))?;
        Ok(serde_json::to_value(&reading.interpretation).expect("interpretation serializes"))
    }

    fn extract(&self, req: &GenerationRequest) -> Result<Value, GatewayError> {
        let image = self.image(req)?;
        let raw = text_with_prefix(req, "Interpretation:\n").ok_or_else(|| miss("extraction without interpretation"))?;
        let interp: Interpretation = serde_json::from_str(&raw["Interpretation:\n".len()..])
            .map_err(|e| miss(format!("bad interpretation in request: {e}")))?;
        let reading = image
            .readings
            .iter()
            .find(|r| r.interpretation == interp)
            .ok_or_else(|| miss(format!("interpretation not from script for {:?}", image.prompt)))?;
        Ok(serde_json::to_value(&reading.extraction).expect("extraction serializes"))
    }

    fn answer(&self, req: &GenerationRequest) -> Result<Value, GatewayError> {
        let question = text_with_prefix(req, "Question: ").ok_or_else(|| miss("answer request without question"))?;
        let question = &question["Question: ".len()..];
        let script = self
            .script
            .questions
            .iter()
            .find(|q| q.question == question)
            .ok_or_else(|| miss(format!("no script for question {question:?}")))?;
        let items: Vec<&str> = req
            .content_parts()
            .filter(|p| p.kind == PartKind::Text && p.value.starts_with("Memory item "))
            .map(|p| p.value.split_once("): ").map_or(p.value.as_str(), |(_, t)| t))
            .collect();
        let (choice, why) = script.decide(&items);
        Ok(json!({ "choice": choice, "rationale": why }))
    }
}

impl Embedder for SimulatedModel {
    fn embed(&self, _kind: EmbedKind, value: &str) -> Result<EmbeddingVector, GatewayError> {
        if value.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("empty embedding input".into()));
        }
        Ok(hashed_embedding(value, SCRIPTED_DIM))
    }
}

impl Gateway for SimulatedModel {
    fn generate_structured(&self, req: &GenerationRequest) -> Result<Value, GatewayError> {
        req.validate()?;
        match req.schema {
            SchemaId::Interpretation => self.interpret(req),
            SchemaId::Extraction => self.extract(req),
            SchemaId::McqAnswer => self.answer(req),
            SchemaId::RouteDecision => Err(miss("simulated model does not route")),
        }
    }
}

/// Runs every system preset and both reference settings through a recorder
/// and returns the fixtures sorted by match key.
pub fn record_fixtures(personas: &[BenchmarkPersona], script: Script) -> anyhow::Result<Vec<Fixture>> {
    let recorder = Arc::new(RecordingGateway::new(Arc::new(SimulatedModel::new(script))));
    let gw: Arc<dyn Gateway> = recorder.clone();
    for config in eval::presets() {
        let report = eval::run_system_eval(personas, &config, gw.clone())
            .with_context(|| format!("recording {}", config.name))?;
        if let Some(r) = report.records.iter().find(|r| r.error_flag) {
            bail!("{}: answering {} failed under {}", r.persona_id, r.question_id, config.name);
        }
    }
    for mode in [ReferenceMode::FullContext, ReferenceMode::Oracle] {
        let report = eval::run_reference(personas, mode, TokenBudget::default(), gw.clone())
            .with_context(|| format!("recording {mode}"))?;
        if let Some(r) = report.records.iter().find(|r| r.error_flag) {
            bail!("{}: answering {} failed under {mode}", r.persona_id, r.question_id);
        }
    }
    Ok(recorder.fixtures())
}

pub fn render_fixtures(fixtures: &[Fixture]) -> String {
    let mut out = serde_json::to_string_pretty(fixtures).expect("fixtures serialize");
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn q(misleading: Vec<Misleading>, support: Vec<Rule>) -> QuestionScript {
        QuestionScript { question: "q".into(), answer: "B".into(), fallback: "C".into(), misleading, support }
    }

    fn v(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn item_rule_needs_one_item_bundle_rule_does_not() {
        let items = ["red beard", "Liam"];
        assert!(!Rule::Item(v(&["red beard", "Liam"])).holds(&items));
        assert!(Rule::Bundle(v(&["red beard", "Liam"])).holds(&items));
        assert!(Rule::Item(v(&["red"])).holds(&items));
    }

    #[test]
    fn misleading_beats_support_unless_countered() {
        let script = q(
            vec![Misleading { when: Rule::Item(v(&["hilly"])), unless: Some(Rule::Bundle(v(&["no hills"]))), answer: "A".into() }],
            vec![Rule::Item(v(&["flat"]))],
        );
        assert_eq!(script.decide(&["runs hilly trails", "flat path"]).0, "A");
        assert_eq!(script.decide(&["runs hilly trails", "flat path", "no hills"]).0, "B");
        assert_eq!(script.decide(&[]).0, "C");
    }
}

//! Benchmark harness: load personas, replay their events through a memory
//! system (or a reference setting), answer each question at its point in the
//! timeline, and score per-category accuracy and tokens.

mod loader;
mod report;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::conversation::{Event, TokenBudget};
use crate::gateway::Gateway;
use crate::pipeline::{ContextWindow, Engine, PipelineConfig, PipelineError};
use crate::query::{answer_mcq, BundleItem, ChoiceKey, Origin, Query, QueryError, RetrievalBundle, Route};

pub use loader::{load_benchmark, load_persona, BenchmarkManifest, LoadError, LoadedBenchmark, PersonaCounts};
pub use report::{render_report, ReportFormat};

pub const ASSUMPTIONS: [&str; 2] = [
    "questions without an explicit position are asked after the persona's final event",
    "image paths are given to the answering model as opaque text; image options also carry the image or its surrogate description",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionCategory {
    TargetPerson,
    TargetAsset,
    ImplicitVisual,
    ImplicitMultimodal,
}

impl QuestionCategory {
    pub const ALL: [QuestionCategory; 4] = [
        QuestionCategory::TargetPerson,
        QuestionCategory::TargetAsset,
        QuestionCategory::ImplicitVisual,
        QuestionCategory::ImplicitMultimodal,
    ];

    pub fn label(self) -> &'static str {
        match self {
            QuestionCategory::TargetPerson => "Target Person",
            QuestionCategory::TargetAsset => "Target Asset",
            QuestionCategory::ImplicitVisual => "Implicit Visual",
            QuestionCategory::ImplicitMultimodal => "Implicit Multimodal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OracleRef {
    pub event_id: String,
    /// Whole event when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionItem {
    pub question_id: String,
    pub category: QuestionCategory,
    pub query: Query,
    pub ground_truth: ChoiceKey,
    pub asked_after_event: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkPersona {
    pub persona_id: String,
    pub profile: Value,
    pub events: Vec<Event>,
    pub questions: Vec<QuestionItem>,
    pub oracle_evidence: BTreeMap<String, Vec<OracleRef>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub name: String,
    pub pipeline: PipelineConfig,
    pub budget: TokenBudget,
}

impl SystemConfig {
    pub fn new(name: impl Into<String>, pipeline: PipelineConfig) -> Self {
        Self { name: name.into(), pipeline, budget: TokenBudget::default() }
    }
}

/// The ablation rows, in table order, ending with the default configuration.
pub fn presets() -> Vec<SystemConfig> {
    let row = |name: &str, text: bool, visual: bool, pending: bool, window: ContextWindow| {
        SystemConfig::new(
            name,
            PipelineConfig {
                enable_text: text,
                enable_visual: visual,
                enable_pending: pending,
                context_window: window,
                ..PipelineConfig::default()
            },
        )
    };
    let two = ContextWindow::Turns(2);
    vec![
        row("text+visual, no pending, window 2", true, true, false, two),
        row("text only, window 2", true, false, true, two),
        row("visual only, window 2", false, true, true, two),
        row("text+visual+pending, window 2", true, true, true, two),
        row("text+visual+pending, full session", true, true, true, ContextWindow::FullSession),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceMode {
    FullContext,
    Oracle,
}

impl fmt::Display for ReferenceMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReferenceMode::FullContext => "Full context",
            ReferenceMode::Oracle => "Oracle",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Setting {
    System { pipeline: PipelineConfig, budget: TokenBudget },
    Reference { mode: ReferenceMode, budget: TokenBudget },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Score {
    pub correct: usize,
    pub total: usize,
}

impl Score {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }

    fn add(&mut self, correct: bool) {
        self.total += 1;
        self.correct += usize::from(correct);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub persona_id: String,
    pub question_id: String,
    pub category: QuestionCategory,
    pub route: Option<Route>,
    pub choice: Option<ChoiceKey>,
    pub ground_truth: ChoiceKey,
    pub correct: bool,
    pub tokens: u64,
    pub error_flag: bool,
    /// Last event ingested when the question was answered.
    pub as_of_event: String,
    pub within_budget: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaSummary {
    pub persona_id: String,
    pub score: Score,
    pub mean_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub config_fingerprint: String,
    pub setting: Setting,
    pub categories: BTreeMap<QuestionCategory, Score>,
    pub overall: Score,
    pub mean_tokens: f64,
    pub personas: Vec<PersonaSummary>,
    pub records: Vec<AnswerRecord>,
    pub assumptions: Vec<String>,
}

impl EvalReport {
    fn build(name: String, setting: Setting, mut records: Vec<AnswerRecord>) -> Self {
        records.sort_by(|a, b| a.persona_id.cmp(&b.persona_id));
        let mut categories: BTreeMap<QuestionCategory, Score> =
            QuestionCategory::ALL.iter().map(|c| (*c, Score::default())).collect();
        let mut overall = Score::default();
        let mut per_persona: BTreeMap<&str, (Score, u64)> = BTreeMap::new();
        for r in &records {
            categories.get_mut(&r.category).expect("all categories present").add(r.correct);
            overall.add(r.correct);
            let slot = per_persona.entry(&r.persona_id).or_default();
            slot.0.add(r.correct);
            slot.1 += r.tokens;
        }
        let mean = |tokens: u64, n: usize| if n == 0 { 0.0 } else { tokens as f64 / n as f64 };
        let personas = per_persona
            .into_iter()
            .map(|(id, (score, tokens))| PersonaSummary {
                persona_id: id.to_string(),
                score,
                mean_tokens: mean(tokens, score.total),
            })
            .collect();
        let mean_tokens = mean(records.iter().map(|r| r.tokens).sum(), records.len());
        let fingerprint = {
            let canonical = serde_json::to_vec(&setting).expect("setting serializes");
            hex::encode(Sha256::digest(&canonical))[..16].to_string()
        };
        Self {
            name,
            config_fingerprint: fingerprint,
            setting,
            categories,
            overall,
            mean_tokens,
            personas,
            records,
            assumptions: ASSUMPTIONS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn category(&self, c: QuestionCategory) -> Score {
        self.categories.get(&c).copied().unwrap_or_default()
    }

    pub fn persona(&self, persona_id: &str) -> Option<&PersonaSummary> {
        self.personas.iter().find(|p| p.persona_id == persona_id)
    }

    /// Per-question records as JSONL.
    pub fn write_records(&self, mut w: impl Write) -> std::io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        let mut body = serde_json::to_string_pretty(self)?;
        body.push('\n');
        std::fs::write(path, body)
    }
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{persona_id}: ingesting {event_id} failed: {source}")]
    Aborted {
        persona_id: String,
        event_id: String,
        #[source]
        source: PipelineError,
        /// Records answered before the failure.
        partial: Box<EvalReport>,
    },
    #[error("{persona_id}: question {question_id}: {source}")]
    Query {
        persona_id: String,
        question_id: String,
        #[source]
        source: QueryError,
    },
    #[error("{persona_id}: question {question_id} has no oracle evidence")]
    MissingOracleEvidence { persona_id: String, question_id: String },
    #[error(transparent)]
    Config(PipelineError),
}

fn record(
    persona: &BenchmarkPersona,
    q: &QuestionItem,
    route: Option<Route>,
    bundle: &RetrievalBundle,
    choice: Option<ChoiceKey>,
    error_flag: bool,
    as_of_event: &str,
) -> AnswerRecord {
    AnswerRecord {
        persona_id: persona.persona_id.clone(),
        question_id: q.question_id.clone(),
        category: q.category,
        route,
        choice,
        ground_truth: q.ground_truth,
        correct: !error_flag && choice == Some(q.ground_truth),
        tokens: bundle.total_tokens,
        error_flag,
        as_of_event: as_of_event.to_string(),
        within_budget: bundle.within_budget(),
    }
}

type PersonaOutcome = Result<Vec<AnswerRecord>, (Vec<AnswerRecord>, EvalError)>;

fn system_persona(persona: &BenchmarkPersona, config: &SystemConfig, gateway: Arc<dyn Gateway>) -> PersonaOutcome {
    let mut engine = Engine::new(config.pipeline, gateway).map_err(|e| (Vec::new(), EvalError::Config(e)))?;
    let mut records = Vec::new();
    for event in &persona.events {
        if let Err(source) = engine.ingest_event(event) {
            let err = EvalError::Aborted {
                persona_id: persona.persona_id.clone(),
                event_id: event.event_id.clone(),
                source,
                partial: Box::new(EvalReport::build(String::new(), Setting::System { pipeline: config.pipeline, budget: config.budget }, Vec::new())),
            };
            return Err((records, err));
        }
        for q in persona.questions.iter().filter(|q| q.asked_after_event == event.event_id) {
            let answer = engine.answer(&q.query, config.budget).map_err(|source| {
                let err = EvalError::Query {
                    persona_id: persona.persona_id.clone(),
                    question_id: q.question_id.clone(),
                    source,
                };
                (records.clone(), err)
            })?;
            let as_of = engine.state().last_event().unwrap_or_default().to_string();
            records.push(record(
                persona,
                q,
                Some(answer.route),
                &answer.bundle,
                answer.outcome.choice,
                answer.outcome.error_flag,
                &as_of,
            ));
        }
    }
    Ok(records)
}

/// Runs each persona (in parallel, each with a fresh engine) and aggregates.
fn run_personas<F>(personas: &[BenchmarkPersona], name: String, setting: Setting, run: F) -> Result<EvalReport, EvalError>
where
    F: Fn(&BenchmarkPersona) -> PersonaOutcome + Sync,
{
    let outcomes: Vec<PersonaOutcome> = std::thread::scope(|scope| {
        let handles: Vec<_> = personas.iter().map(|p| scope.spawn(|| run(p))).collect();
        handles.into_iter().map(|h| h.join().expect("persona run panicked")).collect()
    });
    let mut records = Vec::new();
    let mut failure = None;
    for outcome in outcomes {
        match outcome {
            Ok(r) => records.extend(r),
            Err((r, e)) => {
                records.extend(r);
                failure.get_or_insert(e);
            }
        }
    }
    let report = EvalReport::build(name, setting, records);
    match failure {
        None => Ok(report),
        Some(EvalError::Aborted { persona_id, event_id, source, .. }) => {
            Err(EvalError::Aborted { persona_id, event_id, source, partial: Box::new(report) })
        }
        Some(e) => Err(e),
    }
}

pub fn run_system_eval(
    personas: &[BenchmarkPersona],
    config: &SystemConfig,
    gateway: Arc<dyn Gateway>,
) -> Result<EvalReport, EvalError> {
    config.pipeline.validate().map_err(EvalError::Config)?;
    let setting = Setting::System { pipeline: config.pipeline, budget: config.budget };
    run_personas(personas, config.name.clone(), setting, |p| system_persona(p, config, gateway.clone()))
}

fn reference_items(persona: &BenchmarkPersona, q: &QuestionItem, mode: ReferenceMode) -> Result<Vec<BundleItem>, EvalError> {
    let item = |text: String| BundleItem { text, origin: Origin::TextStore, score: 0.0 };
    let mut items = Vec::new();
    match mode {
        ReferenceMode::FullContext => {
            for event in &persona.events {
                items.extend(event.transcript_lines().map(item));
                if event.event_id == q.asked_after_event {
                    break;
                }
            }
        }
        ReferenceMode::Oracle => {
            let refs = persona.oracle_evidence.get(&q.question_id).filter(|r| !r.is_empty()).ok_or_else(|| {
                EvalError::MissingOracleEvidence { persona_id: persona.persona_id.clone(), question_id: q.question_id.clone() }
            })?;
            for r in refs {
                let event = persona.events.iter().find(|e| e.event_id == r.event_id).expect("loader checked oracle refs");
                let lines: Vec<String> = event.transcript_lines().collect();
                match r.turn_index {
                    Some(t) => items.push(item(lines[t].clone())),
                    None => items.extend(lines.into_iter().map(item)),
                }
            }
        }
    }
    Ok(items)
}

/// Full-context and oracle reference settings. The budget is reported
/// against, never enforced.
pub fn run_reference(
    personas: &[BenchmarkPersona],
    mode: ReferenceMode,
    budget: TokenBudget,
    gateway: Arc<dyn Gateway>,
) -> Result<EvalReport, EvalError> {
    let setting = Setting::Reference { mode, budget };
    run_personas(personas, mode.to_string(), setting, |persona| {
        let mut records = Vec::new();
        for q in &persona.questions {
            let items = reference_items(persona, q, mode).map_err(|e| (records.clone(), e))?;
            let mut bundle = RetrievalBundle::unbounded(items);
            let outcome = answer_mcq(gateway.as_ref(), &q.query, &bundle);
            bundle.budget = budget;
            records.push(record(persona, q, None, &bundle, outcome.choice, outcome.error_flag, &q.asked_after_event));
        }
        Ok(records)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(persona: &str, category: QuestionCategory, correct: bool, tokens: u64) -> AnswerRecord {
        AnswerRecord {
            persona_id: persona.into(),
            question_id: format!("{persona}-{tokens}"),
            category,
            route: None,
            choice: Some(ChoiceKey::A),
            ground_truth: ChoiceKey::A,
            correct,
            tokens,
            error_flag: false,
            as_of_event: "e".into(),
            within_budget: true,
        }
    }

    #[test]
    fn overall_is_weighted_mean_of_categories() {
        let setting = Setting::Reference { mode: ReferenceMode::Oracle, budget: TokenBudget::default() };
        let records = vec![
            rec("p1", QuestionCategory::TargetPerson, true, 10),
            rec("p1", QuestionCategory::TargetPerson, false, 20),
            rec("p2", QuestionCategory::TargetAsset, true, 30),
        ];
        let r = EvalReport::build("x".into(), setting, records);
        assert_eq!(r.overall, Score { correct: 2, total: 3 });
        assert_eq!(r.category(QuestionCategory::TargetPerson).accuracy(), Some(0.5));
        assert_eq!(r.category(QuestionCategory::ImplicitVisual).accuracy(), None);
        assert!((r.mean_tokens - 20.0).abs() < 1e-12);
        assert_eq!(r.persona("p1").unwrap().mean_tokens, 15.0);
    }

    #[test]
    fn presets_follow_table_rows() {
        let p = presets();
        assert_eq!(p.len(), 5);
        assert!(!p[0].pipeline.enable_pending);
        assert!(!p[1].pipeline.enable_visual);
        assert!(!p[2].pipeline.enable_text);
        assert_eq!(p[4].pipeline, PipelineConfig::default());
    }
}

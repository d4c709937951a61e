use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::conversation::{Event, EventMode, Role, Turn};
use crate::query::{Choice, ChoiceKey, Query, QuestionType};

use super::{BenchmarkPersona, OracleRef, QuestionCategory, QuestionItem};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}:{line}: {detail}", file.display())]
    SchemaViolation { file: PathBuf, line: usize, detail: String },
    #[error("{}:{line}: {detail}", file.display())]
    ChronologyViolation { file: PathBuf, line: usize, detail: String },
    #[error("{}:{line}: image path {path:?} is neither a file nor listed in images/manifest.json", file.display())]
    DanglingImagePath { file: PathBuf, line: usize, path: String },
    #[error("io error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl LoadError {
    pub fn file(&self) -> &Path {
        match self {
            LoadError::MissingFile(p) | LoadError::Io { path: p, .. } => p,
            LoadError::SchemaViolation { file, .. }
            | LoadError::ChronologyViolation { file, .. }
            | LoadError::DanglingImagePath { file, .. } => file,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedBenchmark {
    pub personas: Vec<BenchmarkPersona>,
    /// Accepted oddities, e.g. images on assistant turns.
    pub warnings: Vec<String>,
}

/// Dataset counts used to cross-check the loaded files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub personas: Vec<PersonaCounts>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PersonaCounts {
    pub persona_id: String,
    pub events: usize,
    pub images: usize,
    pub questions: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTurn {
    role: Role,
    content: String,
    #[serde(default)]
    image_path: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    event_id: String,
    date: NaiveDate,
    mode: EventMode,
    turns: Vec<RawTurn>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQuestion {
    question_id: String,
    category: QuestionCategory,
    question: String,
    choices: BTreeMap<ChoiceKey, String>,
    #[serde(default = "text_type")]
    question_type: QuestionType,
    #[serde(default)]
    attached_image: Option<String>,
    ground_truth: ChoiceKey,
    #[serde(default)]
    asked_after_event: Option<String>,
}

fn text_type() -> QuestionType {
    QuestionType::Text
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOracle {
    question_id: String,
    evidence: Vec<OracleRef>,
}

#[derive(Deserialize)]
struct RawPersona {
    persona_id: String,
    #[serde(default)]
    profile: Value,
}

struct Images {
    dir: PathBuf,
    prompts: BTreeMap<String, String>,
}

impl Images {
    /// Resolved path (when the file exists) and the surrogate prompt (when listed).
    fn resolve(&self, path: &str) -> Option<(String, Option<String>)> {
        let prompt = self.prompts.get(path).cloned();
        let on_disk = self.dir.join(path);
        if on_disk.is_file() {
            return Some((on_disk.to_string_lossy().into_owned(), prompt));
        }
        prompt.map(|p| (path.to_string(), Some(p)))
    }
}

fn read(path: &Path) -> Result<String, LoadError> {
    fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => LoadError::MissingFile(path.to_path_buf()),
        _ => LoadError::Io { path: path.to_path_buf(), source: e },
    })
}

fn schema(file: &Path, line: usize, detail: impl Into<String>) -> LoadError {
    LoadError::SchemaViolation { file: file.to_path_buf(), line, detail: detail.into() }
}

fn jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<(usize, T)>, LoadError> {
    let body = read(path)?;
    let mut out = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(line).map_err(|e| schema(path, i + 1, e.to_string()))?;
        out.push((i + 1, v));
    }
    Ok(out)
}

/// Loads `root/manifest.json` and every persona directory it lists.
pub fn load_benchmark(root: impl AsRef<Path>) -> Result<LoadedBenchmark, LoadError> {
    let root = root.as_ref();
    let manifest_path = root.join("manifest.json");
    let manifest: BenchmarkManifest =
        serde_json::from_str(&read(&manifest_path)?).map_err(|e| schema(&manifest_path, e.line(), e.to_string()))?;
    let mut personas = Vec::new();
    let mut warnings = Vec::new();
    let mut seen = BTreeSet::new();
    for counts in &manifest.personas {
        if !seen.insert(counts.persona_id.clone()) {
            return Err(schema(&manifest_path, 0, format!("persona {} listed twice", counts.persona_id)));
        }
        let (persona, images) = load_persona(&root.join(&counts.persona_id), &mut warnings)?;
        if persona.persona_id != counts.persona_id {
            return Err(schema(
                &root.join(&counts.persona_id).join("persona.json"),
                0,
                format!("persona_id {} does not match directory {}", persona.persona_id, counts.persona_id),
            ));
        }
        let actual = (persona.events.len(), images, persona.questions.len());
        if actual != (counts.events, counts.images, counts.questions) {
            return Err(schema(
                &manifest_path,
                0,
                format!(
                    "{}: manifest lists {} events, {} images, {} questions but found {} / {} / {}",
                    counts.persona_id, counts.events, counts.images, counts.questions, actual.0, actual.1, actual.2
                ),
            ));
        }
        personas.push(persona);
    }
    Ok(LoadedBenchmark { personas, warnings })
}

/// Loads one persona directory; returns it with its image count.
pub fn load_persona(dir: &Path, warnings: &mut Vec<String>) -> Result<(BenchmarkPersona, usize), LoadError> {
    let persona_path = dir.join("persona.json");
    let raw: RawPersona =
        serde_json::from_str(&read(&persona_path)?).map_err(|e| schema(&persona_path, e.line(), e.to_string()))?;

    let images_manifest = dir.join("images").join("manifest.json");
    let prompts: BTreeMap<String, String> = match fs::read_to_string(&images_manifest) {
        Ok(body) => serde_json::from_str(&body).map_err(|e| schema(&images_manifest, e.line(), e.to_string()))?,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
        Err(e) => return Err(LoadError::Io { path: images_manifest, source: e }),
    };
    let images = Images { dir: dir.to_path_buf(), prompts };

    let events_path = dir.join("events.jsonl");
    let mut events: Vec<Event> = Vec::new();
    let mut event_ids = BTreeMap::new();
    let mut image_count = 0;
    for (line, raw) in jsonl::<RawEvent>(&events_path)? {
        if let Some(prev) = events.last() {
            if raw.date < prev.date {
                return Err(LoadError::ChronologyViolation {
                    file: events_path.clone(),
                    line,
                    detail: format!("event {} dated {} follows {} dated {}", raw.event_id, raw.date, prev.event_id, prev.date),
                });
            }
        }
        if event_ids.insert(raw.event_id.clone(), events.len()).is_some() {
            return Err(schema(&events_path, line, format!("duplicate event_id {}", raw.event_id)));
        }
        let mut turns = Vec::new();
        for (i, rt) in raw.turns.into_iter().enumerate() {
            let mut turn = Turn::parse(rt.role, i, &rt.content).map_err(|e| schema(&events_path, line, e.to_string()))?;
            if let Some(path) = rt.image_path {
                let Some(seg) = turn.segments.iter_mut().find(|s| s.is_image()) else {
                    return Err(schema(&events_path, line, format!("turn {i} has image_path but no <image> markup")));
                };
                let (resolved, _) = images.resolve(&path).ok_or_else(|| LoadError::DanglingImagePath {
                    file: events_path.clone(),
                    line,
                    path: path.clone(),
                })?;
                seg.image_path = Some(resolved);
            }
            if let Some(img) = turn.image() {
                image_count += 1;
                if turn.role == Role::Assistant {
                    warnings.push(format!(
                        "{}:{line}: image {:?} appears on an assistant turn",
                        events_path.display(),
                        img.text
                    ));
                }
            }
            turns.push(turn);
        }
        let event = Event { event_id: raw.event_id, date: raw.date, mode: raw.mode, turns };
        event.validate().map_err(|e| schema(&events_path, line, e.to_string()))?;
        if event.turns.is_empty() {
            return Err(schema(&events_path, line, "event has no turns"));
        }
        events.push(event);
    }

    let questions_path = dir.join("questions.jsonl");
    let last_event = events.last().map(|e| e.event_id.clone());
    let mut questions = Vec::new();
    let mut qids = BTreeSet::new();
    for (line, raw) in jsonl::<RawQuestion>(&questions_path)? {
        if !qids.insert(raw.question_id.clone()) {
            return Err(schema(&questions_path, line, format!("duplicate question_id {}", raw.question_id)));
        }
        let asked_after = match raw.asked_after_event.or_else(|| last_event.clone()) {
            Some(id) if event_ids.contains_key(&id) => id,
            Some(id) => return Err(schema(&questions_path, line, format!("unknown event {id}"))),
            None => return Err(schema(&questions_path, line, "persona has no events")),
        };
        let image_choices = raw.question_type == QuestionType::Image && raw.attached_image.is_none();
        let mut choices = BTreeMap::new();
        for (k, v) in raw.choices {
            let choice = if image_choices {
                let (resolved, prompt) = images.resolve(&v).ok_or_else(|| LoadError::DanglingImagePath {
                    file: questions_path.clone(),
                    line,
                    path: v.clone(),
                })?;
                Choice::image(resolved, prompt)
            } else {
                Choice::text(v)
            };
            choices.insert(k, choice);
        }
        let (attached_image, attached_prompt) = match raw.attached_image {
            Some(path) => {
                let (resolved, prompt) = images.resolve(&path).ok_or_else(|| LoadError::DanglingImagePath {
                    file: questions_path.clone(),
                    line,
                    path: path.clone(),
                })?;
                (Some(resolved), prompt)
            }
            None => (None, None),
        };
        let query = Query { question: raw.question, choices, question_type: raw.question_type, attached_image, attached_prompt };
        query.validate().map_err(|e| schema(&questions_path, line, e.to_string()))?;
        questions.push(QuestionItem {
            question_id: raw.question_id,
            category: raw.category,
            query,
            ground_truth: raw.ground_truth,
            asked_after_event: asked_after,
        });
    }

    let oracle_path = dir.join("oracle.jsonl");
    let mut oracle_evidence = BTreeMap::new();
    if oracle_path.exists() {
        for (line, raw) in jsonl::<RawOracle>(&oracle_path)? {
            if !qids.contains(&raw.question_id) {
                return Err(schema(&oracle_path, line, format!("unknown question {}", raw.question_id)));
            }
            for r in &raw.evidence {
                let Some(&idx) = event_ids.get(&r.event_id) else {
                    return Err(schema(&oracle_path, line, format!("unknown event {}", r.event_id)));
                };
                if r.turn_index.is_some_and(|t| t >= events[idx].turns.len()) {
                    return Err(schema(&oracle_path, line, format!("turn out of range in event {}", r.event_id)));
                }
            }
            if oracle_evidence.insert(raw.question_id.clone(), raw.evidence).is_some() {
                return Err(schema(&oracle_path, line, format!("duplicate oracle entry for {}", raw.question_id)));
            }
        }
    }

    let persona = BenchmarkPersona { persona_id: raw.persona_id, profile: raw.profile, events, questions, oracle_evidence };
    Ok((persona, image_count))
}

//! Structured output documents and their validation.
//!
//! Each [`SchemaId`] names one typed document. A model reply is accepted only
//! if it deserializes into that type and passes the semantic checks below.

use std::fmt;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::query::{ChoiceKey, Route};
use crate::visual_store::{EntityKind, FactCategory, OwnerRelation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaId {
    Interpretation,
    Extraction,
    RouteDecision,
    McqAnswer,
}

impl SchemaId {
    pub const ALL: [SchemaId; 4] =
        [SchemaId::Interpretation, SchemaId::Extraction, SchemaId::RouteDecision, SchemaId::McqAnswer];

    pub fn as_str(self) -> &'static str {
        match self {
            SchemaId::Interpretation => "interpretation",
            SchemaId::Extraction => "extraction",
            SchemaId::RouteDecision => "route_decision",
            SchemaId::McqAnswer => "mcq_answer",
        }
    }

    /// Short field listing handed to live models.
    pub fn shape_hint(self) -> &'static str {
        match self {
            SchemaId::Interpretation => {
                r#"{"scene_owner": "self_user|third_party|public|unknown", "present_entities": [{"kind": "person|asset|pet", "name_hint": string|null, "descriptor": string}], "candidate_facts": [{"statement": string, "category": "possession|habit|health|relationship|environment|other"}], "confidence": number in [0,1], "decision": "confirm|defer|reject"}"#
            }
            SchemaId::Extraction => {
                r#"{"entities": [{"name": string, "kind": "person|asset|pet", "aliases": [string], "owner_relation": "self_user|user_associated|third_party|unknown", "descriptor": string}], "relationships": [{"subject": "user" or entity name, "relation": string, "object": "user" or entity name}], "facts": [{"statement": string, "category": "possession|habit|health|relationship|environment|other", "confidence": number in [0,1]}]}"#
            }
            SchemaId::RouteDecision => r#"{"route": "visual_only|text_only|both"}"#,
            SchemaId::McqAnswer => r#"{"choice": "A|B|C|D", "rationale": string}"#,
        }
    }

    pub fn validate(self, doc: &Value) -> Result<(), String> {
        match self {
            SchemaId::Interpretation => parse_checked::<Interpretation>(doc).map(drop),
            SchemaId::Extraction => parse_checked::<Extraction>(doc).map(drop),
            SchemaId::RouteDecision => parse_checked::<RouteDecision>(doc).map(drop),
            SchemaId::McqAnswer => parse_checked::<McqAnswer>(doc).map(drop),
        }
    }
}

impl fmt::Display for SchemaId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub trait Checked {
    fn check(&self) -> Result<(), String>;
}

/// Deserializes and runs the document's semantic checks.
pub fn parse_checked<T: DeserializeOwned + Checked>(doc: &Value) -> Result<T, String> {
    let parsed: T = serde_json::from_value(doc.clone()).map_err(|e| e.to_string())?;
    parsed.check()?;
    Ok(parsed)
}

fn unit_interval(name: &str, v: f64) -> Result<(), String> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(format!("{name} {v} outside [0, 1]"))
    }
}

fn non_empty(name: &str, s: &str) -> Result<(), String> {
    if s.trim().is_empty() {
        Err(format!("{name} is empty"))
    } else {
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneOwner {
    SelfUser,
    ThirdParty,
    Public,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Confirm,
    Defer,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresentEntity {
    pub kind: EntityKind,
    #[serde(default)]
    pub name_hint: Option<String>,
    pub descriptor: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateFact {
    pub statement: String,
    pub category: FactCategory,
}

/// Context-guided reading of one image: who is present, whose space it is,
/// what might be worth remembering, and whether to commit now.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interpretation {
    pub scene_owner: SceneOwner,
    #[serde(default)]
    pub present_entities: Vec<PresentEntity>,
    #[serde(default)]
    pub candidate_facts: Vec<CandidateFact>,
    pub confidence: f64,
    pub decision: Decision,
}

impl Checked for Interpretation {
    fn check(&self) -> Result<(), String> {
        unit_interval("confidence", self.confidence)?;
        for e in &self.present_entities {
            non_empty("present entity descriptor", &e.descriptor)?;
        }
        for f in &self.candidate_facts {
            non_empty("candidate fact statement", &f.statement)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedEntity {
    pub name: String,
    pub kind: EntityKind,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default)]
    pub owner_relation: Option<OwnerRelation>,
    pub descriptor: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedRelationship {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractedFact {
    pub statement: String,
    pub category: FactCategory,
    #[serde(default = "default_fact_confidence")]
    pub confidence: f64,
}

fn default_fact_confidence() -> f64 {
    1.0
}

/// Three-level extraction from one confirmed image.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Extraction {
    #[serde(default)]
    pub entities: Vec<ExtractedEntity>,
    #[serde(default)]
    pub relationships: Vec<ExtractedRelationship>,
    #[serde(default)]
    pub facts: Vec<ExtractedFact>,
}

impl Checked for Extraction {
    fn check(&self) -> Result<(), String> {
        for e in &self.entities {
            non_empty("entity name", &e.name)?;
            non_empty("entity descriptor", &e.descriptor)?;
        }
        for r in &self.relationships {
            non_empty("relationship subject", &r.subject)?;
            non_empty("relationship relation", &r.relation)?;
            non_empty("relationship object", &r.object)?;
        }
        for f in &self.facts {
            non_empty("fact statement", &f.statement)?;
            unit_interval("fact confidence", f.confidence)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub route: Route,
}

impl Checked for RouteDecision {
    fn check(&self) -> Result<(), String> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqAnswer {
    pub choice: ChoiceKey,
    #[serde(default)]
    pub rationale: String,
}

impl Checked for McqAnswer {
    fn check(&self) -> Result<(), String> {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;

    #[test]
    fn interpretation_validation() {
        let ok = json!({"scene_owner": "self_user", "confidence": 0.9, "decision": "confirm"});
        assert!(SchemaId::Interpretation.validate(&ok).is_ok());
        let bad = json!({"scene_owner": "self_user", "confidence": 1.5, "decision": "confirm"});
        assert!(SchemaId::Interpretation.validate(&bad).is_err());
        let missing = json!({"decision": "pending"});
        assert!(SchemaId::Interpretation.validate(&missing).is_err());
    }

    #[test]
    fn mcq_choice_must_be_a_letter() {
        assert!(SchemaId::McqAnswer.validate(&json!({"choice": "B"})).is_ok());
        assert!(SchemaId::McqAnswer.validate(&json!({"choice": "E"})).is_err());
        assert!(SchemaId::McqAnswer.validate(&json!("B")).is_err());
    }

    #[test]
    fn extraction_defaults_to_empty_lists() {
        let doc = json!({});
        let parsed: Extraction = parse_checked(&doc).unwrap();
        assert_eq!(parsed, Extraction::default());
        let blank = json!({"facts": [{"statement": " ", "category": "habit"}]});
        assert!(SchemaId::Extraction.validate(&blank).is_err());
    }

    #[test]
    fn route_decision() {
        assert!(SchemaId::RouteDecision.validate(&json!({"route": "both"})).is_ok());
        assert!(SchemaId::RouteDecision.validate(&json!({"route": "images"})).is_err());
    }
}

//! Uniform access to generative and embedding models.
//!
//! Three backends share the [`Gateway`] trait: [`ScriptedGateway`] replays
//! recorded fixtures keyed by a request fingerprint, [`HttpGateway`] talks to
//! an OpenAI-compatible endpoint, and [`RecordingGateway`] wraps either one to
//! capture a fixture set for later replay.

mod embedding;
mod http;
mod recording;
pub mod schema;
mod scripted;

use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use embedding::{cosine, hashed_embedding, EmbeddingVector, SCRIPTED_DIM};
pub use http::{HttpConfig, HttpGateway};
pub use recording::RecordingGateway;
pub use schema::SchemaId;
pub use scripted::{Fixture, ScriptedGateway};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("no scripted fixture for request {match_key}")]
    NoFixtureMatch { match_key: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("model output does not conform to the {schema} schema: {detail}")]
    NonConformingOutput { schema: SchemaId, detail: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("fixture error: {0}")]
    Fixture(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartKind {
    Text,
    ImagePath,
    ImagePrompt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Part {
    pub kind: PartKind,
    pub value: String,
}

impl Part {
    pub fn text(value: impl Into<String>) -> Self {
        Self { kind: PartKind::Text, value: value.into() }
    }

    pub fn image_path(value: impl Into<String>) -> Self {
        Self { kind: PartKind::ImagePath, value: value.into() }
    }

    pub fn image_prompt(value: impl Into<String>) -> Self {
        Self { kind: PartKind::ImagePrompt, value: value.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: MessageRole,
    pub parts: Vec<Part>,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Self { role: MessageRole::System, parts: vec![Part::text(text)] }
    }

    pub fn user(parts: Vec<Part>) -> Self {
        Self { role: MessageRole::User, parts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub messages: Vec<Message>,
    pub schema: SchemaId,
    pub temperature: f64,
}

impl GenerationRequest {
    pub fn new(schema: SchemaId, messages: Vec<Message>) -> Self {
        Self { messages, schema, temperature: 0.0 }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("request has no messages".into()));
        }
        if !(0.0..=1.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 1]",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Non-system parts in order. System messages carry instructions, which
    /// are configuration and stay out of the fingerprint.
    pub fn content_parts(&self) -> impl Iterator<Item = &Part> {
        self.messages
            .iter()
            .filter(|m| m.role != MessageRole::System)
            .flat_map(|m| m.parts.iter())
    }

    /// Stable replay key: schema id plus an order-preserving hash of the
    /// content part values. Roles are not hashed.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        for part in self.content_parts() {
            let tag: &[u8] = match part.kind {
                PartKind::Text => b"T",
                PartKind::ImagePath => b"P",
                PartKind::ImagePrompt => b"I",
            };
            hasher.update(tag);
            hasher.update((part.value.len() as u64).to_le_bytes());
            hasher.update(part.value.as_bytes());
        }
        format!("{}:{}", self.schema, hex::encode(hasher.finalize()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedKind {
    Text,
    ImagePrompt,
}

impl fmt::Display for EmbedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbedKind::Text => f.write_str("text"),
            EmbedKind::ImagePrompt => f.write_str("image_prompt"),
        }
    }
}

/// Embedding half of the gateway; split out so stores can depend on it alone.
pub trait Embedder: Send + Sync {
    fn embed(&self, kind: EmbedKind, value: &str) -> Result<EmbeddingVector, GatewayError>;
}

pub trait Gateway: Embedder {
    /// Returns a document already validated against `request.schema`.
    fn generate_structured(&self, request: &GenerationRequest) -> Result<Value, GatewayError>;

    /// Whether query routing should be delegated to the model.
    fn routes_with_model(&self) -> bool {
        false
    }
}

pub(crate) fn require_non_empty(value: &str) -> Result<(), GatewayError> {
    if value.trim().is_empty() {
        Err(GatewayError::InvalidRequest("embedding input is empty".into()))
    } else {
        Ok(())
    }
}

//! Long-term memory for multimodal agent conversations.
//!
//! Text turns go to a chunk-embed-search text store. Image turns run through a
//! visual pipeline: the image is interpreted together with its dialogue
//! context, either committed or parked as pending until later evidence
//! resolves it, and confirmed images are distilled into entities,
//! relationships and durable user facts. Queries are routed to the visual
//! store, the text store, or both, and the retrieved items are packed into a
//! token budget for a multiple-choice answering model.

pub mod conversation;
pub mod eval;
pub mod gateway;
pub mod pipeline;
pub mod query;
pub mod text_memory;
pub mod visual_store;

pub use conversation::{count_tokens, Event, EventInput, EventMode, Role, Segment, SegmentKind, TokenBudget, Turn};
pub use gateway::{EmbeddingVector, Gateway, GatewayError};
pub use pipeline::{Engine, IngestReport, PipelineConfig};

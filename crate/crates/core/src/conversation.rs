//! Conversation domain types, the inline `<image> ... </image>` markup
//! parser/serializer, and token accounting.

use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const IMAGE_OPEN: &str = "<image>";
pub const IMAGE_CLOSE: &str = "</image>";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MarkupError {
    #[error("unbalanced image tag at byte {offset}")]
    UnbalancedTag { offset: usize },
    #[error("nested image tag at byte {offset}")]
    NestedTag { offset: usize },
    #[error("image tag at byte {offset} has an empty prompt")]
    EmptyImagePrompt { offset: usize },
    #[error("invalid segment {index}: {reason}")]
    InvalidSegment { index: usize, reason: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TurnError {
    #[error("turn {turn_index} has no content")]
    EmptyTurn { turn_index: usize },
    #[error("turn {turn_index} carries {count} images; at most one is allowed")]
    MultipleImages { turn_index: usize, count: usize },
    #[error("turn {turn_index}: {source}")]
    Markup {
        turn_index: usize,
        #[source]
        source: MarkupError,
    },
    #[error("event {event_id}: turn indices must be contiguous from 0 (found {found} at position {position})")]
    NonContiguous { event_id: String, position: usize, found: usize },
    #[error("turn {turn_index} has an image_path but no image markup")]
    ImagePathWithoutImage { turn_index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentKind {
    Text,
    ImageRef,
}

/// One piece of a turn: either an utterance or an inline image reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    /// Utterance for `Text`, visual prompt (or image identifier) for `ImageRef`.
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
}

impl Segment {
    pub fn text(text: impl Into<String>) -> Self {
        Self { kind: SegmentKind::Text, text: text.into(), image_path: None }
    }

    pub fn image(prompt: impl Into<String>) -> Self {
        Self { kind: SegmentKind::ImageRef, text: prompt.into(), image_path: None }
    }

    pub fn with_image_path(mut self, path: impl Into<String>) -> Self {
        self.image_path = Some(path.into());
        self
    }

    pub fn is_image(&self) -> bool {
        self.kind == SegmentKind::ImageRef
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    User,
    Assistant,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::User => f.write_str("user"),
            Role::Assistant => f.write_str("assistant"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub segments: Vec<Segment>,
    pub turn_index: usize,
}

impl Turn {
    /// Parses inline markup and validates the per-turn invariants.
    pub fn parse(role: Role, turn_index: usize, raw: &str) -> Result<Self, TurnError> {
        let segments =
            parse_turn_content(raw).map_err(|source| TurnError::Markup { turn_index, source })?;
        let turn = Self { role, segments, turn_index };
        turn.validate()?;
        Ok(turn)
    }

    pub fn validate(&self) -> Result<(), TurnError> {
        if self.segments.is_empty() {
            return Err(TurnError::EmptyTurn { turn_index: self.turn_index });
        }
        let count = self.segments.iter().filter(|s| s.is_image()).count();
        if count > 1 {
            return Err(TurnError::MultipleImages { turn_index: self.turn_index, count });
        }
        Ok(())
    }

    pub fn image(&self) -> Option<&Segment> {
        self.segments.iter().find(|s| s.is_image())
    }

    /// Text segments joined by a single space; empty for image-only turns.
    pub fn plain_text(&self) -> String {
        let parts: Vec<&str> = self
            .segments
            .iter()
            .filter(|s| !s.is_image())
            .map(|s| s.text.as_str())
            .collect();
        parts.join(" ")
    }

    /// Canonical inline form of the whole turn, images included.
    pub fn content(&self) -> String {
        render_segments(&self.segments)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventMode {
    TargetPerson,
    TargetAsset,
    ImplicitVisual,
    ImplicitMultimodal,
    Neutral,
    HardNegative,
}

impl EventMode {
    pub const ALL: [EventMode; 6] = [
        EventMode::TargetPerson,
        EventMode::TargetAsset,
        EventMode::ImplicitVisual,
        EventMode::ImplicitMultimodal,
        EventMode::Neutral,
        EventMode::HardNegative,
    ];
}

/// One conversational session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub event_id: String,
    pub date: NaiveDate,
    pub mode: EventMode,
    pub turns: Vec<Turn>,
}

impl Event {
    pub fn validate(&self) -> Result<(), TurnError> {
        for (position, turn) in self.turns.iter().enumerate() {
            if turn.turn_index != position {
                return Err(TurnError::NonContiguous {
                    event_id: self.event_id.clone(),
                    position,
                    found: turn.turn_index,
                });
            }
            turn.validate()?;
        }
        Ok(())
    }

    /// One line per turn, `[date] role: content`.
    pub fn transcript_lines(&self) -> impl Iterator<Item = String> + '_ {
        self.turns.iter().map(move |t| format!("[{}] {}: {}", self.date, t.role, t.content()))
    }
}

/// Wire form of an event: turns carry raw inline markup rather than segments.
/// This is what the events files and the ingest endpoint accept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventInput {
    pub event_id: String,
    pub date: NaiveDate,
    #[serde(default = "neutral")]
    pub mode: EventMode,
    pub turns: Vec<TurnInput>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnInput {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
}

fn neutral() -> EventMode {
    EventMode::Neutral
}

impl EventInput {
    /// Parses every turn; `image_path` is attached to the turn's image as given.
    pub fn into_event(self) -> Result<Event, TurnError> {
        let mut turns = Vec::with_capacity(self.turns.len());
        for (i, raw) in self.turns.into_iter().enumerate() {
            let mut turn = Turn::parse(raw.role, i, &raw.content)?;
            if let Some(path) = raw.image_path {
                let seg = turn
                    .segments
                    .iter_mut()
                    .find(|s| s.is_image())
                    .ok_or(TurnError::ImagePathWithoutImage { turn_index: i })?;
                seg.image_path = Some(path);
            }
            turns.push(turn);
        }
        let event = Event { event_id: self.event_id, date: self.date, mode: self.mode, turns };
        event.validate()?;
        Ok(event)
    }
}

impl From<&Event> for EventInput {
    fn from(e: &Event) -> Self {
        Self {
            event_id: e.event_id.clone(),
            date: e.date,
            mode: e.mode,
            turns: e
                .turns
                .iter()
                .map(|t| TurnInput {
                    role: t.role,
                    content: t.content(),
                    image_path: t.image().and_then(|s| s.image_path.clone()),
                })
                .collect(),
        }
    }
}

/// Approximate model-token allowance for memory handed to the answering model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenBudget {
    pub limit: u64,
}

impl TokenBudget {
    pub const DEFAULT_LIMIT: u64 = 2000;

    pub const fn new(limit: u64) -> Self {
        Self { limit }
    }

    pub const fn unlimited() -> Self {
        Self { limit: u64::MAX }
    }
}

impl Default for TokenBudget {
    fn default() -> Self {
        Self::new(Self::DEFAULT_LIMIT)
    }
}

/// `ceil(chars / 4)`.
pub fn count_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

/// Splits raw turn content into text and image segments.
///
/// Whitespace inside a tag is trimmed into the prompt; text between tags is
/// trimmed at the tag boundaries and dropped when empty.
pub fn parse_turn_content(raw: &str) -> Result<Vec<Segment>, MarkupError> {
    let mut segments = Vec::new();
    let mut cursor = 0;

    while cursor < raw.len() {
        let rest = &raw[cursor..];
        let next_open = rest.find(IMAGE_OPEN);
        let next_close = rest.find(IMAGE_CLOSE);

        let open = match (next_open, next_close) {
            (None, None) => {
                push_text(&mut segments, rest);
                break;
            }
            (None, Some(close)) => return Err(MarkupError::UnbalancedTag { offset: cursor + close }),
            (Some(open), Some(close)) if close < open => {
                return Err(MarkupError::UnbalancedTag { offset: cursor + close })
            }
            (Some(open), _) => open,
        };

        push_text(&mut segments, &rest[..open]);
        let body_start = cursor + open + IMAGE_OPEN.len();
        let body = &raw[body_start..];
        let close = body
            .find(IMAGE_CLOSE)
            .ok_or(MarkupError::UnbalancedTag { offset: cursor + open })?;
        if let Some(nested) = body[..close].find(IMAGE_OPEN) {
            return Err(MarkupError::NestedTag { offset: body_start + nested });
        }
        let prompt = body[..close].trim();
        if prompt.is_empty() {
            return Err(MarkupError::EmptyImagePrompt { offset: cursor + open });
        }
        segments.push(Segment::image(prompt));
        cursor = body_start + close + IMAGE_CLOSE.len();
    }

    Ok(segments)
}

fn push_text(segments: &mut Vec<Segment>, text: &str) {
    let trimmed = text.trim();
    if !trimmed.is_empty() {
        segments.push(Segment::text(trimmed));
    }
}

/// Inverse of [`parse_turn_content`] for canonical segment lists.
pub fn serialize_turn_content(segments: &[Segment]) -> Result<String, MarkupError> {
    validate_segments(segments)?;
    Ok(render_segments(segments))
}

fn render_segments(segments: &[Segment]) -> String {
    let mut out = String::new();
    for (i, seg) in segments.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        match seg.kind {
            SegmentKind::Text => out.push_str(&seg.text),
            SegmentKind::ImageRef => {
                out.push_str(IMAGE_OPEN);
                out.push(' ');
                out.push_str(&seg.text);
                out.push(' ');
                out.push_str(IMAGE_CLOSE);
            }
        }
    }
    out
}

/// Checks that a segment list is in the canonical form the parser produces.
pub fn validate_segments(segments: &[Segment]) -> Result<(), MarkupError> {
    let invalid = |index: usize, reason: &str| MarkupError::InvalidSegment { index, reason: reason.to_string() };
    for (index, seg) in segments.iter().enumerate() {
        if seg.text.is_empty() {
            return Err(invalid(index, "empty text"));
        }
        if seg.text.trim() != seg.text {
            return Err(invalid(index, "surrounding whitespace"));
        }
        if seg.text.contains(IMAGE_OPEN) || seg.text.contains(IMAGE_CLOSE) {
            return Err(invalid(index, "contains an image tag"));
        }
        match seg.kind {
            SegmentKind::Text => {
                if seg.image_path.is_some() {
                    return Err(invalid(index, "text segment with an image path"));
                }
                if index > 0 && segments[index - 1].kind == SegmentKind::Text {
                    return Err(invalid(index, "adjacent text segments"));
                }
            }
            SegmentKind::ImageRef => {}
        }
    }
    Ok(())
}

//! Text-memory backend: one embedded item per dialogue turn or verbalized
//! visual fact, searched by cosine similarity.
//!
//! [`TextMemoryBackend`] is the adapter point for external services; the
//! built-in [`TextMemory`] is the default implementation.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{cosine, EmbedKind, Embedder, EmbeddingVector, GatewayError};

#[derive(Debug, Error)]
pub enum TextMemoryError {
    #[error("text memory items must have non-empty text")]
    EmptyText,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("embedding dimension {got} does not match store dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt text memory at line {line}: {detail}")]
    Corrupt { line: usize, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextSource {
    DialogueTurn,
    VerbalizedVisualFact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextMemoryItem {
    pub item_id: String,
    pub text: String,
    pub source: TextSource,
    pub event_id: String,
    pub embedding: EmbeddingVector,
    pub created_at: NaiveDate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchHit {
    pub item: TextMemoryItem,
    pub score: f64,
}

/// Add/search contract shared by the built-in store and external services.
pub trait TextMemoryBackend {
    fn add_text_memory(
        &mut self,
        text: &str,
        source: TextSource,
        event_id: &str,
        date: NaiveDate,
        embedder: &dyn Embedder,
    ) -> Result<AddOutcome, TextMemoryError>;

    fn search_text_memory(
        &self,
        query: &str,
        k: usize,
        embedder: &dyn Embedder,
    ) -> Result<Vec<SearchHit>, TextMemoryError>;
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AddOutcome {
    pub item_id: String,
    pub created: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TextMemory {
    items: Vec<TextMemoryItem>,
    by_event_text: BTreeMap<(String, String), usize>,
}

impl TextMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[TextMemoryItem] {
        &self.items
    }

    pub fn dim(&self) -> Option<usize> {
        self.items.first().map(|i| i.embedding.dim())
    }

    /// Inserts a pre-embedded item. Exact duplicates for the same event return
    /// the existing id.
    pub fn insert(
        &mut self,
        text: &str,
        source: TextSource,
        event_id: &str,
        date: NaiveDate,
        embedding: EmbeddingVector,
    ) -> Result<AddOutcome, TextMemoryError> {
        if text.trim().is_empty() {
            return Err(TextMemoryError::EmptyText);
        }
        let key = (event_id.to_string(), text.to_string());
        if let Some(&idx) = self.by_event_text.get(&key) {
            return Ok(AddOutcome { item_id: self.items[idx].item_id.clone(), created: false });
        }
        if let Some(expected) = self.dim() {
            if expected != embedding.dim() {
                return Err(TextMemoryError::DimensionMismatch { expected, got: embedding.dim() });
            }
        }
        let item_id = format!("txt-{:06}", self.items.len() + 1);
        self.items.push(TextMemoryItem {
            item_id: item_id.clone(),
            text: text.to_string(),
            source,
            event_id: event_id.to_string(),
            embedding,
            created_at: date,
        });
        self.by_event_text.insert(key, self.items.len() - 1);
        Ok(AddOutcome { item_id, created: true })
    }

    pub fn contains(&self, event_id: &str, text: &str) -> bool {
        self.by_event_text.contains_key(&(event_id.to_string(), text.to_string()))
    }

    /// Top-k by cosine against a pre-computed query embedding.
    pub fn search_by_embedding(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<SearchHit>, TextMemoryError> {
        if k == 0 {
            return Err(TextMemoryError::InvalidK);
        }
        if let Some(expected) = self.dim() {
            if expected != query.dim() {
                return Err(TextMemoryError::DimensionMismatch { expected, got: query.dim() });
            }
        }
        let mut hits: Vec<SearchHit> = self
            .items
            .iter()
            .map(|item| SearchHit { score: cosine(query, &item.embedding), item: item.clone() })
            .collect();
        hits.sort_by(compare_hits);
        hits.truncate(k);
        Ok(hits)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TextMemoryError> {
        let mut w = BufWriter::new(File::create(path)?);
        for item in &self.items {
            serde_json::to_writer(&mut w, item).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TextMemoryError> {
        let reader = BufReader::new(File::open(path)?);
        let mut mem = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let item: TextMemoryItem = serde_json::from_str(&line)
                .map_err(|e| TextMemoryError::Corrupt { line: i + 1, detail: e.to_string() })?;
            let key = (item.event_id.clone(), item.text.clone());
            if mem.by_event_text.contains_key(&key) {
                return Err(TextMemoryError::Corrupt { line: i + 1, detail: "duplicate item".into() });
            }
            mem.by_event_text.insert(key, mem.items.len());
            mem.items.push(item);
        }
        Ok(mem)
    }
}

/// Score descending, then older first, then item id.
fn compare_hits(a: &SearchHit, b: &SearchHit) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.item.created_at.cmp(&b.item.created_at))
        .then_with(|| a.item.item_id.cmp(&b.item.item_id))
}

impl TextMemoryBackend for TextMemory {
    fn add_text_memory(
        &mut self,
        text: &str,
        source: TextSource,
        event_id: &str,
        date: NaiveDate,
        embedder: &dyn Embedder,
    ) -> Result<AddOutcome, TextMemoryError> {
        if text.trim().is_empty() {
            return Err(TextMemoryError::EmptyText);
        }
        if let Some(&idx) = self.by_event_text.get(&(event_id.to_string(), text.to_string())) {
            return Ok(AddOutcome { item_id: self.items[idx].item_id.clone(), created: false });
        }
        let embedding = embedder.embed(EmbedKind::Text, text)?;
        self.insert(text, source, event_id, date, embedding)
    }

    fn search_text_memory(
        &self,
        query: &str,
        k: usize,
        embedder: &dyn Embedder,
    ) -> Result<Vec<SearchHit>, TextMemoryError> {
        if k == 0 {
            return Err(TextMemoryError::InvalidK);
        }
        if self.items.is_empty() {
            return Ok(Vec::new());
        }
        let q = embedder.embed(EmbedKind::Text, query)?;
        self.search_by_embedding(&q, k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::ScriptedGateway;

    fn d(day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2024, 1, day).unwrap()
    }

    fn v(values: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn add_is_idempotent_per_event() {
        let gw = ScriptedGateway::new();
        let mut mem = TextMemory::new();
        let a = mem.add_text_memory("I adopted a dog", TextSource::DialogueTurn, "e1", d(1), &gw).unwrap();
        let b = mem.add_text_memory("I adopted a dog", TextSource::DialogueTurn, "e1", d(1), &gw).unwrap();
        assert_eq!(a.item_id, b.item_id);
        assert!(a.created && !b.created);
        assert_eq!(mem.len(), 1);
        let c = mem.add_text_memory("I adopted a cat", TextSource::DialogueTurn, "e1", d(1), &gw).unwrap();
        assert_ne!(a.item_id, c.item_id);
        assert_eq!(mem.len(), 2);
    }

    #[test]
    fn empty_text_rejected() {
        let gw = ScriptedGateway::new();
        let mut mem = TextMemory::new();
        assert!(matches!(
            mem.add_text_memory("", TextSource::DialogueTurn, "e1", d(1), &gw),
            Err(TextMemoryError::EmptyText)
        ));
    }

    #[test]
    fn search_empty_store_and_self_similarity() {
        let gw = ScriptedGateway::new();
        let mut mem = TextMemory::new();
        assert!(mem.search_text_memory("anything", 3, &gw).unwrap().is_empty());
        mem.add_text_memory("the red kayak in my garage", TextSource::DialogueTurn, "e1", d(1), &gw).unwrap();
        mem.add_text_memory("budget spreadsheet", TextSource::DialogueTurn, "e1", d(1), &gw).unwrap();
        let hits = mem.search_text_memory("the red kayak in my garage", 2, &gw).unwrap();
        assert_eq!(hits[0].item.text, "the red kayak in my garage");
        assert!((hits[0].score - 1.0).abs() < 1e-9);
        assert!(matches!(mem.search_text_memory("x", 0, &gw), Err(TextMemoryError::InvalidK)));
    }

    #[test]
    fn top_two_matches_brute_force() {
        // query e1; items engineered at cosines 0.6, 0.8, 1.0 (hand-checked: dot over unit norms).
        let mut mem = TextMemory::new();
        mem.insert("a", TextSource::DialogueTurn, "e", d(1), v(&[0.6, 0.8])).unwrap();
        mem.insert("b", TextSource::DialogueTurn, "e", d(1), v(&[0.8, 0.6])).unwrap();
        mem.insert("c", TextSource::DialogueTurn, "e", d(1), v(&[1.0, 0.0])).unwrap();
        let hits = mem.search_by_embedding(&v(&[1.0, 0.0]), 2).unwrap();
        let texts: Vec<_> = hits.iter().map(|h| h.item.text.as_str()).collect();
        assert_eq!(texts, ["c", "b"]);
        assert!((hits[1].score - 0.8).abs() < 1e-12);
    }

    #[test]
    fn ties_prefer_older_then_id() {
        let mut mem = TextMemory::new();
        mem.insert("new", TextSource::DialogueTurn, "e", d(5), v(&[1.0, 0.0])).unwrap();
        mem.insert("old", TextSource::DialogueTurn, "e", d(2), v(&[1.0, 0.0])).unwrap();
        mem.insert("old2", TextSource::DialogueTurn, "e", d(2), v(&[1.0, 0.0])).unwrap();
        let hits = mem.search_by_embedding(&v(&[1.0, 0.0]), 3).unwrap();
        let texts: Vec<_> = hits.iter().map(|h| h.item.text.as_str()).collect();
        assert_eq!(texts, ["old", "old2", "new"]);
    }

    #[test]
    fn persistence_round_trip() {
        let gw = ScriptedGateway::new();
        let mut mem = TextMemory::new();
        mem.add_text_memory("one", TextSource::DialogueTurn, "e1", d(1), &gw).unwrap();
        mem.add_text_memory("As of 2024-01-02: fact", TextSource::VerbalizedVisualFact, "e2", d(2), &gw).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("text.jsonl");
        mem.save(&path).unwrap();
        let loaded = TextMemory::load(&path).unwrap();
        assert_eq!(loaded, mem);

        std::fs::write(&path, "{\"item_id\": \"txt").unwrap();
        assert!(matches!(TextMemory::load(&path), Err(TextMemoryError::Corrupt { line: 1, .. })));
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::GatewayError;

/// Dimension of the scripted backend's embeddings.
pub const SCRIPTED_DIM: usize = 64;

const STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "also", "am", "an", "and", "any", "are", "as", "at", "be", "been", "but", "by",
    "can", "could", "d", "did", "do", "does", "for", "from", "get", "got", "had", "has", "have", "he", "her",
    "here", "him", "his", "how", "i", "if", "in", "into", "is", "it", "its", "just", "ll", "m", "me", "more",
    "most", "my", "now", "of", "on", "or", "our", "out", "re", "really", "s", "she", "should", "so", "some",
    "t", "than", "that", "the", "their", "them", "then", "there", "they", "this", "to", "too", "up", "us", "ve",
    "very", "was", "we", "were", "what", "when", "where", "which", "who", "will", "with", "would", "you", "your",
];

/// Dense embedding with finite entries. Serialized as a bare float array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector {
    values: Vec<f64>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, GatewayError> {
        Self::try_from(values).map_err(GatewayError::InvalidRequest)
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Scales to unit length; the zero vector is returned unchanged.
    pub fn normalized(mut self) -> Self {
        let norm = self.norm();
        if norm > 0.0 {
            self.values.iter_mut().for_each(|v| *v /= norm);
        }
        self
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = String;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        if values.is_empty() {
            return Err("embedding must have a positive dimension".into());
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(format!("embedding entry {i} is not finite"));
        }
        Ok(Self { values })
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

/// Cosine similarity; 0 when either side is the zero vector.
///
/// Panics if the dimensions differ; callers check dimensions first.
pub fn cosine(a: &EmbeddingVector, b: &EmbeddingVector) -> f64 {
    assert_eq!(a.dim(), b.dim(), "cosine over mismatched dimensions");
    let dot: f64 = a.values.iter().zip(&b.values).map(|(x, y)| x * y).sum();
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        0.0
    } else {
        (dot / denom).clamp(-1.0, 1.0)
    }
}

fn tokens(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .filter(|t| !STOPWORDS.contains(&t.as_str()))
        .map(fold_plural)
        .collect()
}

/// "trails" and "trail" should share a direction; "glass" should not lose its tail.
fn fold_plural(t: String) -> String {
    match t.strip_suffix('s') {
        Some(stem) if stem.len() >= 3 && !stem.ends_with('s') && !stem.ends_with('u') && !stem.ends_with('i') => {
            stem.to_string()
        }
        _ => t,
    }
}

fn token_vector(token: &str, dim: usize) -> Vec<f64> {
    let digest = Sha256::digest(format!("visualmem-embed-v1:{token}").as_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    let mut rng = ChaCha8Rng::from_seed(seed);
    (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Seeded bag-of-tokens embedding: each content token maps to a fixed
/// pseudo-random direction and the sum is normalized. Identical inputs embed
/// identically and texts sharing vocabulary land close together.
pub fn hashed_embedding(text: &str, dim: usize) -> EmbeddingVector {
    let mut toks = tokens(text);
    if toks.is_empty() {
        toks.push(text.trim().to_lowercase());
    }
    let mut acc = vec![0.0; dim];
    for tok in &toks {
        for (a, v) in acc.iter_mut().zip(token_vector(tok, dim)) {
            *a += v;
        }
    }
    EmbeddingVector { values: acc }.normalized()
}

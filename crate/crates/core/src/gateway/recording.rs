use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use serde_json::Value;

use super::{EmbedKind, Embedder, EmbeddingVector, Fixture, Gateway, GatewayError, GenerationRequest};

/// Passes calls through to an inner gateway and records every successful
/// structured reply under its fingerprint, producing a replayable fixture set.
pub struct RecordingGateway {
    inner: Arc<dyn Gateway>,
    recorded: Mutex<BTreeMap<String, Value>>,
}

impl RecordingGateway {
    pub fn new(inner: Arc<dyn Gateway>) -> Self {
        Self { inner, recorded: Mutex::new(BTreeMap::new()) }
    }

    /// Recorded fixtures sorted by match key.
    pub fn fixtures(&self) -> Vec<Fixture> {
        self.recorded
            .lock()
            .expect("recording lock poisoned")
            .iter()
            .map(|(k, v)| Fixture { match_key: k.clone(), response: v.clone() })
            .collect()
    }
}

impl Embedder for RecordingGateway {
    fn embed(&self, kind: EmbedKind, value: &str) -> Result<EmbeddingVector, GatewayError> {
        self.inner.embed(kind, value)
    }
}

impl Gateway for RecordingGateway {
    fn generate_structured(&self, request: &GenerationRequest) -> Result<Value, GatewayError> {
        let doc = self.inner.generate_structured(request)?;
        let key = request.fingerprint();
        let mut recorded = self.recorded.lock().expect("recording lock poisoned");
        if let Some(prev) = recorded.get(&key) {
            if prev != &doc {
                return Err(GatewayError::Fixture(format!(
                    "non-deterministic reply for {key}: cannot record two responses"
                )));
            }
        } else {
            recorded.insert(key, doc.clone());
        }
        Ok(doc)
    }

    fn routes_with_model(&self) -> bool {
        self.inner.routes_with_model()
    }
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;
    use crate::gateway::{Message, Part, SchemaId, ScriptedGateway};

    #[test]
    fn records_and_replays() {
        let req = GenerationRequest::new(SchemaId::McqAnswer, vec![Message::user(vec![Part::text("q")])]);
        let mut inner = ScriptedGateway::new();
        inner.register(req.fingerprint(), json!({"choice": "C", "rationale": ""})).unwrap();
        let rec = RecordingGateway::new(Arc::new(inner));
        rec.generate_structured(&req).unwrap();
        rec.generate_structured(&req).unwrap();
        let fixtures = rec.fixtures();
        assert_eq!(fixtures.len(), 1);
        let replay = ScriptedGateway::from_fixtures(fixtures).unwrap();
        assert_eq!(replay.generate_structured(&req).unwrap()["choice"], "C");
    }
}

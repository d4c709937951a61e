use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{
    hashed_embedding, require_non_empty, EmbedKind, Embedder, EmbeddingVector, Gateway, GatewayError,
    GenerationRequest, SCRIPTED_DIM,
};

/// One recorded reply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fixture {
    pub match_key: String,
    pub response: Value,
}

/// Deterministic backend: replies come from a fixture table keyed by the
/// request fingerprint, embeddings from [`hashed_embedding`].
#[derive(Debug, Clone, Default)]
pub struct ScriptedGateway {
    fixtures: BTreeMap<String, Value>,
}

impl ScriptedGateway {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_fixtures(fixtures: impl IntoIterator<Item = Fixture>) -> Result<Self, GatewayError> {
        let mut gw = Self::new();
        for f in fixtures {
            gw.register(f.match_key, f.response)?;
        }
        Ok(gw)
    }

    /// Loads a JSON array of `{match_key, response}`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let raw = fs::read_to_string(path)
            .map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?;
        let fixtures: Vec<Fixture> = serde_json::from_str(&raw)
            .map_err(|e| GatewayError::Fixture(format!("{}: {e}", path.display())))?;
        Self::from_fixtures(fixtures)
    }

    pub fn register(&mut self, match_key: impl Into<String>, response: Value) -> Result<(), GatewayError> {
        let key = match_key.into();
        if self.fixtures.contains_key(&key) {
            return Err(GatewayError::Fixture(format!("duplicate match_key {key}")));
        }
        self.fixtures.insert(key, response);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.fixtures.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixtures.is_empty()
    }
}

impl Embedder for ScriptedGateway {
    fn embed(&self, _kind: EmbedKind, value: &str) -> Result<EmbeddingVector, GatewayError> {
        require_non_empty(value)?;
        Ok(hashed_embedding(value, SCRIPTED_DIM))
    }
}

impl Gateway for ScriptedGateway {
    fn generate_structured(&self, request: &GenerationRequest) -> Result<Value, GatewayError> {
        request.validate()?;
        let match_key = request.fingerprint();
        let doc = self
            .fixtures
            .get(&match_key)
            .ok_or(GatewayError::NoFixtureMatch { match_key })?;
        request
            .schema
            .validate(doc)
            .map_err(|detail| GatewayError::NonConformingOutput { schema: request.schema, detail })?;
        Ok(doc.clone())
    }
}

#[cfg(test)]
mod tests {
    use serde_json::json;

    use super::*;
    use crate::gateway::{cosine, Message, Part, SchemaId};

    fn interpretation_request(prompt: &str) -> GenerationRequest {
        GenerationRequest::new(
            SchemaId::Interpretation,
            vec![Message::system("interpret"), Message::user(vec![Part::image_prompt(prompt)])],
        )
    }

    #[test]
    fn returns_registered_document() {
        let req = interpretation_request("a cat");
        let doc = json!({"scene_owner": "unknown", "confidence": 0.3, "decision": "defer"});
        let mut gw = ScriptedGateway::new();
        gw.register(req.fingerprint(), doc.clone()).unwrap();
        assert_eq!(gw.generate_structured(&req).unwrap(), doc);
    }

    #[test]
    fn unregistered_request_has_no_match() {
        let gw = ScriptedGateway::new();
        let err = gw.generate_structured(&interpretation_request("a dog")).unwrap_err();
        assert!(matches!(err, GatewayError::NoFixtureMatch { .. }));
    }

    #[test]
    fn registered_document_must_conform() {
        let req = interpretation_request("a cat");
        let mut gw = ScriptedGateway::new();
        gw.register(req.fingerprint(), json!({"decision": "pending"})).unwrap();
        assert!(matches!(
            gw.generate_structured(&req),
            Err(GatewayError::NonConformingOutput { schema: SchemaId::Interpretation, .. })
        ));
    }

    #[test]
    fn duplicate_keys_rejected() {
        let mut gw = ScriptedGateway::new();
        gw.register("k", json!({})).unwrap();
        assert!(gw.register("k", json!({})).is_err());
    }

    #[test]
    fn embeddings_are_deterministic_unit_vectors() {
        let gw = ScriptedGateway::new();
        let a = gw.embed(EmbedKind::Text, "x").unwrap();
        let b = gw.embed(EmbedKind::Text, "x").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), 64);
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert!((cosine(&a, &b) - 1.0).abs() < 1e-9);
        assert!(matches!(gw.embed(EmbedKind::Text, ""), Err(GatewayError::InvalidRequest(_))));
    }

    #[test]
    fn loads_fixture_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fx.json");
        let req = interpretation_request("p");
        let doc = json!({"scene_owner": "public", "confidence": 0.8, "decision": "reject"});
        let body = serde_json::to_string(&vec![Fixture { match_key: req.fingerprint(), response: doc.clone() }]).unwrap();
        std::fs::write(&path, body).unwrap();
        let gw = ScriptedGateway::load(&path).unwrap();
        assert_eq!(gw.len(), 1);
        assert_eq!(gw.generate_structured(&req).unwrap(), doc);
    }
}

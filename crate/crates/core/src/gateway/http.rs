use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{
    require_non_empty, EmbedKind, Embedder, EmbeddingVector, Gateway, GatewayError, GenerationRequest,
    MessageRole, PartKind,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Base URL, e.g. `https://api.openai.com/v1`.
    pub endpoint: String,
    pub model: String,
    #[serde(default)]
    pub embedding_model: Option<String>,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_in_flight() -> usize {
    4
}

fn default_timeout_secs() -> u64 {
    120
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            embedding_model: None,
            api_key: None,
            max_in_flight: default_in_flight(),
            timeout_secs: default_timeout_secs(),
        }
    }
}

/// Counting semaphore bounding concurrent requests.
struct Permits {
    available: Mutex<usize>,
    freed: Condvar,
}

impl Permits {
    fn new(n: usize) -> Self {
        Self { available: Mutex::new(n.max(1)), freed: Condvar::new() }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut n = self.available.lock().expect("permit lock poisoned");
        while *n == 0 {
            n = self.freed.wait(n).expect("permit lock poisoned");
        }
        *n -= 1;
        PermitGuard { permits: self }
    }
}

struct PermitGuard<'a> {
    permits: &'a Permits,
}

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.permits.available.lock().expect("permit lock poisoned") += 1;
        self.permits.freed.notify_one();
    }
}

/// OpenAI-compatible chat-completions backend.
pub struct HttpGateway {
    config: HttpConfig,
    agent: ureq::Agent,
    permits: Permits,
}

impl HttpGateway {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .build()
            .into();
        let permits = Permits::new(config.max_in_flight);
        Self { config, agent, permits }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.endpoint.trim_end_matches('/'), path)
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, GatewayError> {
        let _permit = self.permits.acquire();
        let mut req = self.agent.post(self.url(path));
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| GatewayError::Transport(e.to_string()))?;
        resp.body_mut()
            .read_json::<Value>()
            .map_err(|e| GatewayError::Transport(format!("unreadable response body: {e}")))
    }

    fn wire_messages(&self, request: &GenerationRequest) -> Vec<Value> {
        let mut out = Vec::new();
        let mut saw_system = false;
        for msg in &request.messages {
            let role = match msg.role {
                MessageRole::System => "system",
                MessageRole::User => "user",
                MessageRole::Assistant => "assistant",
            };
            let mut content: Vec<Value> = msg.parts.iter().map(wire_part).collect();
            if msg.role == MessageRole::System && !saw_system {
                saw_system = true;
                content.push(json!({"type": "text", "text": output_instruction(request)}));
            }
            out.push(json!({"role": role, "content": content}));
        }
        if !saw_system {
            out.insert(
                0,
                json!({"role": "system", "content": [{"type": "text", "text": output_instruction(request)}]}),
            );
        }
        out
    }

    fn chat(&self, messages: &[Value], temperature: f64) -> Result<String, GatewayError> {
        let body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": temperature,
        });
        let reply = self.post("chat/completions", &body)?;
        reply["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| GatewayError::Transport("response has no choices[0].message.content".into()))
    }
}

fn output_instruction(request: &GenerationRequest) -> String {
    format!(
        "Reply with a single JSON object and nothing else, shaped as: {}",
        request.schema.shape_hint()
    )
}

fn wire_part(part: &super::Part) -> Value {
    match part.kind {
        PartKind::Text => json!({"type": "text", "text": part.value}),
        PartKind::ImagePrompt => json!({"type": "text", "text": format!("[image, described as: {}]", part.value)}),
        PartKind::ImagePath => match image_url(&part.value) {
            Some(url) => json!({"type": "image_url", "image_url": {"url": url}}),
            None => json!({"type": "text", "text": format!("[image: {}]", part.value)}),
        },
    }
}

fn image_url(path: &str) -> Option<String> {
    if path.starts_with("http://") || path.starts_with("https://") || path.starts_with("data:") {
        return Some(path.to_string());
    }
    let bytes = std::fs::read(path).ok()?;
    let mime = match Path::new(path).extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase) {
        Some(ref e) if e == "png" => "image/png",
        Some(ref e) if e == "gif" => "image/gif",
        Some(ref e) if e == "webp" => "image/webp",
        _ => "image/jpeg",
    };
    Some(format!("data:{mime};base64,{}", base64::engine::general_purpose::STANDARD.encode(bytes)))
}

/// Pulls the JSON object out of a model reply, tolerating code fences and
/// surrounding prose.
pub(crate) fn extract_json(reply: &str) -> Result<Value, String> {
    let trimmed = reply.trim();
    if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
        return Ok(v);
    }
    let start = trimmed.find('{').ok_or("reply contains no JSON object")?;
    let end = trimmed.rfind('}').ok_or("reply contains no JSON object")?;
    if end < start {
        return Err("reply contains no JSON object".into());
    }
    serde_json::from_str(&trimmed[start..=end]).map_err(|e| e.to_string())
}

impl Embedder for HttpGateway {
    fn embed(&self, _kind: EmbedKind, value: &str) -> Result<EmbeddingVector, GatewayError> {
        require_non_empty(value)?;
        let model = self.config.embedding_model.as_deref().unwrap_or(&self.config.model);
        let reply = self.post("embeddings", &json!({"model": model, "input": value}))?;
        let values: Vec<f64> = serde_json::from_value(reply["data"][0]["embedding"].clone())
            .map_err(|e| GatewayError::Transport(format!("malformed embedding response: {e}")))?;
        EmbeddingVector::new(values).map_err(|e| GatewayError::Transport(e.to_string()))
    }
}

impl Gateway for HttpGateway {
    fn generate_structured(&self, request: &GenerationRequest) -> Result<Value, GatewayError> {
        request.validate()?;
        let mut messages = self.wire_messages(request);
        let first = self.chat(&messages, request.temperature)?;
        let detail = match extract_json(&first).and_then(|doc| request.schema.validate(&doc).map(|_| doc)) {
            Ok(doc) => return Ok(doc),
            Err(detail) => detail,
        };

        tracing::debug!(schema = %request.schema, %detail, "retrying with repair instruction");
        messages.push(json!({"role": "assistant", "content": [{"type": "text", "text": first}]}));
        messages.push(json!({"role": "user", "content": [{"type": "text", "text": format!(
            "Your previous reply was rejected ({detail}). {}", output_instruction(request)
        )}]}));
        let second = self.chat(&messages, request.temperature)?;
        extract_json(&second)
            .and_then(|doc| request.schema.validate(&doc).map(|_| doc))
            .map_err(|detail| GatewayError::NonConformingOutput { schema: request.schema, detail })
    }

    fn routes_with_model(&self) -> bool {
        true
    }
}

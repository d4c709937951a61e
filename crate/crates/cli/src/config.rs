use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use visualmem_core::gateway::{HttpConfig, HttpGateway, ScriptedGateway};
use visualmem_core::{Gateway, PipelineConfig, TokenBudget};

use crate::ShellError;

/// Environment variable that overrides `gateway.api_key`.
pub const API_KEY_ENV: &str = "VISUALMEM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayKind {
    Scripted,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatewayConfig {
    pub kind: GatewayKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture_path: Option<PathBuf>,
    /// Prefer the environment variable; this is only a fallback.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_in_flight: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
}

impl GatewayConfig {
    pub fn scripted(fixture_path: impl Into<PathBuf>) -> Self {
        Self {
            kind: GatewayKind::Scripted,
            endpoint: None,
            model: None,
            embedding_model: None,
            fixture_path: Some(fixture_path.into()),
            api_key: None,
            max_in_flight: None,
            timeout_secs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub store_dir: PathBuf,
    #[serde(default)]
    pub budget: TokenBudget,
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub pipeline: PipelineConfig,
}

impl EngineConfig {
    pub fn parse(text: &str) -> Result<Self, ShellError> {
        let config: Self = toml::from_str(text).map_err(|e| ShellError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn render(&self) -> Result<String, ShellError> {
        toml::to_string(self).map_err(|e| ShellError::Config(e.to_string()))
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ShellError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ShellError::Config(format!("reading {}: {e}", path.display())))?;
        let mut config = Self::parse(&text).map_err(|e| ShellError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.store_dir = base.join(&config.store_dir);
        if let Some(p) = &config.gateway.fixture_path {
            config.gateway.fixture_path = Some(base.join(p));
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ShellError> {
        let g = &self.gateway;
        match g.kind {
            GatewayKind::Scripted if g.fixture_path.is_none() => {
                return Err(ShellError::Config("a scripted gateway needs gateway.fixture_path".into()))
            }
            GatewayKind::Http if g.endpoint.is_none() || g.model.is_none() => {
                return Err(ShellError::Config("an http gateway needs gateway.endpoint and gateway.model".into()))
            }
            _ => {}
        }
        if self.budget.limit > i64::MAX as u64 {
            return Err(ShellError::Config("budget is too large".into()));
        }
        self.pipeline.validate().map_err(|e| ShellError::Config(e.to_string()))
    }

    /// Builds the configured backend. `api_key` is taken from the environment
    /// when set there.
    pub fn gateway(&self) -> Result<Arc<dyn Gateway>, ShellError> {
        self.gateway_with_key(std::env::var(API_KEY_ENV).ok())
    }

    pub fn gateway_with_key(&self, env_key: Option<String>) -> Result<Arc<dyn Gateway>, ShellError> {
        self.validate()?;
        let g = &self.gateway;
        Ok(match g.kind {
            GatewayKind::Scripted => {
                let path = g.fixture_path.as_ref().expect("validated");
                Arc::new(ScriptedGateway::load(path).map_err(|e| ShellError::Config(format!("{}: {e}", path.display())))?)
            }
            GatewayKind::Http => Arc::new(HttpGateway::new(self.http_config(env_key))),
        })
    }

    pub fn http_config(&self, env_key: Option<String>) -> HttpConfig {
        let g = &self.gateway;
        let mut http = HttpConfig::new(g.endpoint.clone().unwrap_or_default(), g.model.clone().unwrap_or_default());
        http.embedding_model = g.embedding_model.clone();
        http.api_key = env_key.filter(|k| !k.is_empty()).or_else(|| g.api_key.clone());
        if let Some(n) = g.max_in_flight {
            http.max_in_flight = n;
        }
        if let Some(t) = g.timeout_secs {
            http.timeout_secs = t;
        }
        http
    }
}

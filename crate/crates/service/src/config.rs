use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use latentcrs::text_embed::EmbedConfig;

/// Service settings, read from TOML and then overridden by `CRS_CHECKPOINT`,
/// `CRS_PORT`, `EMBED_ENDPOINT` and `EMBED_TOKEN`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub checkpoint: PathBuf,
    /// Optional item metadata replacing the bundled catalog; ids must match.
    pub catalog: Option<PathBuf>,
    pub host: String,
    pub port: u16,
    pub top_k: usize,
    pub max_turns: usize,
    pub extractor_endpoint: Option<String>,
    pub reranker_endpoint: Option<String>,
    pub remote_timeout_secs: u64,
    /// Sessions are written here as JSON on shutdown.
    pub snapshot: Option<PathBuf>,
    pub embed: EmbedConfig,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("model.lcrs"),
            catalog: None,
            host: "127.0.0.1".into(),
            port: 8080,
            top_k: latentcrs::conversation::DEFAULT_TOP_K,
            max_turns: latentcrs::conversation::DEFAULT_MAX_TURNS,
            extractor_endpoint: None,
            reranker_endpoint: None,
            remote_timeout_secs: 10,
            snapshot: None,
            embed: EmbedConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("{var}: {message}")]
    Env { var: &'static str, message: String },
}

impl ServiceConfig {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::File {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?;
                Self::from_toml(&text).map_err(|e| ConfigError::File {
                    path: p.to_path_buf(),
                    message: e.to_string(),
                })?
            }
            None => Self::default(),
        };
        base.with_env(|k| std::env::var(k).ok())
    }

    /// Applies environment overrides looked up through `var`.
    pub fn with_env(mut self, var: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        if let Some(p) = var("CRS_CHECKPOINT").filter(|v| !v.is_empty()) {
            self.checkpoint = PathBuf::from(p);
        }
        if let Some(p) = var("CRS_PORT").filter(|v| !v.is_empty()) {
            self.port = p.parse().map_err(|e: std::num::ParseIntError| ConfigError::Env {
                var: "CRS_PORT",
                message: e.to_string(),
            })?;
        }
        if let Some(ep) = var("EMBED_ENDPOINT").filter(|v| !v.trim().is_empty()) {
            self.embed.endpoint = Some(ep);
            self.embed.provider = "remote".into();
        }
        if let Some(tok) = var("EMBED_TOKEN").filter(|v| !v.is_empty()) {
            self.embed.token = Some(tok);
        }
        Ok(self)
    }
}

//! Text → vector embedding for accumulated user descriptions, behind a
//! provider trait with a persistent cache in front.

mod cache;
mod local;

pub use cache::{EmbeddingCache, CACHE_MAGIC, CACHE_VERSION};
pub use local::LocalProvider;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::remote::{JsonClient, RemoteError};

/// Prompt wrapped around a description before it is sent to a remote model.
pub const DEFAULT_REMOTE_TEMPLATE: &str = "This sentence: ‘*sentence*’ means in one word:";
pub const TEMPLATE_PLACEHOLDER: &str = "*sentence*";

#[derive(Debug, thiserror::Error)]
pub enum EmbedError {
    #[error("text is empty")]
    EmptyText,
    #[error("template must contain `{TEMPLATE_PLACEHOLDER}` exactly once")]
    BadTemplate,
    #[error(transparent)]
    Remote(#[from] RemoteError),
    #[error("provider `{provider}` returned dimension {actual}, manifest says {expected}")]
    Dimension {
        provider: String,
        expected: usize,
        actual: usize,
    },
    #[error("provider `{0}` returned a non-finite component")]
    NonFinite(String),
    #[error("embedding cache i/o: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub vector: Vec<f64>,
    pub provider_id: String,
}

impl TextEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Fills the template's placeholder with `text`.
pub fn render_template(template: &str, text: &str) -> Result<String, EmbedError> {
    if template.matches(TEMPLATE_PLACEHOLDER).count() != 1 {
        return Err(EmbedError::BadTemplate);
    }
    Ok(template.replace(TEMPLATE_PLACEHOLDER, text))
}

pub trait EmbeddingProvider: Send + Sync {
    fn id(&self) -> &str;
    /// Manifest dimension; every returned vector must have this length.
    fn dim(&self) -> usize;
    fn template(&self) -> &str;
    fn embed_uncached(&self, text: &str) -> Result<Vec<f64>, EmbedError>;
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    model: &'a str,
    input: &'a str,
}

#[derive(Deserialize)]
struct RemoteResponse {
    embedding: Vec<f64>,
    dim: usize,
}

/// Provider speaking `POST {"model","input"} -> {"embedding","dim"}`.
#[derive(Debug, Clone)]
pub struct RemoteProvider {
    id: String,
    model: String,
    dim: usize,
    template: String,
    client: JsonClient,
}

impl RemoteProvider {
    pub fn new(
        endpoint: impl Into<String>,
        token: Option<String>,
        model: impl Into<String>,
        dim: usize,
        template: Option<String>,
    ) -> Result<Self, EmbedError> {
        let template = template.unwrap_or_else(|| DEFAULT_REMOTE_TEMPLATE.to_owned());
        render_template(&template, "")?;
        let model = model.into();
        Ok(Self {
            id: format!("remote:{model}"),
            model,
            dim,
            template,
            client: JsonClient::new(endpoint, token, Duration::from_secs(30)),
        })
    }
}

impl EmbeddingProvider for RemoteProvider {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn template(&self) -> &str {
        &self.template
    }

    fn embed_uncached(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let input = render_template(&self.template, text)?;
        let resp: RemoteResponse = self.client.post(&RemoteRequest {
            model: &self.model,
            input: &input,
        })?;
        if resp.dim != self.dim || resp.embedding.len() != self.dim {
            return Err(EmbedError::Dimension {
                provider: self.id.clone(),
                expected: self.dim,
                actual: resp.embedding.len(),
            });
        }
        Ok(resp.embedding)
    }
}

/// Embedding settings; `provider` is `"local"` or `"remote"`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedConfig {
    pub provider: String,
    pub dim: usize,
    pub endpoint: Option<String>,
    /// Never written back out; normally supplied through `EMBED_TOKEN`.
    #[serde(skip_serializing)]
    pub token: Option<String>,
    pub model: String,
    pub template: Option<String>,
    pub cache_path: Option<PathBuf>,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            provider: "local".into(),
            dim: local::DEFAULT_DIM,
            endpoint: None,
            token: None,
            model: "default".into(),
            template: None,
            cache_path: None,
        }
    }
}

impl std::fmt::Debug for EmbedConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EmbedConfig")
            .field("provider", &self.provider)
            .field("dim", &self.dim)
            .field("endpoint", &self.endpoint)
            .field("token", &self.token.as_ref().map(|_| "<redacted>"))
            .field("model", &self.model)
            .field("template", &self.template)
            .field("cache_path", &self.cache_path)
            .finish()
    }
}

impl EmbedConfig {
    /// Applies `EMBED_ENDPOINT` / `EMBED_TOKEN`. A set endpoint switches the
    /// provider to remote.
    pub fn with_env(mut self) -> Self {
        if let Ok(ep) = std::env::var("EMBED_ENDPOINT") {
            if !ep.trim().is_empty() {
                self.endpoint = Some(ep);
                self.provider = "remote".into();
            }
        }
        if let Ok(tok) = std::env::var("EMBED_TOKEN") {
            if !tok.is_empty() {
                self.token = Some(tok);
            }
        }
        self
    }

    pub fn build(&self) -> Result<TextEmbedder, EmbedError> {
        let provider: Arc<dyn EmbeddingProvider> = match self.provider.as_str() {
            "remote" => {
                let endpoint = self.endpoint.clone().ok_or_else(|| {
                    EmbedError::Remote(RemoteError::Transport {
                        endpoint: String::new(),
                        message: "remote provider configured without an endpoint".into(),
                    })
                })?;
                Arc::new(RemoteProvider::new(
                    endpoint,
                    self.token.clone(),
                    self.model.clone(),
                    self.dim,
                    self.template.clone(),
                )?)
            }
            _ => Arc::new(LocalProvider::new(self.dim)),
        };
        let cache = match &self.cache_path {
            Some(p) => EmbeddingCache::open(p)?,
            None => EmbeddingCache::in_memory(),
        };
        Ok(TextEmbedder::new(provider, Arc::new(cache)))
    }
}

#[derive(Debug, Default)]
pub struct WarmReport {
    pub written: usize,
    pub failures: Vec<(String, EmbedError)>,
}

/// Provider plus cache. Cheap to clone and safe to share across threads.
#[derive(Clone)]
pub struct TextEmbedder {
    provider: Arc<dyn EmbeddingProvider>,
    cache: Arc<EmbeddingCache>,
}

impl std::fmt::Debug for TextEmbedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TextEmbedder")
            .field("provider", &self.provider.id())
            .field("dim", &self.provider.dim())
            .finish()
    }
}

impl TextEmbedder {
    pub fn new(provider: Arc<dyn EmbeddingProvider>, cache: Arc<EmbeddingCache>) -> Self {
        Self { provider, cache }
    }

    pub fn local(dim: usize) -> Self {
        Self::new(
            Arc::new(LocalProvider::new(dim)),
            Arc::new(EmbeddingCache::in_memory()),
        )
    }

    pub fn provider_id(&self) -> &str {
        self.provider.id()
    }

    pub fn dim(&self) -> usize {
        self.provider.dim()
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    pub fn embed(&self, text: &str) -> Result<TextEmbedding, EmbedError> {
        Ok(self.embed_inner(text)?.0)
    }

    /// Returns the embedding and whether it was freshly computed.
    fn embed_inner(&self, text: &str) -> Result<(TextEmbedding, bool), EmbedError> {
        let text = text.trim();
        if text.is_empty() {
            return Err(EmbedError::EmptyText);
        }
        let key = EmbeddingCache::key(self.provider.id(), self.provider.template(), text);
        if let Some(vector) = self.cache.get(&key) {
            self.check(&vector)?;
            return Ok((
                TextEmbedding {
                    vector,
                    provider_id: self.provider.id().to_owned(),
                },
                false,
            ));
        }
        let vector = self.provider.embed_uncached(text)?;
        self.check(&vector)?;
        let fresh = self.cache.insert(key, &vector)?;
        Ok((
            TextEmbedding {
                vector,
                provider_id: self.provider.id().to_owned(),
            },
            fresh,
        ))
    }

    fn check(&self, v: &[f64]) -> Result<(), EmbedError> {
        if v.len() != self.provider.dim() {
            return Err(EmbedError::Dimension {
                provider: self.provider.id().to_owned(),
                expected: self.provider.dim(),
                actual: v.len(),
            });
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(EmbedError::NonFinite(self.provider.id().to_owned()));
        }
        Ok(())
    }

    /// Embeds and persists every text; returns how many entries were new.
    pub fn warm_cache<S: AsRef<str>>(&self, texts: &[S]) -> WarmReport {
        let mut report = WarmReport::default();
        for t in texts {
            match self.embed_inner(t.as_ref()) {
                Ok((_, true)) => report.written += 1,
                Ok((_, false)) => {}
                Err(e) => report.failures.push((t.as_ref().to_owned(), e)),
            }
        }
        report
    }
}

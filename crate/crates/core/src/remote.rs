//! Blocking JSON-over-HTTP client shared by the remote embedder, rule
//! extractor and reranker plug points.

use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum RemoteError {
    #[error("transport error talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    #[error("malformed response from {endpoint}: {message}")]
    Decode { endpoint: String, message: String },
}

#[derive(Clone)]
pub struct JsonClient {
    endpoint: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl std::fmt::Debug for JsonClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("JsonClient")
            .field("endpoint", &self.endpoint)
            .field("token", &self.token.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl JsonClient {
    pub fn new(endpoint: impl Into<String>, token: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .new_agent();
        Self {
            endpoint: endpoint.into(),
            token,
            agent,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn post<B: Serialize, R: DeserializeOwned>(&self, body: &B) -> Result<R, RemoteError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(token) = &self.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(|e| RemoteError::Transport {
            endpoint: self.endpoint.clone(),
            message: e.to_string(),
        })?;
        resp.body_mut()
            .read_json::<R>()
            .map_err(|e| RemoteError::Decode {
                endpoint: self.endpoint.clone(),
                message: e.to_string(),
            })
    }
}

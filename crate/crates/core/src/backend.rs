//! Shared plumbing for model backends reached over HTTP.

use std::time::Duration;

use serde::de::DeserializeOwned;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend unreachable at {endpoint}: {message}")]
    Unreachable { endpoint: String, message: String },
    #[error("backend protocol error: {0}")]
    Protocol(String),
    #[error("no fixture for {0}")]
    MissingFixture(String),
    #[error("fixture i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Small blocking JSON-over-HTTP client used by the remote adapters.
#[derive(Clone)]
pub struct HttpEndpoint {
    url: String,
    agent: ureq::Agent,
}

impl std::fmt::Debug for HttpEndpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpEndpoint").field("url", &self.url).finish()
    }
}

impl HttpEndpoint {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpEndpoint {
            url: url.into(),
            agent,
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    /// POSTs `body` and decodes a JSON response. Non-2xx statuses are
    /// protocol errors; transport failures are `Unreachable`.
    pub fn post<T: DeserializeOwned>(
        &self,
        body: &[u8],
        headers: &[(&str, &str)],
    ) -> Result<T, BackendError> {
        let mut req = self.agent.post(&self.url);
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        let mut resp = req.send(body).map_err(|e| BackendError::Unreachable {
            endpoint: self.url.clone(),
            message: e.to_string(),
        })?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Protocol(format!("status {status}: {text}")));
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Protocol(e.to_string()))
    }
}

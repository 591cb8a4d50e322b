//! HTTP adapter: POSTs the [`BackendRequest`] as JSON and expects a
//! [`BackendReply`] JSON object back (`{label?, text?, probs?}`).
//!
//! Timeouts are enforced by the fallback layer, not here.

use async_trait::async_trait;

use super::{Backend, BackendError, BackendReply, BackendRequest};

#[derive(Debug, Clone)]
pub struct RemoteHttp {
    name: String,
    endpoint: String,
    client: reqwest::Client,
}

impl RemoteHttp {
    pub fn new(endpoint: impl Into<String>) -> Self {
        let endpoint = endpoint.into();
        RemoteHttp {
            name: format!("remote:{endpoint}"),
            endpoint,
            client: reqwest::Client::new(),
        }
    }
}

#[async_trait]
impl Backend for RemoteHttp {
    fn name(&self) -> &str {
        &self.name
    }

    async fn call(&self, request: &BackendRequest) -> Result<BackendReply, BackendError> {
        let resp = self
            .client
            .post(&self.endpoint)
            .json(request)
            .send()
            .await
            .map_err(|e| BackendError::failed(&self.name, e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            let body = resp.text().await.unwrap_or_default();
            return Err(BackendError::failed(
                &self.name,
                format!(
                    "HTTP {status}: {}",
                    body.chars().take(200).collect::<String>()
                ),
            ));
        }
        resp.json::<BackendReply>()
            .await
            .map_err(|e| BackendError::invalid(&self.name, e.to_string()))
    }
}

use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::{BackendConfig, BackendError, ModelBackend, ModelRequest};

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    image_ref: Option<&'a str>,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
}

#[derive(Deserialize)]
struct ChatReply {
    content: String,
}

/// `POST {model, messages: [{role, content, image_ref?}]}` → `{content}`,
/// with an optional bearer token read from an environment variable.
pub struct RemoteHttpBackend {
    client: reqwest::Client,
    endpoint: String,
    model: String,
    token: Option<String>,
}

impl RemoteHttpBackend {
    pub fn from_config(cfg: &BackendConfig) -> Result<Self, BackendError> {
        let endpoint =
            cfg.endpoint.clone().ok_or_else(|| BackendError::Config("REMOTE_HTTP requires endpoint".into()))?;
        let token = match &cfg.auth_token_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| BackendError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let client = reqwest::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self { client, endpoint, model: cfg.model.clone().unwrap_or_default(), token })
    }
}

#[async_trait]
impl ModelBackend for RemoteHttpBackend {
    async fn complete(&self, request: &ModelRequest) -> Result<String, BackendError> {
        let body = ChatRequest {
            model: &self.model,
            messages: vec![ChatMessage {
                role: "user",
                content: &request.prompt,
                image_ref: request.image_ref.as_deref(),
            }],
        };
        let mut req = self.client.post(&self.endpoint).json(&body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let unavailable = |e: reqwest::Error| BackendError::Unavailable(e.to_string());
        let resp = req.send().await.map_err(unavailable)?;
        let resp = resp.error_for_status().map_err(unavailable)?;
        let reply: ChatReply = resp.json().await.map_err(unavailable)?;
        Ok(reply.content)
    }
}

//! Completion backends: the OpenAI-compatible HTTP client and the trait
//! the deterministic mock implements.

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{RequestKind, Sampling};

/// One request as seen by a backend: fully assembled conditioning text
/// plus sampling parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BackendRequest {
    pub kind: RequestKind,
    pub model: String,
    pub prompt: String,
    pub sampling: Sampling,
    pub stop: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub text: String,
    /// `stop` or `length`; `length` marks a token-budget truncation.
    pub finish_reason: String,
}

#[derive(Debug, Clone)]
pub enum BackendError {
    Transport(String),
    Status { code: u16, body: String },
}

impl BackendError {
    /// Transport failures and 429/5xx-class statuses are retryable; other
    /// statuses fail immediately.
    pub fn retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Status { code, .. } => *code == 429 || *code >= 500,
        }
    }
}

impl std::fmt::Display for BackendError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendError::Transport(msg) => write!(f, "transport: {msg}"),
            BackendError::Status { code, body } => write!(f, "status {code}: {body}"),
        }
    }
}

#[async_trait]
pub trait Backend: Send + Sync {
    async fn complete(&self, request: &BackendRequest)
        -> Result<BackendResponse, BackendError>;

    /// True when completing actually touches the network.
    fn is_network(&self) -> bool {
        false
    }
}

/// Client for OpenAI-compatible `/chat/completions` endpoints. The whole
/// assembled conditioning is sent as a single user message, since many
/// served chat templates reject assistant prefill.
pub struct HttpBackend {
    client: reqwest::Client,
    base_url: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(base_url: &str, api_key: Option<String>, timeout_seconds: f64) -> Self {
        let client = reqwest::Client::builder()
            .timeout(std::time::Duration::from_secs_f64(timeout_seconds))
            .build()
            .expect("reqwest client");
        HttpBackend {
            client,
            base_url: base_url.trim_end_matches('/').to_string(),
            api_key,
        }
    }
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Debug, Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

#[async_trait]
impl Backend for HttpBackend {
    async fn complete(
        &self,
        request: &BackendRequest,
    ) -> Result<BackendResponse, BackendError> {
        let mut body = json!({
            "model": request.model,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.sampling.temperature,
            "top_p": request.sampling.top_p,
            "max_tokens": request.sampling.max_tokens,
        });
        if !request.stop.is_empty() {
            body["stop"] = json!(request.stop);
        }

        let mut req = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .header("content-type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("authorization", format!("Bearer {key}"));
        }

        let response = req
            .json(&body)
            .send()
            .await
            .map_err(|e| BackendError::Transport(e.to_string()))?;

        let status = response.status();
        if !status.is_success() {
            let body = response.text().await.unwrap_or_default();
            return Err(BackendError::Status {
                code: status.as_u16(),
                body,
            });
        }

        let parsed: ChatResponse = response
            .json()
            .await
            .map_err(|e| BackendError::Transport(format!("malformed response: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Transport("empty choices".into()))?;
        Ok(BackendResponse {
            text: choice.message.content.unwrap_or_default(),
            finish_reason: choice.finish_reason.unwrap_or_else(|| "stop".into()),
        })
    }

    fn is_network(&self) -> bool {
        true
    }
}

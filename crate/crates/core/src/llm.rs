//! Minimal chat-completion wire client.
//!
//! Speaks the de-facto standard chat API: POST {endpoint}/chat/completions
//! with a JSON body of model, messages, temperature, and max_tokens, reading
//! back choices[0].message.content. Single-shot completions only. Transient
//! failures (timeouts, 429, 5xx) are retried up to [`MAX_ATTEMPTS`] times
//! with exponential backoff and full jitter; other 4xx statuses fail fast.
//! Credentials are held in a self-redacting wrapper and never appear in
//! errors, debug output, or logs.

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::state::Text;

/// Hard ceiling on attempts per [`ChatClient::complete`] call.
pub const MAX_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: Text,
}

impl ChatMessage {
    pub fn new(role: ChatRole, content: impl Into<Text>) -> ChatMessage {
        ChatMessage {
            role,
            content: content.into(),
        }
    }
}

/// One validated completion request. Serializes to the wire body verbatim;
/// equal requests serialize to identical bytes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    #[serde(rename = "model")]
    pub model_id: Text,
    pub messages: Vec<ChatMessage>,
    pub temperature: f32,
    #[serde(rename = "max_tokens")]
    pub max_reply_tokens: u32,
}

impl ChatRequest {
    pub fn new(
        model_id: impl Into<Text>,
        messages: Vec<ChatMessage>,
        temperature: f32,
        max_reply_tokens: u32,
    ) -> Result<ChatRequest, ChatError> {
        let model_id = model_id.into();
        if model_id.trim().is_empty() {
            return Err(ChatError::InvalidRequest("model id is empty".to_string()));
        }
        if messages.is_empty() {
            return Err(ChatError::InvalidRequest(
                "messages list is empty".to_string(),
            ));
        }
        if messages[0].role != ChatRole::System {
            return Err(ChatError::InvalidRequest(
                "first message must have the system role".to_string(),
            ));
        }
        for message in &messages {
            if message.role != ChatRole::Assistant && message.content.is_empty() {
                return Err(ChatError::InvalidRequest(format!(
                    "{:?} message content is empty",
                    message.role
                )));
            }
        }
        if !temperature.is_finite() || temperature < 0.0 {
            return Err(ChatError::InvalidRequest(format!(
                "temperature must be a non-negative real, got {temperature}"
            )));
        }
        if max_reply_tokens == 0 {
            return Err(ChatError::InvalidRequest(
                "max_reply_tokens must be positive".to_string(),
            ));
        }
        Ok(ChatRequest {
            model_id,
            messages,
            temperature,
            max_reply_tokens,
        })
    }
}

#[derive(Debug, Error)]
pub enum ChatError {
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
    #[error("authentication rejected (status {status})")]
    Auth { status: u16 },
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("transport failure after {attempts} attempts: {detail}")]
    Transport { attempts: u32, detail: String },
    #[error("malformed response: {detail}")]
    MalformedResponse { detail: String },
    #[error("endpoint returned status {status}: {detail}")]
    Api { status: u16, detail: String },
}

/// An API credential that redacts itself in all formatted output.
#[derive(Clone)]
pub struct Credential(Text);

impl Credential {
    pub fn new(secret: impl Into<Text>) -> Credential {
        Credential(secret.into())
    }

    fn reveal(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for Credential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Credential(<redacted>)")
    }
}

/// Lifecycle notifications for one `complete` call, for tests and metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttemptEvent {
    /// An attempt is about to be issued (numbers start at 1).
    Attempt { number: u32 },
    /// The given attempt failed transiently; sleeping `delay` before the next.
    Backoff { after_attempt: u32, delay: Duration },
}

pub type AttemptHook = Arc<dyn Fn(&AttemptEvent) + Send + Sync>;

/// A shareable chat-completion client bound to one endpoint and credential.
/// Cloning shares the underlying connection pool; concurrent `complete`
/// calls do not interfere.
#[derive(Clone)]
pub struct ChatClient {
    endpoint: Text,
    credential: Credential,
    agent: ureq::Agent,
    backoff_base: Duration,
    hook: Option<AttemptHook>,
}

impl fmt::Debug for ChatClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ChatClient")
            .field("endpoint", &self.endpoint)
            .field("credential", &self.credential)
            .field("backoff_base", &self.backoff_base)
            .finish_non_exhaustive()
    }
}

enum SendFailure {
    Retryable(RetryCause),
    Fatal(ChatError),
}

enum RetryCause {
    RateLimited,
    ServerStatus(u16),
    Transport(String),
}

impl RetryCause {
    fn exhausted(self, attempts: u32) -> ChatError {
        match self {
            RetryCause::RateLimited => ChatError::RateLimited { attempts },
            RetryCause::ServerStatus(status) => ChatError::Transport {
                attempts,
                detail: format!("server returned status {status}"),
            },
            RetryCause::Transport(detail) => ChatError::Transport { attempts, detail },
        }
    }
}

impl ChatClient {
    /// A client with the default 60s per-attempt timeout and 1s backoff base.
    pub fn new(endpoint: impl Into<Text>, credential: impl Into<Text>) -> ChatClient {
        ChatClient {
            endpoint: endpoint.into(),
            credential: Credential::new(credential),
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(60))
                .build(),
            backoff_base: Duration::from_secs(1),
            hook: None,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> ChatClient {
        self.agent = ureq::AgentBuilder::new().timeout(timeout).build();
        self
    }

    /// Base delay before the first retry; later retries double it. Tests use
    /// a few milliseconds here to keep the retry schedule observable but fast.
    pub fn with_backoff_base(mut self, base: Duration) -> ChatClient {
        self.backoff_base = base;
        self
    }

    pub fn with_attempt_hook(mut self, hook: AttemptHook) -> ChatClient {
        self.hook = Some(hook);
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn emit(&self, event: AttemptEvent) {
        if let Some(hook) = &self.hook {
            hook(&event);
        }
    }

    /// Issue the request, returning the first choice's message content.
    ///
    /// At most [`MAX_ATTEMPTS`] attempts; retry delay before attempt n+1 is
    /// drawn uniformly from [0, base * 2^(n-1)] (full jitter).
    pub fn complete(&self, request: &ChatRequest) -> Result<Text, ChatError> {
        let body = serde_json::to_string(request)
            .map_err(|e| ChatError::InvalidRequest(format!("unserializable request: {e}")))?;
        let url = format!(
            "{}/chat/completions",
            self.endpoint.trim_end_matches('/')
        );
        let mut attempt = 1u32;
        loop {
            self.emit(AttemptEvent::Attempt { number: attempt });
            match self.send_once(&url, &body) {
                Ok(content) => return Ok(content),
                Err(SendFailure::Fatal(error)) => return Err(error),
                Err(SendFailure::Retryable(cause)) => {
                    if attempt >= MAX_ATTEMPTS {
                        return Err(cause.exhausted(attempt));
                    }
                    let delay = self.backoff_delay(attempt);
                    self.emit(AttemptEvent::Backoff {
                        after_attempt: attempt,
                        delay,
                    });
                    std::thread::sleep(delay);
                    attempt += 1;
                }
            }
        }
    }

    fn backoff_delay(&self, failed_attempt: u32) -> Duration {
        let cap = self.backoff_base.mul_f64(f64::from(1u32 << (failed_attempt - 1)));
        cap.mul_f64(rand::thread_rng().gen_range(0.0..=1.0))
    }

    fn send_once(&self, url: &str, body: &str) -> Result<Text, SendFailure> {
        let response = self
            .agent
            .post(url)
            .set("Authorization", &format!("Bearer {}", self.credential.reveal()))
            .set("Content-Type", "application/json")
            .send_string(body);
        match response {
            Ok(response) => {
                let text = response.into_string().map_err(|e| {
                    SendFailure::Retryable(RetryCause::Transport(format!(
                        "failed reading response body: {e}"
                    )))
                })?;
                extract_content(&text).map_err(SendFailure::Fatal)
            }
            Err(ureq::Error::Status(status, response)) => match status {
                401 | 403 => Err(SendFailure::Fatal(ChatError::Auth { status })),
                429 => Err(SendFailure::Retryable(RetryCause::RateLimited)),
                500..=599 => Err(SendFailure::Retryable(RetryCause::ServerStatus(status))),
                _ => {
                    let detail = response
                        .into_string()
                        .map(|s| truncate(&s, 200))
                        .unwrap_or_else(|_| "unreadable body".to_string());
                    Err(SendFailure::Fatal(ChatError::Api { status, detail }))
                }
            },
            Err(ureq::Error::Transport(transport)) => Err(SendFailure::Retryable(
                RetryCause::Transport(transport.to_string()),
            )),
        }
    }
}

fn extract_content(body: &str) -> Result<Text, ChatError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| ChatError::MalformedResponse {
            detail: format!("body is not valid JSON: {e}"),
        })?;
    value
        .pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
        .map(|s| s.to_string())
        .ok_or_else(|| ChatError::MalformedResponse {
            detail: "response lacks choices[0].message.content".to_string(),
        })
}

fn truncate(s: &str, max_chars: usize) -> String {
    if s.chars().count() <= max_chars {
        s.to_string()
    } else {
        let cut: String = s.chars().take(max_chars).collect();
        format!("{cut}...")
    }
}

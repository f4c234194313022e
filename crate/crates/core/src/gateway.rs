//! Provider-agnostic chat-completion access.
//!
//! One wire shape for all providers (OpenAI-compatible chat completions),
//! plus a deterministic scripted backend for offline runs and golden-
//! transcript replay. HTTP calls retry transient failures with exponential
//! backoff and are throttled by a per-backend in-flight limit.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("credential environment variable `{0}` is not set")]
    CredentialMissing(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("rate limited by backend (HTTP 429)")]
    RateLimited,
    #[error("backend returned HTTP {status}")]
    Http { status: u16 },
    #[error("backend returned an empty completion")]
    EmptyCompletion,
    #[error("backend response is not a chat completion document: {0}")]
    MalformedResponse(String),
    #[error("scripted backend exhausted after {consumed} replies")]
    ScriptExhausted { consumed: usize },
}

impl GatewayError {
    fn is_transient(&self) -> bool {
        match self {
            GatewayError::Transport(_) | GatewayError::RateLimited => true,
            GatewayError::Http { status } => *status == 408 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

/// One chat-completion request. Evaluation runs always use temperature 0.0
/// and top-p 1.0 for determinism, enforced at construction.
#[derive(Debug, Clone, Serialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub top_p: f64,
    pub model_id: String,
}

impl ChatRequest {
    /// Build an evaluation-mode request (temperature 0.0, top-p 1.0).
    pub fn evaluation(model_id: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        assert!(!messages.is_empty(), "chat request must carry messages");
        Self {
            messages,
            temperature: 0.0,
            top_p: 1.0,
            model_id: model_id.into(),
        }
    }

    /// Evaluation-mode request with a single user message.
    pub fn user_prompt(model_id: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self::evaluation(
            model_id,
            vec![ChatMessage {
                role: Role::User,
                content: prompt.into(),
            }],
        )
    }
}

/// A chat-completion provider: remote model or canned script.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError>;

    /// Label used to tag session records produced against this backend.
    fn model_id(&self) -> &str;
}

// ---------------------------------------------------------------------------
// Scripted backend
// ---------------------------------------------------------------------------

/// Canned replies consumed in order; exhaustion is an error, never a wrap.
/// Single-consumer: one instance per session.
#[derive(Debug)]
pub struct ScriptedBackend {
    label: String,
    replies: Vec<String>,
    cursor: Mutex<usize>,
}

impl ScriptedBackend {
    pub fn new<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self::labeled("scripted", replies)
    }

    pub fn labeled<S: Into<String>>(
        label: impl Into<String>,
        replies: impl IntoIterator<Item = S>,
    ) -> Self {
        Self {
            label: label.into(),
            replies: replies.into_iter().map(Into::into).collect(),
            cursor: Mutex::new(0),
        }
    }

    pub fn remaining(&self) -> usize {
        self.replies.len() - *self.cursor.lock().unwrap()
    }

    /// Return the next canned reply and advance the cursor; request content
    /// is ignored.
    pub fn next_reply(&self) -> Result<String, GatewayError> {
        let mut cursor = self.cursor.lock().unwrap();
        if *cursor >= self.replies.len() {
            return Err(GatewayError::ScriptExhausted { consumed: *cursor });
        }
        let reply = self.replies[*cursor].clone();
        *cursor += 1;
        Ok(reply)
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, _request: &ChatRequest) -> Result<String, GatewayError> {
        self.next_reply()
    }

    fn model_id(&self) -> &str {
        &self.label
    }
}

// ---------------------------------------------------------------------------
// HTTP backend
// ---------------------------------------------------------------------------

/// Connection settings for one remote backend. Credentials are never stored;
/// only the name of the environment variable holding them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub endpoint: String,
    pub model_id: String,
    pub credential_env_var: String,
    pub max_retries: u32,
    pub timeout: Duration,
}

/// Exponential backoff: base 1s, factor 2, jitter ±20%, capped at 30s.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub base_delay: Duration,
    pub factor: f64,
    pub jitter: f64,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base_delay: Duration::from_secs(1),
            factor: 2.0,
            jitter: 0.2,
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    fn delay_for(&self, attempt: u32) -> Duration {
        let exp = self.base_delay.as_secs_f64() * self.factor.powi(attempt as i32);
        let capped = exp.min(self.max_delay.as_secs_f64());
        let jitter = if self.jitter > 0.0 {
            rand::thread_rng().gen_range(1.0 - self.jitter..=1.0 + self.jitter)
        } else {
            1.0
        };
        Duration::from_secs_f64(capped * jitter)
    }
}

/// Default cap on concurrent in-flight requests per backend.
pub const DEFAULT_IN_FLIGHT_LIMIT: usize = 4;

/// Counting semaphore throttling concurrent calls to one backend.
#[derive(Debug)]
struct InFlightLimit {
    available: Mutex<usize>,
    cv: Condvar,
}

impl InFlightLimit {
    fn new(limit: usize) -> Self {
        Self {
            available: Mutex::new(limit.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut available = self.available.lock().unwrap();
        while *available == 0 {
            available = self.cv.wait(available).unwrap();
        }
        *available -= 1;
        InFlightGuard { limit: self }
    }
}

struct InFlightGuard<'a> {
    limit: &'a InFlightLimit,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.limit.available.lock().unwrap() += 1;
        self.limit.cv.notify_one();
    }
}

/// OpenAI-compatible chat-completions client.
#[derive(Debug)]
pub struct HttpBackend {
    config: BackendConfig,
    policy: RetryPolicy,
    client: reqwest::blocking::Client,
    limit: Arc<InFlightLimit>,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Deserialize)]
struct WireCompletion {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: Option<String>,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, GatewayError> {
        Self::with_policy(config, RetryPolicy::default(), DEFAULT_IN_FLIGHT_LIMIT)
    }

    pub fn with_policy(
        config: BackendConfig,
        policy: RetryPolicy,
        in_flight_limit: usize,
    ) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(Self {
            config,
            policy,
            client,
            limit: Arc::new(InFlightLimit::new(in_flight_limit)),
        })
    }

    fn request_body(&self, request: &ChatRequest) -> String {
        let messages: Vec<WireMessage> = request
            .messages
            .iter()
            .map(|m| WireMessage {
                role: match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                },
                content: &m.content,
            })
            .collect();
        serde_json::json!({
            "model": request.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "top_p": request.top_p,
        })
        .to_string()
    }

    fn attempt(&self, body: &str, credential: &str) -> Result<String, GatewayError> {
        let response = self
            .client
            .post(&self.config.endpoint)
            .header("Authorization", format!("Bearer {credential}"))
            .header("Content-Type", "application/json")
            .body(body.to_string())
            .send()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;

        let status = response.status().as_u16();
        match status {
            200 => {}
            401 | 403 => {
                return Err(GatewayError::CredentialMissing(
                    self.config.credential_env_var.clone(),
                ))
            }
            429 => return Err(GatewayError::RateLimited),
            s => return Err(GatewayError::Http { status: s }),
        }
        let text = response
            .text()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let completion: WireCompletion = serde_json::from_str(&text)
            .map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        let content = completion
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .unwrap_or_default();
        if content.trim().is_empty() {
            return Err(GatewayError::EmptyCompletion);
        }
        Ok(content)
    }
}

impl ChatBackend for HttpBackend {
    /// Resolve the credential, then attempt the request, retrying transient
    /// failures (transport errors, 429, 5xx) up to `max_retries` times.
    /// Credential problems are never retried and make zero network attempts
    /// when the variable is unset.
    fn complete(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        let credential = std::env::var(&self.config.credential_env_var)
            .map_err(|_| GatewayError::CredentialMissing(self.config.credential_env_var.clone()))?;
        let body = self.request_body(request);
        let _guard = self.limit.acquire();
        let mut attempt_idx = 0;
        loop {
            match self.attempt(&body, &credential) {
                Ok(text) => return Ok(text),
                Err(err) if err.is_transient() && attempt_idx < self.config.max_retries => {
                    std::thread::sleep(self.policy.delay_for(attempt_idx));
                    attempt_idx += 1;
                }
                Err(err) => return Err(err),
            }
        }
    }

    fn model_id(&self) -> &str {
        &self.config.model_id
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn evaluation_requests_pin_sampling_parameters() {
        let req = ChatRequest::user_prompt("m", "hello");
        assert_eq!(req.temperature, 0.0);
        assert_eq!(req.top_p, 1.0);
        assert_eq!(req.messages.len(), 1);
    }

    #[test]
    #[should_panic(expected = "must carry messages")]
    fn empty_message_list_is_rejected_at_construction() {
        let _ = ChatRequest::evaluation("m", vec![]);
    }

    #[test]
    fn scripted_backend_replays_in_order_then_exhausts() {
        let backend = ScriptedBackend::new(["a", "b"]);
        let req = ChatRequest::user_prompt("m", "ignored");
        assert_eq!(backend.complete(&req).unwrap(), "a");
        assert_eq!(backend.complete(&req).unwrap(), "b");
        assert!(matches!(
            backend.complete(&req),
            Err(GatewayError::ScriptExhausted { consumed: 2 })
        ));
    }

    #[test]
    fn fresh_script_replays_identically() {
        let replies = ["one", "two", "three"];
        let req = ChatRequest::user_prompt("m", "x");
        let run = |backend: ScriptedBackend| -> Vec<String> {
            (0..3).map(|_| backend.complete(&req).unwrap()).collect()
        };
        assert_eq!(run(ScriptedBackend::new(replies)), run(ScriptedBackend::new(replies)));
    }

    /// Minimal scripted HTTP/1.1 server: one canned (status, body) per
    /// accepted connection, counting connections.
    fn spawn_stub(responses: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let hits = Arc::new(AtomicUsize::new(0));
        let hits2 = hits.clone();
        std::thread::spawn(move || {
            for (status, payload) in responses {
                let Ok((mut stream, _)) = listener.accept() else {
                    return;
                };
                hits2.fetch_add(1, Ordering::SeqCst);
                let mut buf = [0u8; 8192];
                let _ = stream.read(&mut buf);
                let reason = match status {
                    200 => "OK",
                    429 => "Too Many Requests",
                    _ => "Error",
                };
                let response = format!(
                    "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        (format!("http://{addr}/v1/chat/completions"), hits)
    }

    fn completion_body(text: &str) -> String {
        serde_json::json!({"choices": [{"message": {"role": "assistant", "content": text}}]})
            .to_string()
    }

    fn test_backend(endpoint: String, max_retries: u32) -> HttpBackend {
        let config = BackendConfig {
            endpoint,
            model_id: "stub-model".into(),
            credential_env_var: "DIAGSIM_TEST_KEY".into(),
            max_retries,
            timeout: Duration::from_secs(5),
        };
        let policy = RetryPolicy {
            base_delay: Duration::from_millis(1),
            factor: 2.0,
            jitter: 0.0,
            max_delay: Duration::from_millis(4),
        };
        HttpBackend::with_policy(config, policy, DEFAULT_IN_FLIGHT_LIMIT).unwrap()
    }

    #[test]
    fn healthy_endpoint_echoes_completion() {
        std::env::set_var("DIAGSIM_TEST_KEY", "k");
        let (endpoint, hits) = spawn_stub(vec![(200, completion_body("ok"))]);
        let backend = test_backend(endpoint, 3);
        let out = backend.complete(&ChatRequest::user_prompt("m", "hi")).unwrap();
        assert_eq!(out, "ok");
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn transient_failures_are_retried_until_success() {
        std::env::set_var("DIAGSIM_TEST_KEY", "k");
        let (endpoint, hits) = spawn_stub(vec![
            (500, "{}".into()),
            (429, "{}".into()),
            (200, completion_body("recovered")),
        ]);
        let backend = test_backend(endpoint, 3);
        let out = backend.complete(&ChatRequest::user_prompt("m", "hi")).unwrap();
        assert_eq!(out, "recovered");
        assert_eq!(hits.load(Ordering::SeqCst), 3, "two retries after two failures");
    }

    #[test]
    fn attempts_never_exceed_max_retries_plus_one() {
        std::env::set_var("DIAGSIM_TEST_KEY", "k");
        let (endpoint, hits) = spawn_stub(vec![(500, "{}".into()); 10]);
        let backend = test_backend(endpoint, 2);
        let err = backend
            .complete(&ChatRequest::user_prompt("m", "hi"))
            .unwrap_err();
        assert!(matches!(err, GatewayError::Http { status: 500 }));
        assert_eq!(hits.load(Ordering::SeqCst), 3, "1 attempt + 2 retries");
    }

    #[test]
    fn missing_credential_makes_zero_network_attempts() {
        let (endpoint, hits) = spawn_stub(vec![(200, completion_body("never"))]);
        let config = BackendConfig {
            endpoint,
            model_id: "m".into(),
            credential_env_var: "DIAGSIM_UNSET_CREDENTIAL_VAR".into(),
            max_retries: 3,
            timeout: Duration::from_secs(5),
        };
        let backend = HttpBackend::new(config).unwrap();
        let err = backend
            .complete(&ChatRequest::user_prompt("m", "hi"))
            .unwrap_err();
        assert!(matches!(err, GatewayError::CredentialMissing(ref v) if v == "DIAGSIM_UNSET_CREDENTIAL_VAR"));
        assert_eq!(hits.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn empty_completion_is_an_error() {
        std::env::set_var("DIAGSIM_TEST_KEY", "k");
        let (endpoint, _) = spawn_stub(vec![(200, completion_body("  "))]);
        let backend = test_backend(endpoint, 0);
        assert!(matches!(
            backend.complete(&ChatRequest::user_prompt("m", "hi")),
            Err(GatewayError::EmptyCompletion)
        ));
    }

    #[test]
    fn in_flight_limit_caps_concurrency() {
        let limit = Arc::new(InFlightLimit::new(4));
        let current = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let mut handles = Vec::new();
        for _ in 0..16 {
            let limit = limit.clone();
            let current = current.clone();
            let peak = peak.clone();
            handles.push(std::thread::spawn(move || {
                let _guard = limit.acquire();
                let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                peak.fetch_max(now, Ordering::SeqCst);
                std::thread::sleep(Duration::from_millis(5));
                current.fetch_sub(1, Ordering::SeqCst);
            }));
        }
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 4);
    }
}

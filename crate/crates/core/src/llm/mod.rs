//! Provider-agnostic chat completion with retries and structured output.
//!
//! A [`Gateway`] wraps one [`ChatProvider`]. Transport failures are retried
//! with exponential backoff; structured calls extract the first fenced block,
//! validate it against an [`Expected`] shape and issue repair turns when the
//! answer does not validate. Callers own the fallback policy once
//! [`LlmError::MalformedOutput`] surfaces.

pub mod blocks;
pub mod mock;
pub mod remote;
pub mod structured;
pub mod templates;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use structured::{Expected, RawExplanation, Structured};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatTurn {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub system_prompt: String,
    pub turns: Vec<ChatTurn>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Pipeline stage label, e.g. `profile_item` or `rerank_pair`.
    pub tag: String,
}

impl ChatRequest {
    pub fn single(tag: &str, system_prompt: &str, user_text: String) -> Self {
        Self {
            system_prompt: system_prompt.to_string(),
            turns: vec![ChatTurn { role: Role::User, text: user_text }],
            temperature: 0.0,
            max_output_tokens: 1024,
            tag: tag.to_string(),
        }
    }

    pub fn prompt_chars(&self) -> usize {
        self.system_prompt.chars().count() + self.turns.iter().map(|t| t.text.chars().count()).sum::<usize>()
    }

    fn check_roles(&self) -> Result<(), LlmError> {
        for (i, turn) in self.turns.iter().enumerate() {
            let want = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if turn.role != want {
                return Err(LlmError::InvalidRequest(format!("turn {i} should be {want:?}")));
            }
        }
        if self.turns.last().is_none_or(|t| t.role != Role::User) {
            return Err(LlmError::InvalidRequest("conversation must end with a user turn".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub provider_id: String,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Remote,
    Mock,
}

/// Field names of the remote chat-completion wire format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WireFormat {
    pub messages_field: String,
    pub max_tokens_field: String,
    /// JSON pointer to the answer text in the response body.
    pub response_pointer: String,
}

impl Default for WireFormat {
    fn default() -> Self {
        Self {
            messages_field: "messages".into(),
            max_tokens_field: "max_tokens".into(),
            response_pointer: "/choices/0/message/content".into(),
        }
    }
}

/// Provider settings. Only the *name* of the API key variable is stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub endpoint: Option<String>,
    pub model_name: String,
    pub api_key_env: String,
    pub max_retries: u32,
    pub seed: u64,
    pub max_prompt_chars: usize,
    pub backoff_ms: u64,
    pub parallelism: usize,
    pub timeout_secs: u64,
    pub wire: WireFormat,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Mock,
            endpoint: None,
            model_name: "mock".into(),
            api_key_env: "LLM_API_KEY".into(),
            max_retries: 3,
            seed: 0,
            max_prompt_chars: 200_000,
            backoff_ms: 500,
            parallelism: 4,
            timeout_secs: 120,
            wire: WireFormat::default(),
        }
    }
}

impl ProviderConfig {
    pub fn mock(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("prompt has {chars} characters, limit is {limit}")]
    PromptTooLong { chars: usize, limit: usize },
    #[error("provider unavailable after {attempts} attempts: {reason}")]
    ProviderUnavailable { attempts: u32, reason: String },
    #[error("provider rejected the request: {0}")]
    ProviderRejected(String),
    #[error("malformed output after {attempts} attempts: {reason}")]
    MalformedOutput { attempts: u32, reason: String, raw: String },
    #[error("unknown stage tag {0:?}")]
    UnknownStage(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid provider config: {0}")]
    InvalidConfig(String),
}

/// Failure of a single provider attempt.
#[derive(Debug, Clone, PartialEq)]
pub enum AttemptError {
    /// Worth retrying (timeouts, 429, 5xx).
    Transient(String),
    Fatal(LlmError),
}

/// One round trip to a model. Implementations must not retry internally.
pub trait ChatProvider: Send + Sync {
    fn id(&self) -> String;
    fn send(&self, request: &ChatRequest) -> Result<String, AttemptError>;
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug)]
pub struct Limiter {
    slots: Mutex<usize>,
    freed: Condvar,
}

impl Limiter {
    pub fn new(slots: usize) -> Self {
        Self { slots: Mutex::new(slots.max(1)), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> LimiterGuard<'_> {
        let mut slots = self.slots.lock().unwrap();
        while *slots == 0 {
            slots = self.freed.wait(slots).unwrap();
        }
        *slots -= 1;
        LimiterGuard { limiter: self }
    }
}

pub struct LimiterGuard<'a> {
    limiter: &'a Limiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        *self.limiter.slots.lock().unwrap() += 1;
        self.limiter.freed.notify_one();
    }
}

#[derive(Clone)]
pub struct Gateway {
    provider: Arc<dyn ChatProvider>,
    config: ProviderConfig,
    limiter: Option<Arc<Limiter>>,
    sends: Arc<AtomicUsize>,
    structured_calls: Arc<AtomicUsize>,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("provider", &self.provider.id()).finish()
    }
}

impl Gateway {
    /// Builds the provider named by `config.kind`.
    pub fn from_config(config: ProviderConfig) -> Result<Self, LlmError> {
        match config.kind {
            ProviderKind::Mock => Ok(Self::new(Arc::new(mock::MockProvider::new(config.seed)), config)),
            ProviderKind::Remote => {
                let provider = remote::RemoteProvider::new(&config)?;
                let limiter = Arc::new(Limiter::new(config.parallelism));
                Ok(Self::new(Arc::new(provider), config).with_limiter(limiter))
            }
        }
    }

    pub fn new(provider: Arc<dyn ChatProvider>, config: ProviderConfig) -> Self {
        Self {
            provider,
            config,
            limiter: None,
            sends: Arc::new(AtomicUsize::new(0)),
            structured_calls: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn with_limiter(mut self, limiter: Arc<Limiter>) -> Self {
        self.limiter = Some(limiter);
        self
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    pub fn provider_id(&self) -> String {
        self.provider.id()
    }

    /// Number of provider attempts made so far (including failed ones).
    pub fn send_count(&self) -> usize {
        self.sends.load(Ordering::SeqCst)
    }

    /// Number of `complete_structured` invocations so far.
    pub fn structured_call_count(&self) -> usize {
        self.structured_calls.load(Ordering::SeqCst)
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.check_roles()?;
        let chars = request.prompt_chars();
        if chars > self.config.max_prompt_chars {
            return Err(LlmError::PromptTooLong { chars, limit: self.config.max_prompt_chars });
        }
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                let delay = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            let started = Instant::now();
            let result = {
                let _slot = self.limiter.as_ref().map(|l| l.acquire());
                self.sends.fetch_add(1, Ordering::SeqCst);
                self.provider.send(request)
            };
            match result {
                Ok(text) if !text.trim().is_empty() => {
                    return Ok(ChatResponse {
                        text,
                        provider_id: self.provider.id(),
                        latency_ms: started.elapsed().as_millis() as u64,
                    })
                }
                Ok(_) => last = "empty response".into(),
                Err(AttemptError::Transient(reason)) => {
                    log::debug!("[{}] attempt {} failed: {reason}", request.tag, attempt + 1);
                    last = reason;
                }
                Err(AttemptError::Fatal(e)) => return Err(e),
            }
        }
        Err(LlmError::ProviderUnavailable { attempts, reason: last })
    }

    /// Runs a structured exchange: at most `max_retries` answers (minimum one),
    /// each invalid answer followed by a repair turn explaining the problem.
    pub fn complete_structured(&self, request: &ChatRequest, expected: &Expected) -> Result<Structured, LlmError> {
        self.structured_calls.fetch_add(1, Ordering::SeqCst);
        let answers = self.config.max_retries.max(1);
        let mut convo = request.clone();
        let mut last_reason = String::new();
        let mut last_raw = String::new();
        for answer in 0..answers {
            let response = match self.complete(&convo) {
                Ok(r) => r,
                Err(LlmError::ProviderUnavailable { reason, .. }) => {
                    return Err(LlmError::MalformedOutput { attempts: answer + 1, reason, raw: last_raw })
                }
                Err(e) => return Err(e),
            };
            match structured::parse_structured(&response.text, expected) {
                Ok(parsed) => return Ok(parsed),
                Err(reason) => {
                    log::debug!("[{}] invalid structured answer: {reason}", request.tag);
                    convo.turns.push(ChatTurn { role: Role::Assistant, text: response.text.clone() });
                    convo.turns.push(ChatTurn {
                        role: Role::User,
                        text: format!(
                            "Your previous answer could not be used: {reason}. Reply again with only {}.",
                            expected.format_hint()
                        ),
                    });
                    last_reason = reason;
                    last_raw = response.text;
                }
            }
        }
        Err(LlmError::MalformedOutput { attempts: answers, reason: last_reason, raw: last_raw })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    struct Scripted {
        replies: Mutex<Vec<Result<String, AttemptError>>>,
    }

    impl ChatProvider for Scripted {
        fn id(&self) -> String {
            "scripted".into()
        }
        fn send(&self, _request: &ChatRequest) -> Result<String, AttemptError> {
            let mut r = self.replies.lock().unwrap();
            if r.is_empty() {
                Err(AttemptError::Transient("exhausted".into()))
            } else {
                r.remove(0)
            }
        }
    }

    fn gateway(replies: Vec<Result<String, AttemptError>>) -> Gateway {
        let config = ProviderConfig { backoff_ms: 0, ..ProviderConfig::default() };
        Gateway::new(Arc::new(Scripted { replies: Mutex::new(replies) }), config)
    }

    #[test]
    fn transient_failures_are_retried() {
        let gw = gateway(vec![
            Err(AttemptError::Transient("503".into())),
            Err(AttemptError::Transient("timeout".into())),
            Ok("hello".into()),
        ]);
        let resp = gw.complete(&ChatRequest::single("explain", "sys", "hi".into())).unwrap();
        assert_eq!(resp.text, "hello");
        assert_eq!(gw.send_count(), 3);
    }

    #[test]
    fn retries_exhaust() {
        let gw = gateway(vec![]);
        let err = gw.complete(&ChatRequest::single("explain", "sys", "hi".into())).unwrap_err();
        assert!(matches!(err, LlmError::ProviderUnavailable { attempts: 4, .. }));
    }

    #[test]
    fn too_long_prompt_is_never_sent() {
        let gw = gateway(vec![Ok("x".into())]);
        let mut req = ChatRequest::single("explain", "sys", "a".repeat(300_000));
        assert!(matches!(gw.complete(&req), Err(LlmError::PromptTooLong { .. })));
        assert_eq!(gw.send_count(), 0);
        req.turns.push(ChatTurn { role: Role::User, text: "x".into() });
        assert!(matches!(gw.complete(&req), Err(LlmError::InvalidRequest(_))));
    }

    #[test]
    fn repair_turn_fixes_bad_ids() {
        let gw = gateway(vec![Ok("```[3,9,2]```".into()), Ok("```[3,1,2]```".into())]);
        let exp = Expected::RankedIdList { candidates: vec![1, 2, 3] };
        let got = gw.complete_structured(&ChatRequest::single("rerank_prompt", "s", "p".into()), &exp).unwrap();
        assert_eq!(got, Structured::RankedIds(vec![3, 1, 2]));
        assert_eq!(gw.send_count(), 2);
    }

    #[test]
    fn three_bad_answers_are_malformed() {
        let bad = || Ok::<_, AttemptError>("```[9]```".to_string());
        let gw = gateway(vec![bad(), bad(), bad(), Ok("```[1]```".into())]);
        let exp = Expected::RankedIdList { candidates: vec![1] };
        let err = gw.complete_structured(&ChatRequest::single("rerank_prompt", "s", "p".into()), &exp).unwrap_err();
        match err {
            LlmError::MalformedOutput { attempts, raw, .. } => {
                assert_eq!(attempts, 3);
                assert_eq!(raw, "```[9]```");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn limiter_bounds_concurrency() {
        let limiter = Arc::new(Limiter::new(2));
        let active = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        std::thread::scope(|s| {
            for _ in 0..6 {
                let (limiter, active, peak) = (limiter.clone(), active.clone(), peak.clone());
                s.spawn(move || {
                    let _g = limiter.acquire();
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    active.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}

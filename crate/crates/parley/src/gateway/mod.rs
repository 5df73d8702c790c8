//! Uniform client layer over chat-completion, embedding, and judge calls.
//!
//! A [`Gateway`] owns one backend plus the per-provider concerns: the
//! in-flight limit, the retry policy, and the append-only wire log. Callers
//! never coordinate among themselves; many dialogue workers can share one
//! gateway.

mod http;
mod scripted;
mod wire_log;

pub use http::{build_wire_body, HttpChatBackend, HttpEmbedBackend};
pub use scripted::{load_script_dir, ScriptEntry, ScriptedChat, ScriptedEmbedder};
pub use wire_log::WireLog;

use serde::{Deserialize, Serialize};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;
use thiserror::Error;

/// One chat-completion request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_tokens < 1 || !self.temperature.is_finite() {
            return Err(GatewayError::InvalidRequest);
        }
        Ok(())
    }
}

/// Per-call defaults for one provider (model id and sampling settings).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatSettings {
    pub model_id: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl ChatSettings {
    pub fn request(&self, system: impl Into<String>, user: impl Into<String>) -> ChatRequest {
        ChatRequest {
            model_id: self.model_id.clone(),
            system: system.into(),
            user: user.into(),
            temperature: self.temperature,
            top_p: self.top_p,
            max_tokens: self.max_tokens,
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited after retries exhausted")]
    RateLimited,
    #[error("http error status {0}")]
    HttpError(u16),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("scripted provider exhausted: no canned response left for {0:?}")]
    ScriptExhausted(String),
    #[error("scripted response mismatch: expected request containing {expected:?}")]
    ScriptMismatch { expected: String },
    #[error("no balanced object found in reply")]
    NoObjectFound,
    #[error("embedding backend returned inconsistent vector lengths")]
    DimensionMismatch,
    #[error("invalid request parameters")]
    InvalidRequest,
}

impl GatewayError {
    fn retryable(&self) -> bool {
        matches!(
            self,
            Self::Timeout
                | Self::RateLimited
                | Self::Transport(_)
                | Self::HttpError(429)
                | Self::HttpError(500..=599)
        )
    }
}

/// Retry budget and backoff schedule; the last delay repeats when the
/// schedule is shorter than the budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_ms: Vec<u64>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, backoff_ms: vec![500, 1000, 2000] }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let ms = match self.backoff_ms.as_slice() {
            [] => 0,
            schedule => {
                let idx = (attempt as usize).min(schedule.len() - 1);
                schedule[idx]
            }
        };
        Duration::from_millis(ms)
    }
}

pub trait ChatBackend: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError>;
}

pub trait EmbedBackend: Send + Sync {
    fn embed(&self, model_id: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError>;
}

/// Counting semaphore bounding concurrently outstanding requests.
struct InFlightLimit {
    available: Mutex<usize>,
    signal: Condvar,
}

impl InFlightLimit {
    fn new(max: usize) -> Self {
        Self { available: Mutex::new(max.max(1)), signal: Condvar::new() }
    }

    fn acquire(&self) -> InFlightPermit<'_> {
        let mut available = self.available.lock().unwrap();
        while *available == 0 {
            available = self.signal.wait(available).unwrap();
        }
        *available -= 1;
        InFlightPermit { limit: self }
    }
}

struct InFlightPermit<'a> {
    limit: &'a InFlightLimit,
}

impl Drop for InFlightPermit<'_> {
    fn drop(&mut self) {
        *self.limit.available.lock().unwrap() += 1;
        self.limit.signal.notify_one();
    }
}

/// Chat gateway for one provider.
pub struct Gateway {
    provider: String,
    backend: Arc<dyn ChatBackend>,
    limit: InFlightLimit,
    retry: RetryPolicy,
    log: Option<Arc<WireLog>>,
}

impl Gateway {
    pub fn new(
        provider: impl Into<String>,
        backend: Arc<dyn ChatBackend>,
        max_in_flight: usize,
        retry: RetryPolicy,
        log: Option<Arc<WireLog>>,
    ) -> Self {
        Self {
            provider: provider.into(),
            backend,
            limit: InFlightLimit::new(max_in_flight),
            retry,
            log,
        }
    }

    /// Sends one chat request, retrying transient failures per policy.
    /// A request that returned successfully is never re-sent.
    pub fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        req.validate()?;
        let _permit = self.limit.acquire();
        let mut attempt = 0u32;
        let outcome = loop {
            match self.backend.chat(req) {
                Ok(reply) => break Ok(reply),
                Err(err) if err.retryable() && attempt < self.retry.max_retries => {
                    std::thread::sleep(self.retry.delay(attempt));
                    attempt += 1;
                }
                Err(err) => break Err(err),
            }
        };
        if let Some(log) = &self.log {
            log.record(&self.provider, req, &outcome, attempt + 1);
        }
        outcome
    }

    /// Judge entry point: forces temperature 0, then parses the first
    /// balanced object out of the reply for caller-side schema validation.
    pub fn judge(&self, req: &ChatRequest) -> Result<serde_json::Value, GatewayError> {
        let mut req = req.clone();
        req.temperature = 0.0;
        let reply = self.chat(&req)?;
        extract_object(&reply)
    }
}

/// Parses the first balanced object in `reply` as JSON.
pub fn extract_object(reply: &str) -> Result<serde_json::Value, GatewayError> {
    let object = crate::action::first_balanced_object(reply).ok_or(GatewayError::NoObjectFound)?;
    serde_json::from_str(object).map_err(|_| GatewayError::NoObjectFound)
}

/// One provider bound to its per-call defaults.
#[derive(Clone)]
pub struct ChatEndpoint {
    pub gateway: Arc<Gateway>,
    pub settings: ChatSettings,
}

impl ChatEndpoint {
    pub fn new(gateway: Arc<Gateway>, settings: ChatSettings) -> Self {
        Self { gateway, settings }
    }

    pub fn chat(&self, system: impl Into<String>, user: impl Into<String>) -> Result<String, GatewayError> {
        self.gateway.chat(&self.settings.request(system, user))
    }

    pub fn judge(&self, system: impl Into<String>, user: impl Into<String>) -> Result<serde_json::Value, GatewayError> {
        self.gateway.judge(&self.settings.request(system, user))
    }
}

/// Embedding gateway for one provider. Output vectors are L2-normalized
/// here, regardless of backend behavior, so cosine similarity downstream
/// never depends on backend normalization conventions.
pub struct EmbedGateway {
    pub model_id: String,
    backend: Arc<dyn EmbedBackend>,
    limit: InFlightLimit,
    retry: RetryPolicy,
}

impl EmbedGateway {
    pub fn new(
        model_id: impl Into<String>,
        backend: Arc<dyn EmbedBackend>,
        max_in_flight: usize,
        retry: RetryPolicy,
    ) -> Self {
        Self {
            model_id: model_id.into(),
            backend,
            limit: InFlightLimit::new(max_in_flight),
            retry,
        }
    }

    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
        assert!(!texts.is_empty(), "embed requires at least one text");
        let _permit = self.limit.acquire();
        let mut attempt = 0u32;
        let mut vectors = loop {
            match self.backend.embed(&self.model_id, texts) {
                Ok(vectors) => break vectors,
                Err(err) if err.retryable() && attempt < self.retry.max_retries => {
                    std::thread::sleep(self.retry.delay(attempt));
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        };
        if vectors.len() != texts.len() {
            return Err(GatewayError::DimensionMismatch);
        }
        let dim = vectors.first().map(Vec::len).unwrap_or(0);
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(GatewayError::DimensionMismatch);
        }
        for vector in &mut vectors {
            normalize(vector);
        }
        Ok(vectors)
    }
}

fn normalize(vector: &mut [f64]) {
    let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in vector.iter_mut() {
            *x /= norm;
        }
    }
}

/// Cosine similarity of two same-length vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    struct CountingBackend {
        calls: AtomicUsize,
        fail_first: usize,
    }

    impl ChatBackend for CountingBackend {
        fn chat(&self, _req: &ChatRequest) -> Result<String, GatewayError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                Err(GatewayError::RateLimited)
            } else {
                Ok("ok".into())
            }
        }
    }

    fn request() -> ChatRequest {
        ChatRequest {
            model_id: "m".into(),
            system: String::new(),
            user: "hi".into(),
            temperature: 1.0,
            top_p: 0.95,
            max_tokens: 64,
        }
    }

    fn fast_retry(max_retries: u32) -> RetryPolicy {
        RetryPolicy { max_retries, backoff_ms: vec![0] }
    }

    #[test]
    fn success_is_never_resent() {
        let backend = Arc::new(CountingBackend { calls: AtomicUsize::new(0), fail_first: 0 });
        let gateway = Gateway::new("p", backend.clone(), 2, fast_retry(3), None);
        gateway.chat(&request()).unwrap();
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn transient_failures_retry_then_succeed() {
        let backend = Arc::new(CountingBackend { calls: AtomicUsize::new(0), fail_first: 2 });
        let gateway = Gateway::new("p", backend.clone(), 2, fast_retry(3), None);
        assert_eq!(gateway.chat(&request()).unwrap(), "ok");
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retries_exhausted_surfaces_error() {
        let backend = Arc::new(CountingBackend { calls: AtomicUsize::new(0), fail_first: 99 });
        let gateway = Gateway::new("p", backend, 2, fast_retry(2), None);
        assert!(matches!(gateway.chat(&request()), Err(GatewayError::RateLimited)));
    }

    struct ConcurrencyProbe {
        current: AtomicUsize,
        peak: AtomicUsize,
    }

    impl ChatBackend for ConcurrencyProbe {
        fn chat(&self, _req: &ChatRequest) -> Result<String, GatewayError> {
            let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(10));
            self.current.fetch_sub(1, Ordering::SeqCst);
            Ok("ok".into())
        }
    }

    #[test]
    fn in_flight_limit_is_enforced() {
        let probe =
            Arc::new(ConcurrencyProbe { current: AtomicUsize::new(0), peak: AtomicUsize::new(0) });
        let gateway =
            Arc::new(Gateway::new("p", probe.clone(), 2, RetryPolicy::default(), None));
        std::thread::scope(|scope| {
            for _ in 0..8 {
                let gateway = Arc::clone(&gateway);
                scope.spawn(move || gateway.chat(&request()).unwrap());
            }
        });
        assert!(probe.peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn judge_forces_temperature_zero_and_parses_object() {
        struct TempAssert;
        impl ChatBackend for TempAssert {
            fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
                assert_eq!(req.temperature, 0.0);
                Ok("reasoning first {\"score\": 1}".into())
            }
        }
        let gateway = Gateway::new("judge", Arc::new(TempAssert), 1, fast_retry(0), None);
        let value = gateway.judge(&request()).unwrap();
        assert_eq!(value["score"], 1);
    }

    #[test]
    fn judge_reply_without_object_errors() {
        struct Prose;
        impl ChatBackend for Prose {
            fn chat(&self, _req: &ChatRequest) -> Result<String, GatewayError> {
                Ok("Score: fine".into())
            }
        }
        let gateway = Gateway::new("judge", Arc::new(Prose), 1, fast_retry(0), None);
        assert!(matches!(gateway.judge(&request()), Err(GatewayError::NoObjectFound)));
    }

    struct StaticEmbed(Vec<Vec<f64>>);
    impl EmbedBackend for StaticEmbed {
        fn embed(&self, _m: &str, _texts: &[String]) -> Result<Vec<Vec<f64>>, GatewayError> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn embeddings_are_normalized() {
        let gateway = EmbedGateway::new(
            "e",
            Arc::new(StaticEmbed(vec![vec![3.0, 4.0]])),
            1,
            fast_retry(0),
        );
        let out = gateway.embed(&["a".into()]).unwrap();
        let norm = out[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }

    #[test]
    fn identical_texts_have_cosine_one() {
        let gateway = EmbedGateway::new(
            "e",
            Arc::new(StaticEmbed(vec![vec![1.0, 2.0, 2.0], vec![1.0, 2.0, 2.0]])),
            1,
            fast_retry(0),
        );
        let out = gateway.embed(&["x".into(), "x".into()]).unwrap();
        assert!((cosine(&out[0], &out[1]) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn inconsistent_dimensions_error() {
        let gateway = EmbedGateway::new(
            "e",
            Arc::new(StaticEmbed(vec![vec![1.0, 0.0], vec![1.0]])),
            1,
            fast_retry(0),
        );
        assert!(matches!(
            gateway.embed(&["a".into(), "b".into()]),
            Err(GatewayError::DimensionMismatch)
        ));
    }
}

//! JSON transports to the four external providers.
//!
//! Every provider call is one JSON request/response exchange on a named
//! [`Endpoint`]. HTTP, the built-in mock, and the record/replay wrappers all
//! implement [`Transport`], so the typed clients in [`crate::providers`] are
//! oblivious to where answers come from.

use std::fmt;
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    /// `{"texts": [str]}` -> `{"vectors": [[number]]}`
    Embed,
    /// `{"input", "max_tokens", "temperature", "model"?}` -> `{"output"}`
    Generate,
    /// `{"examples": [{"input", "target"}], "epochs", "learning_rate"}` -> `{"revision"}`
    Finetune,
    /// `{"input", "output"}` -> `{"logits": [number]}`
    Score,
    /// `{"messages": [{"role", "content"}], "temperature", "model"?}` -> `{"content"}`
    Chat,
}

impl Endpoint {
    pub const ALL: [Endpoint; 5] = [
        Endpoint::Embed,
        Endpoint::Generate,
        Endpoint::Finetune,
        Endpoint::Score,
        Endpoint::Chat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Endpoint::Embed => "embed",
            Endpoint::Generate => "generate",
            Endpoint::Finetune => "finetune",
            Endpoint::Score => "score",
            Endpoint::Chat => "chat",
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderErrorKind {
    Timeout,
    Network,
    Status(u16),
    Auth,
    Decode,
    Replay,
    Config,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{endpoint} provider: {message}")]
pub struct ProviderError {
    pub endpoint: Endpoint,
    pub kind: ProviderErrorKind,
    pub message: String,
}

impl ProviderError {
    pub fn new(endpoint: Endpoint, kind: ProviderErrorKind, message: impl Into<String>) -> Self {
        ProviderError {
            endpoint,
            kind,
            message: message.into(),
        }
    }

    pub fn decode(endpoint: Endpoint, message: impl Into<String>) -> Self {
        Self::new(endpoint, ProviderErrorKind::Decode, message)
    }

    /// True for failures that say the provider itself is unavailable rather
    /// than that one request was bad.
    pub fn is_outage(&self) -> bool {
        match self.kind {
            ProviderErrorKind::Timeout | ProviderErrorKind::Network => true,
            ProviderErrorKind::Status(code) => matches!(code, 429 | 502 | 503 | 504),
            _ => false,
        }
    }

    pub fn is_retryable(&self) -> bool {
        match self.kind {
            ProviderErrorKind::Timeout | ProviderErrorKind::Network => true,
            ProviderErrorKind::Status(code) => code == 429 || code >= 500,
            _ => false,
        }
    }
}

pub trait Transport: Send + Sync {
    fn call(&self, endpoint: Endpoint, request: &Value) -> Result<Value, ProviderError>;

    fn health(&self, _endpoint: Endpoint) -> Result<(), ProviderError> {
        Ok(())
    }
}

impl<T: Transport + ?Sized> Transport for std::sync::Arc<T> {
    fn call(&self, endpoint: Endpoint, request: &Value) -> Result<Value, ProviderError> {
        (**self).call(endpoint, request)
    }

    fn health(&self, endpoint: Endpoint) -> Result<(), ProviderError> {
        (**self).health(endpoint)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay_ms: 200,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: u32) -> Self {
        RetryPolicy {
            attempts,
            base_delay_ms: 0,
        }
    }

    /// Runs `f` up to `attempts` times, doubling the delay after each
    /// retryable failure.
    pub fn run<T>(
        &self,
        mut f: impl FnMut() -> Result<T, ProviderError>,
    ) -> Result<T, ProviderError> {
        let mut delay = self.base_delay_ms;
        let mut attempt = 1;
        loop {
            match f() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.attempts.max(1) => {
                    tracing::debug!(error = %e, attempt, "retrying provider call");
                    if delay > 0 {
                        thread::sleep(Duration::from_millis(delay));
                    }
                    delay = delay.saturating_mul(2);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Token bucket shared by all threads issuing requests.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    state: Mutex<(f64, Instant)>,
}

impl TokenBucket {
    pub fn new(per_second: f64, burst: u32) -> Self {
        let capacity = f64::from(burst.max(1));
        TokenBucket {
            rate: per_second,
            capacity,
            state: Mutex::new((capacity, Instant::now())),
        }
    }

    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut st = self.state.lock().expect("token bucket poisoned");
                let now = Instant::now();
                let refill = now.duration_since(st.1).as_secs_f64() * self.rate;
                st.0 = (st.0 + refill).min(self.capacity);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                (1.0 - st.0) / self.rate
            };
            thread::sleep(Duration::from_secs_f64(wait));
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub health_url: Option<String>,
}

/// Blocking HTTP transport with bearer-token auth.
pub struct HttpTransport {
    agent: ureq::Agent,
    endpoints: Vec<(Endpoint, EndpointConfig)>,
    limiter: Option<TokenBucket>,
}

impl HttpTransport {
    pub fn new(
        endpoints: Vec<(Endpoint, EndpointConfig)>,
        timeout: Duration,
        limiter: Option<TokenBucket>,
    ) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport {
            agent,
            endpoints,
            limiter,
        }
    }

    fn endpoint(&self, endpoint: Endpoint) -> Result<&EndpointConfig, ProviderError> {
        self.endpoints
            .iter()
            .find(|(e, _)| *e == endpoint)
            .map(|(_, c)| c)
            .ok_or_else(|| {
                ProviderError::new(
                    endpoint,
                    ProviderErrorKind::Config,
                    "no endpoint configured",
                )
            })
    }

    fn map_err(endpoint: Endpoint, e: ureq::Error) -> ProviderError {
        let kind = match &e {
            ureq::Error::Timeout(_) => ProviderErrorKind::Timeout,
            ureq::Error::StatusCode(code) => ProviderErrorKind::Status(*code),
            ureq::Error::Json(_) => ProviderErrorKind::Decode,
            _ => ProviderErrorKind::Network,
        };
        ProviderError::new(endpoint, kind, e.to_string())
    }

    fn check_status(endpoint: Endpoint, status: u16, body: &str) -> Result<(), ProviderError> {
        match status {
            200..=299 => Ok(()),
            401 | 403 => Err(ProviderError::new(
                endpoint,
                ProviderErrorKind::Auth,
                format!("HTTP {status}: {body}"),
            )),
            _ => Err(ProviderError::new(
                endpoint,
                ProviderErrorKind::Status(status),
                format!("HTTP {status}: {body}"),
            )),
        }
    }
}

impl Transport for HttpTransport {
    fn call(&self, endpoint: Endpoint, request: &Value) -> Result<Value, ProviderError> {
        let cfg = self.endpoint(endpoint)?;
        if let Some(l) = &self.limiter {
            l.acquire();
        }
        let mut req = self.agent.post(&cfg.url);
        if let Some(token) = &cfg.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(request)
            .map_err(|e| Self::map_err(endpoint, e))?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Self::map_err(endpoint, e))?;
        Self::check_status(endpoint, status, &body)?;
        serde_json::from_str(&body).map_err(|e| ProviderError::decode(endpoint, e.to_string()))
    }

    fn health(&self, endpoint: Endpoint) -> Result<(), ProviderError> {
        let cfg = self.endpoint(endpoint)?;
        let Some(url) = &cfg.health_url else {
            return Ok(());
        };
        let mut resp = self
            .agent
            .get(url)
            .call()
            .map_err(|e| Self::map_err(endpoint, e))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().unwrap_or_default();
        Self::check_status(endpoint, status, &body)
    }
}

//! Adapter for OpenAI-compatible chat-completion endpoints, reduced to the
//! `(prompt, temperature) -> first output token` interface.
//!
//! Requests carry a single user message, no system prompt, and no seed unless
//! one is configured. Concurrency per endpoint is capped by a semaphore;
//! transient failures are retried with capped exponential backoff using the
//! exact same request body.

use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Semaphore;
use tracing::{debug, warn};

use crate::source::{SourceError, TokenSource, EMPTY_TOKEN};

/// Combined input + output price ceiling, per million tokens.
pub const MAX_PRICE_PER_MILLION: f64 = 30.0;
/// Largest acceptable prompt-token count for a single-letter probe.
pub const MAX_PROBE_INPUT_TOKENS: u64 = 10;
/// Largest acceptable completion-token count for the probe.
pub const MAX_PROBE_OUTPUT_TOKENS: u64 = 1;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("request failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint rejected the request ({status}): {message}")]
    Config { status: u16, message: String },
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("environment variable {0} is not set")]
    MissingCredential(String),
    #[error("failed to read endpoint config {path}: {message}")]
    ConfigFile { path: String, message: String },
    #[error("failed to build HTTP client: {0}")]
    Build(String),
}

impl From<ClientError> for SourceError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Transport { .. } => SourceError::Retriable(e.to_string()),
            ClientError::Protocol(_) => SourceError::Protocol(e.to_string()),
            _ => SourceError::Fatal(e.to_string()),
        }
    }
}

fn default_output_token_index() -> u32 {
    1
}
fn default_concurrency() -> usize {
    4
}
fn default_retry_limit() -> u32 {
    3
}
fn default_timeout_secs() -> f64 {
    30.0
}
fn default_backoff_base_ms() -> u64 {
    250
}
fn default_backoff_cap_ms() -> u64 {
    8_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// API root, e.g. `https://openrouter.ai/api/v1`; `/chat/completions` is appended.
    pub base_url: String,
    pub model_id: String,
    /// Environment variable holding the bearer token. No auth header when absent.
    #[serde(default)]
    pub auth_token_env: Option<String>,
    #[serde(default)]
    pub default_temperature: f64,
    /// Which generated token is the observation (1 = first). Also the
    /// output-token limit sent with each request.
    #[serde(default = "default_output_token_index")]
    pub output_token_index: u32,
    #[serde(default = "default_concurrency")]
    pub max_concurrent_requests: usize,
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: f64,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_cap_ms")]
    pub backoff_cap_ms: u64,
    /// USD per million input tokens.
    #[serde(default)]
    pub price_in: f64,
    /// USD per million output tokens.
    #[serde(default)]
    pub price_out: f64,
    /// Sent as the `seed` field only when set.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_id: model_id.into(),
            auth_token_env: None,
            default_temperature: 0.0,
            output_token_index: default_output_token_index(),
            max_concurrent_requests: default_concurrency(),
            retry_limit: default_retry_limit(),
            timeout_secs: default_timeout_secs(),
            backoff_base_ms: default_backoff_base_ms(),
            backoff_cap_ms: default_backoff_cap_ms(),
            price_in: 0.0,
            price_out: 0.0,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.output_token_index < 1 {
            return Err(ClientError::InvalidRequest("output_token_index must be >= 1".into()));
        }
        if self.max_concurrent_requests < 1 {
            return Err(ClientError::InvalidRequest("max_concurrent_requests must be >= 1".into()));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(ClientError::InvalidRequest("timeout_secs must be positive".into()));
        }
        if self.price_in < 0.0 || self.price_out < 0.0 {
            return Err(ClientError::InvalidRequest("prices must be nonnegative".into()));
        }
        Ok(())
    }

    /// Identifies the endpoint in stored references and histories.
    pub fn fingerprint(&self) -> String {
        format!("{}#{}", self.base_url.trim_end_matches('/'), self.model_id)
    }

    /// Reads a TOML file holding either one endpoint table or an
    /// `[[endpoints]]` array; returns all endpoints it lists.
    pub fn load_all(path: &Path) -> Result<Vec<Self>, ClientError> {
        let err = |message: String| ClientError::ConfigFile {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;

        #[derive(Deserialize)]
        struct Many {
            endpoints: Vec<EndpointConfig>,
        }
        let configs = match toml::from_str::<Many>(&text) {
            Ok(m) => m.endpoints,
            Err(_) => vec![toml::from_str::<EndpointConfig>(&text).map_err(|e| err(e.to_string()))?],
        };
        for c in &configs {
            c.validate()?;
        }
        Ok(configs)
    }

    /// Like [`load_all`](Self::load_all) but requires exactly one endpoint.
    pub fn load(path: &Path) -> Result<Self, ClientError> {
        let mut all = Self::load_all(path)?;
        if all.len() != 1 {
            return Err(ClientError::ConfigFile {
                path: path.display().to_string(),
                message: format!("expected one endpoint, found {}", all.len()),
            });
        }
        Ok(all.remove(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Usage {
    pub input_tokens: u64,
    pub output_tokens: u64,
    #[serde(with = "duration_secs")]
    pub latency: Duration,
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_secs_f64(f64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenObservation {
    pub token: String,
    pub usage: Usage,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageTotals {
    pub requests: u64,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<ResponseUsage>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    message: Option<ResponseMessage>,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ResponseUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

/// Async chat-completions client for one endpoint. Cheap to clone; clones
/// share the concurrency gate and usage counters.
#[derive(Clone)]
pub struct ChatClient {
    config: Arc<EndpointConfig>,
    http: reqwest::Client,
    url: String,
    auth: Option<String>,
    gate: Arc<Semaphore>,
    totals: Arc<Mutex<UsageTotals>>,
}

impl ChatClient {
    pub fn new(config: EndpointConfig) -> Result<Self, ClientError> {
        config.validate()?;
        let auth = match &config.auth_token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| ClientError::MissingCredential(var.clone()))?),
            None => None,
        };
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| ClientError::Build(e.to_string()))?;
        Ok(Self {
            url: format!("{}/chat/completions", config.base_url.trim_end_matches('/')),
            gate: Arc::new(Semaphore::new(config.max_concurrent_requests)),
            config: Arc::new(config),
            http,
            auth,
            totals: Arc::new(Mutex::new(UsageTotals::default())),
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    pub fn usage_totals(&self) -> UsageTotals {
        *self.totals.lock().expect("usage lock")
    }

    fn request_body(&self, prompt: &str, temperature: f64) -> Result<Vec<u8>, ClientError> {
        if prompt.is_empty() {
            return Err(ClientError::InvalidRequest("prompt must be nonempty".into()));
        }
        if !(temperature >= 0.0 && temperature.is_finite()) {
            return Err(ClientError::InvalidRequest(format!("temperature {temperature}")));
        }
        let req = ChatRequest {
            model: &self.config.model_id,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature,
            max_tokens: self.config.output_token_index,
            seed: self.config.seed,
        };
        serde_json::to_vec(&req).map_err(|e| ClientError::InvalidRequest(e.to_string()))
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .config
            .backoff_base_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.config.backoff_cap_ms);
        Duration::from_millis(ms)
    }

    /// Sends one completion request and returns the observed token.
    ///
    /// An empty completion is reported as [`EMPTY_TOKEN`]. When
    /// `output_token_index > 1` the observation is the full returned text of
    /// that many tokens; with the earlier tokens fixed this compares the same
    /// supports as the last token alone.
    pub async fn query_token(&self, prompt: &str, temperature: f64) -> Result<TokenObservation, ClientError> {
        let body = self.request_body(prompt, temperature)?;
        let _permit = self.gate.acquire().await.expect("semaphore never closed");

        let mut attempt = 0u32;
        loop {
            let started = Instant::now();
            let mut req = self
                .http
                .post(&self.url)
                .header(reqwest::header::CONTENT_TYPE, "application/json")
                .body(body.clone());
            if let Some(token) = &self.auth {
                req = req.bearer_auth(token);
            }
            let outcome: Result<std::convert::Infallible, String> = match req.send().await {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let bytes = resp.bytes().await;
                        match bytes {
                            Ok(b) => return self.parse_response(&b, started.elapsed()),
                            Err(e) => Err(e.to_string()),
                        }
                    } else if status.as_u16() == 408 || status.as_u16() == 429 || status.is_server_error() {
                        Err(format!("HTTP {status}"))
                    } else {
                        let message = resp.text().await.unwrap_or_default();
                        return Err(ClientError::Config {
                            status: status.as_u16(),
                            message,
                        });
                    }
                }
                Err(e) => Err(e.to_string()),
            };
            let Err(message) = outcome;
            if attempt >= self.config.retry_limit {
                return Err(ClientError::Transport {
                    attempts: attempt + 1,
                    message,
                });
            }
            let wait = self.backoff(attempt);
            debug!(attempt, ?wait, %message, "retrying request");
            tokio::time::sleep(wait).await;
            attempt += 1;
        }
    }

    fn parse_response(&self, bytes: &[u8], latency: Duration) -> Result<TokenObservation, ClientError> {
        let resp: ChatResponse = serde_json::from_slice(bytes).map_err(|e| ClientError::Protocol(e.to_string()))?;
        let choice = resp
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| ClientError::Protocol("response has no choices".into()))?;
        let content = choice.message.and_then(|m| m.content).unwrap_or_default();
        let token = if content.is_empty() {
            EMPTY_TOKEN.to_owned()
        } else {
            content
        };
        let usage = Usage {
            input_tokens: resp.usage.as_ref().map_or(0, |u| u.prompt_tokens),
            output_tokens: resp.usage.as_ref().map_or(0, |u| u.completion_tokens),
            latency,
        };
        {
            let mut t = self.totals.lock().expect("usage lock");
            t.requests += 1;
            t.input_tokens += usage.input_tokens;
            t.output_tokens += usage.output_tokens;
        }
        Ok(TokenObservation { token, usage })
    }

    /// Fans `n` requests for the same prompt out under the concurrency cap.
    pub async fn query_many(&self, prompt: &str, temperature: f64, n: usize) -> Vec<Result<TokenObservation, ClientError>> {
        futures::future::join_all((0..n).map(|_| self.query_token(prompt, temperature))).await
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EligibilityReport {
    pub fingerprint: String,
    pub price_within_limit: bool,
    pub not_free: bool,
    pub probe_within_limits: bool,
    pub probe_usage: Option<Usage>,
    pub eligible: bool,
    pub reasons: Vec<String>,
}

/// Applies the endpoint-selection rules to known prices and a probe result.
pub fn evaluate_eligibility(config: &EndpointConfig, probe: Result<Usage, String>) -> EligibilityReport {
    let total = config.price_in + config.price_out;
    let mut reasons = Vec::new();
    let price_within_limit = total <= MAX_PRICE_PER_MILLION;
    if !price_within_limit {
        reasons.push(format!("price {total} per million tokens exceeds {MAX_PRICE_PER_MILLION}"));
    }
    let not_free = total > 0.0;
    if !not_free {
        reasons.push("free endpoint".to_owned());
    }
    let (probe_within_limits, probe_usage) = match probe {
        Ok(u) => {
            let ok = u.input_tokens <= MAX_PROBE_INPUT_TOKENS && u.output_tokens <= MAX_PROBE_OUTPUT_TOKENS;
            if u.input_tokens > MAX_PROBE_INPUT_TOKENS {
                reasons.push(format!(
                    "probe used {} input tokens (limit {MAX_PROBE_INPUT_TOKENS})",
                    u.input_tokens
                ));
            }
            if u.output_tokens > MAX_PROBE_OUTPUT_TOKENS {
                reasons.push(format!(
                    "probe produced {} output tokens (limit {MAX_PROBE_OUTPUT_TOKENS})",
                    u.output_tokens
                ));
            }
            (ok, Some(u))
        }
        Err(e) => {
            reasons.push(format!("probe failed: {e}"));
            (false, None)
        }
    };
    EligibilityReport {
        fingerprint: config.fingerprint(),
        price_within_limit,
        not_free,
        probe_within_limits,
        probe_usage,
        eligible: price_within_limit && not_free && probe_within_limits,
        reasons,
    }
}

/// Probes an endpoint with a single-letter prompt and applies the selection rules.
pub async fn screen_endpoint(client: &ChatClient, probe_prompt: &str) -> EligibilityReport {
    let probe = client
        .query_token(probe_prompt, client.config().default_temperature)
        .await
        .map(|o| o.usage)
        .map_err(|e| e.to_string());
    if let Err(e) = &probe {
        warn!(endpoint = %client.config().fingerprint(), error = %e, "probe failed");
    }
    evaluate_eligibility(client.config(), probe)
}

/// Synchronous [`TokenSource`] over a [`ChatClient`], driving its own runtime.
/// Must not be used from inside another tokio runtime.
pub struct BlockingClient {
    client: ChatClient,
    runtime: tokio::runtime::Runtime,
}

impl BlockingClient {
    pub fn new(config: EndpointConfig) -> Result<Self, ClientError> {
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()
            .map_err(|e| ClientError::Build(e.to_string()))?;
        Ok(Self {
            client: ChatClient::new(config)?,
            runtime,
        })
    }

    pub fn client(&self) -> &ChatClient {
        &self.client
    }

    pub fn query_token(&self, prompt: &str, temperature: f64) -> Result<TokenObservation, ClientError> {
        self.runtime.block_on(self.client.query_token(prompt, temperature))
    }

    pub fn screen(&self, probe_prompt: &str) -> EligibilityReport {
        self.runtime.block_on(screen_endpoint(&self.client, probe_prompt))
    }
}

impl TokenSource for BlockingClient {
    fn sample(&mut self, prompt: &str, temperature: f64, n: usize) -> Vec<Result<String, SourceError>> {
        self.runtime
            .block_on(self.client.query_many(prompt, temperature, n))
            .into_iter()
            .map(|r| r.map(|o| o.token).map_err(SourceError::from))
            .collect()
    }

    fn fingerprint(&self) -> String {
        self.client.config().fingerprint()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn usage(i: u64, o: u64) -> Usage {
        Usage {
            input_tokens: i,
            output_tokens: o,
            latency: Duration::ZERO,
        }
    }

    fn priced(pi: f64, po: f64) -> EndpointConfig {
        EndpointConfig {
            price_in: pi,
            price_out: po,
            ..EndpointConfig::new("http://localhost:1/v1", "m")
        }
    }

    #[test]
    fn eligibility_rules() {
        let r = evaluate_eligibility(&priced(0.38, 1.2), Ok(usage(3, 1)));
        assert!(r.eligible, "{r:?}");

        let r = evaluate_eligibility(&priced(20.0, 15.0), Ok(usage(3, 1)));
        assert!(!r.eligible && !r.price_within_limit && r.probe_within_limits);

        let r = evaluate_eligibility(&priced(0.38, 1.2), Ok(usage(14, 1)));
        assert!(!r.eligible && r.price_within_limit && !r.probe_within_limits);

        let r = evaluate_eligibility(&priced(0.0, 0.0), Ok(usage(3, 1)));
        assert!(!r.eligible && !r.not_free);

        let r = evaluate_eligibility(&priced(1.0, 1.0), Err("connection refused".into()));
        assert!(!r.eligible && r.reasons.iter().any(|s| s.contains("connection refused")));

        // boundary: exactly 30 is allowed
        assert!(evaluate_eligibility(&priced(10.0, 20.0), Ok(usage(10, 1))).eligible);
    }

    #[test]
    fn config_parsing_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let one = dir.path().join("one.toml");
        std::fs::write(
            &one,
            "base_url = \"https://example.org/v1/\"\nmodel_id = \"m\"\nprice_in = 0.38\nprice_out = 1.2\noutput_token_index = 2\n",
        )
        .unwrap();
        let c = EndpointConfig::load(&one).unwrap();
        assert_eq!(c.output_token_index, 2);
        assert_eq!(c.max_concurrent_requests, 4);
        assert_eq!(c.fingerprint(), "https://example.org/v1#m");

        let many = dir.path().join("many.toml");
        std::fs::write(
            &many,
            "[[endpoints]]\nbase_url = \"a\"\nmodel_id = \"x\"\n[[endpoints]]\nbase_url = \"b\"\nmodel_id = \"y\"\n",
        )
        .unwrap();
        assert_eq!(EndpointConfig::load_all(&many).unwrap().len(), 2);
        assert!(EndpointConfig::load(&many).is_err());

        let bad = dir.path().join("bad.toml");
        std::fs::write(&bad, "base_url = \"a\"\nmodel_id = \"x\"\noutput_token_index = 0\n").unwrap();
        assert!(matches!(EndpointConfig::load(&bad), Err(ClientError::InvalidRequest(_))));
    }

    #[test]
    fn request_body_shape() {
        let client = ChatClient::new(EndpointConfig::new("http://localhost:1/v1", "model-x")).unwrap();
        let body: serde_json::Value = serde_json::from_slice(&client.request_body("Hi", 0.0).unwrap()).unwrap();
        assert_eq!(
            body,
            serde_json::json!({
                "model": "model-x",
                "messages": [{"role": "user", "content": "Hi"}],
                "temperature": 0.0,
                "max_tokens": 1
            })
        );
        assert!(client.request_body("", 0.0).is_err());
        assert!(client.request_body("x", -1.0).is_err());

        let seeded = ChatClient::new(EndpointConfig {
            seed: Some(7),
            ..EndpointConfig::new("http://localhost:1/v1", "m")
        })
        .unwrap();
        let body: serde_json::Value = serde_json::from_slice(&seeded.request_body("Hi", 0.5).unwrap()).unwrap();
        assert_eq!(body["seed"], 7);
    }

    #[test]
    fn missing_credential_is_reported() {
        let cfg = EndpointConfig {
            auth_token_env: Some("B3IT_TEST_DEFINITELY_UNSET_VAR".into()),
            ..EndpointConfig::new("http://localhost:1/v1", "m")
        };
        assert!(matches!(ChatClient::new(cfg), Err(ClientError::MissingCredential(_))));
    }

    #[test]
    fn backoff_is_capped() {
        let client = ChatClient::new(EndpointConfig {
            backoff_base_ms: 100,
            backoff_cap_ms: 1000,
            ..EndpointConfig::new("http://localhost:1/v1", "m")
        })
        .unwrap();
        assert_eq!(client.backoff(0), Duration::from_millis(100));
        assert_eq!(client.backoff(3), Duration::from_millis(800));
        assert_eq!(client.backoff(4), Duration::from_millis(1000));
        assert_eq!(client.backoff(60), Duration::from_millis(1000));
    }
}

//! A uniform completion client over chat APIs plus the offline mock.
//!
//! Every sample is an independent request. Transient failures (HTTP 429,
//! 5xx, timeouts, connection errors) are retried with exponential backoff;
//! all requests to one provider pass through a shared per-minute limiter.

pub mod limit;
pub mod mock;
pub mod wire;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::prompting::RenderedPrompt;
use limit::{Backoff, Clock, RateLimiter, SystemClock};
use mock::{mock_respond, MockError, MockScript};

pub const DEFAULT_SAMPLING_TEMPERATURE: f64 = 0.7;
const OPENAI_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";
const ANTHROPIC_ENDPOINT: &str = "https://api.anthropic.com/v1/messages";
const EXCERPT: usize = 300;

#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("provider `{provider}` config: {message}")]
    Config { provider: String, message: String },
    #[error("provider `{provider}`: environment variable {var} is not set")]
    MissingApiKey { provider: String, var: String },
    #[error("provider `{provider}` rejected credentials (HTTP {status}): {excerpt}")]
    Auth {
        provider: String,
        status: u16,
        excerpt: String,
    },
    #[error("provider `{provider}` returned HTTP {status}: {excerpt}")]
    Http {
        provider: String,
        status: u16,
        excerpt: String,
    },
    #[error("provider `{provider}` gave up after {attempts} attempts: {last}")]
    Exhausted {
        provider: String,
        attempts: u32,
        last: String,
    },
    #[error("provider `{provider}` sent a malformed response: {message}")]
    Envelope { provider: String, message: String },
    #[error(transparent)]
    Mock(#[from] MockError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WireFormat {
    OpenaiChat,
    AnthropicMessages,
    Mock,
}

fn default_max_tokens() -> u32 {
    1024
}
fn default_timeout() -> u64 {
    120
}
fn default_retries() -> u32 {
    5
}
fn default_rpm() -> u32 {
    60
}
fn default_backoff() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub name: String,
    pub wire_format: WireFormat,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub model_id: String,
    #[serde(default)]
    pub api_key_env: String,
    /// Unset means 0.7 when sampling several outputs per note, 0 otherwise.
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default = "default_max_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_timeout")]
    pub request_timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_rpm")]
    pub rate_limit_rpm: u32,
    #[serde(default = "default_backoff")]
    pub backoff_base_secs: f64,
    /// Script for the mock wire format.
    #[serde(default)]
    pub mock_script: Option<PathBuf>,
}

impl ProviderConfig {
    pub fn mock(name: impl Into<String>, script: impl Into<PathBuf>) -> Self {
        Self {
            name: name.into(),
            wire_format: WireFormat::Mock,
            endpoint: String::new(),
            model_id: String::new(),
            api_key_env: String::new(),
            temperature: None,
            max_output_tokens: default_max_tokens(),
            request_timeout_secs: default_timeout(),
            max_retries: default_retries(),
            rate_limit_rpm: 6000,
            backoff_base_secs: default_backoff(),
            mock_script: Some(script.into()),
        }
    }

    pub fn temperature_for(&self, samples: usize) -> f64 {
        self.temperature.unwrap_or(if samples > 1 {
            DEFAULT_SAMPLING_TEMPERATURE
        } else {
            0.0
        })
    }

    pub fn endpoint_url(&self) -> &str {
        match (self.wire_format, self.endpoint.is_empty()) {
            (WireFormat::OpenaiChat, true) => OPENAI_ENDPOINT,
            (WireFormat::AnthropicMessages, true) => ANTHROPIC_ENDPOINT,
            _ => &self.endpoint,
        }
    }

    /// Checks the config for use with `samples` outputs per note.
    pub fn validate(&self, samples: usize) -> Result<(), ProviderError> {
        let fail = |message: &str| {
            Err(ProviderError::Config {
                provider: self.name.clone(),
                message: message.to_owned(),
            })
        };
        if self.name.trim().is_empty() {
            return fail("name is empty");
        }
        let temperature = self.temperature_for(samples);
        if temperature.is_nan() || temperature < 0.0 {
            return fail("temperature must be >= 0");
        }
        if samples > 1 && temperature <= 0.0 {
            return fail("temperature must be > 0 when sampling more than one output per note");
        }
        if self.max_output_tokens == 0 {
            return fail("max_output_tokens must be positive");
        }
        if self.rate_limit_rpm == 0 {
            return fail("rate_limit_rpm must be positive");
        }
        match self.wire_format {
            WireFormat::Mock if self.mock_script.is_none() => fail("mock provider needs mock_script"),
            WireFormat::Mock => Ok(()),
            _ if self.model_id.is_empty() => fail("model_id is empty"),
            _ if self.api_key_env.is_empty() => fail("api_key_env is empty"),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionRequest {
    pub prompt: RenderedPrompt,
    pub sample_count: usize,
    pub run_seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input_tokens: u64,
    pub output_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub raw_texts: Vec<String>,
    pub provider_name: String,
    pub latencies: Vec<Duration>,
    /// Retries spent per sample.
    pub retries: Vec<u32>,
    pub token_usage: Option<TokenUsage>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Timeouts and connection failures; retried.
    Transient(String),
    Fatal(String),
}

pub trait HttpTransport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new() -> Result<Self, TransportError> {
        reqwest::blocking::Client::builder()
            .build()
            .map(|client| Self { client })
            .map_err(|e| TransportError::Fatal(e.to_string()))
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
        timeout: Duration,
    ) -> Result<HttpReply, TransportError> {
        let mut req = self.client.post(url).timeout(timeout).json(body);
        for (k, v) in headers {
            req = req.header(k, v);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() || e.is_connect() || e.is_request() {
                TransportError::Transient(e.to_string())
            } else {
                TransportError::Fatal(e.to_string())
            }
        })?;
        let status = resp.status().as_u16();
        let body = resp
            .text()
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        Ok(HttpReply { status, body })
    }
}

fn excerpt(s: &str) -> String {
    s.chars().take(EXCERPT).collect()
}

enum Attempt {
    Done(String, Option<TokenUsage>),
    Retry(String),
}

/// A configured provider, shareable across threads.
pub struct Provider {
    config: ProviderConfig,
    transport: Option<Arc<dyn HttpTransport>>,
    clock: Arc<dyn Clock>,
    limiter: RateLimiter,
    script: Option<MockScript>,
    api_key: String,
}

impl Provider {
    /// Builds a provider from its config: loads the mock script or reads the
    /// API key from the environment.
    pub fn from_config(config: &ProviderConfig) -> Result<Self, ProviderError> {
        match config.wire_format {
            WireFormat::Mock => {
                let path = config.mock_script.as_ref().ok_or_else(|| ProviderError::Config {
                    provider: config.name.clone(),
                    message: "mock provider needs mock_script".into(),
                })?;
                let script = MockScript::load(path, &config.name)?;
                Ok(Self::mock(config.clone(), script))
            }
            _ => {
                let api_key = std::env::var(&config.api_key_env).map_err(|_| {
                    ProviderError::MissingApiKey {
                        provider: config.name.clone(),
                        var: config.api_key_env.clone(),
                    }
                })?;
                let transport = ReqwestTransport::new().map_err(|e| ProviderError::Config {
                    provider: config.name.clone(),
                    message: format!("{e:?}"),
                })?;
                Ok(Self::with_transport(
                    config.clone(),
                    Arc::new(transport),
                    Arc::new(SystemClock::default()),
                    api_key,
                ))
            }
        }
    }

    pub fn mock(config: ProviderConfig, script: MockScript) -> Self {
        Self {
            limiter: RateLimiter::new(config.rate_limit_rpm),
            config,
            transport: None,
            clock: Arc::new(SystemClock::default()),
            script: Some(script),
            api_key: String::new(),
        }
    }

    pub fn with_transport(
        config: ProviderConfig,
        transport: Arc<dyn HttpTransport>,
        clock: Arc<dyn Clock>,
        api_key: String,
    ) -> Self {
        Self {
            limiter: RateLimiter::new(config.rate_limit_rpm),
            config,
            transport: Some(transport),
            clock,
            script: None,
            api_key,
        }
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    /// Produces exactly `sample_count` outputs, or fails as a whole.
    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, ProviderError> {
        if request.sample_count == 0 {
            return Err(ProviderError::Config {
                provider: self.config.name.clone(),
                message: "sample_count must be at least 1".into(),
            });
        }
        let mut result = CompletionResult {
            raw_texts: Vec::with_capacity(request.sample_count),
            provider_name: self.config.name.clone(),
            latencies: Vec::with_capacity(request.sample_count),
            retries: Vec::with_capacity(request.sample_count),
            token_usage: None,
        };
        let temperature = self.config.temperature_for(request.sample_count);
        for i in 0..request.sample_count {
            let start = self.clock.now();
            let (text, retries, usage) = match &self.script {
                Some(script) => (
                    mock_respond(&request.prompt, request.run_seed + i as u64, script)?,
                    0,
                    None,
                ),
                None => self.send_with_retries(&request.prompt.text, temperature)?,
            };
            result.latencies.push(self.clock.now().saturating_sub(start));
            result.raw_texts.push(text);
            result.retries.push(retries);
            if let Some(u) = usage {
                let total = result.token_usage.get_or_insert_with(TokenUsage::default);
                total.input_tokens += u.input_tokens;
                total.output_tokens += u.output_tokens;
            }
        }
        Ok(result)
    }

    fn send_with_retries(
        &self,
        prompt: &str,
        temperature: f64,
    ) -> Result<(String, u32, Option<TokenUsage>), ProviderError> {
        let transport = self.transport.as_ref().expect("live provider has a transport");
        let req = wire::build_request(
            self.config.wire_format,
            &self.config.model_id,
            prompt,
            temperature,
            self.config.max_output_tokens,
            &self.api_key,
        );
        let backoff = Backoff {
            base: Duration::from_secs_f64(self.config.backoff_base_secs.max(0.0)),
        };
        let timeout = Duration::from_secs(self.config.request_timeout_secs);
        let mut attempt = 0u32;
        loop {
            self.limiter.acquire(self.clock.as_ref());
            let outcome = transport.post_json(self.config.endpoint_url(), &req.headers, &req.body, timeout);
            match self.classify(outcome)? {
                Attempt::Done(text, usage) => return Ok((text, attempt, usage)),
                Attempt::Retry(reason) if attempt < self.config.max_retries => {
                    log::debug!("{}: retry {} after {reason}", self.config.name, attempt + 1);
                    self.clock.sleep(backoff.delay(attempt));
                    attempt += 1;
                }
                Attempt::Retry(reason) => {
                    return Err(ProviderError::Exhausted {
                        provider: self.config.name.clone(),
                        attempts: attempt + 1,
                        last: reason,
                    })
                }
            }
        }
    }

    fn classify(&self, outcome: Result<HttpReply, TransportError>) -> Result<Attempt, ProviderError> {
        let provider = self.config.name.clone();
        let reply = match outcome {
            Ok(reply) => reply,
            Err(TransportError::Transient(msg)) => return Ok(Attempt::Retry(msg)),
            Err(TransportError::Fatal(msg)) => {
                return Err(ProviderError::Http {
                    provider,
                    status: 0,
                    excerpt: msg,
                })
            }
        };
        match reply.status {
            200..=299 => wire::extract_text(self.config.wire_format, &reply.body)
                .map(|(text, usage)| Attempt::Done(text, usage))
                .map_err(|message| ProviderError::Envelope { provider, message }),
            401 | 403 => Err(ProviderError::Auth {
                provider,
                status: reply.status,
                excerpt: excerpt(&reply.body),
            }),
            408 | 429 | 500..=599 => Ok(Attempt::Retry(format!("HTTP {}", reply.status))),
            status => Err(ProviderError::Http {
                provider,
                status,
                excerpt: excerpt(&reply.body),
            }),
        }
    }
}

/// One-shot convenience over [`Provider::from_config`].
pub fn complete(request: &CompletionRequest, config: &ProviderConfig) -> Result<CompletionResult, ProviderError> {
    config.validate(request.sample_count)?;
    Provider::from_config(config)?.complete(request)
}

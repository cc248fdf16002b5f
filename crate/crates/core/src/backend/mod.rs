//! Generation backends.
//!
//! A backend offers two capabilities: free-form sampling ([`LanguageModel::complete`])
//! and per-step next-token distributions ([`LanguageModel::next_token_distribution`]).
//! [`BackendHandle`] wraps a model with its role, a retry policy and an
//! in-flight request limit.

mod distribution;
mod limit;
mod mock;
mod remote;
mod retry;

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use distribution::{DistributionError, TokenDistribution, TokenProb, RESIDUAL_TOKEN_ID};
pub use limit::InFlightLimit;
pub use mock::{chunk_tokens, sha256_hex, token_id_for, CompletionRule, DistributionRule, MockBackend, MockScript, ReplyOrder};
pub use remote::{RemoteBackend, RemoteOptions};
pub use retry::RetryPolicy;

/// Environment variable consulted when no generator endpoint is given.
pub const BACKEND_URL_ENV: &str = "SPECFORGE_BACKEND_URL";
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Clone, Error)]
pub enum BackendError {
    #[error("transport error: {message}")]
    Transport { message: String, retriable: bool },
    #[error("backend refused the request: {0}")]
    Refused(String),
    #[error("prompt too long: {0}")]
    PromptTooLong(String),
    #[error("backend does not support {0}")]
    Unsupported(String),
    #[error("invalid backend response: {0}")]
    InvalidResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("mock script error: {0}")]
    Script(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted {
        attempts: usize,
        last: Box<BackendError>,
    },
}

impl BackendError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, BackendError::Transport { retriable: true, .. })
    }

    pub fn is_unsupported(&self) -> bool {
        matches!(self, BackendError::Unsupported(_))
    }
}

impl From<DistributionError> for BackendError {
    fn from(e: DistributionError) -> Self {
        BackendError::InvalidResponse(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    /// Deterministic argmax decoding; sent on the wire as temperature 0.
    #[serde(default)]
    pub greedy: bool,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 0.98,
            max_tokens: 1024,
            stop_sequences: Vec::new(),
            greedy: false,
        }
    }
}

impl SamplingParams {
    pub fn greedy(max_tokens: usize) -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            max_tokens,
            stop_sequences: Vec::new(),
            greedy: true,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(format!("temperature must be > 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        if self.max_tokens == 0 {
            return Err("max_tokens must be at least 1".into());
        }
        Ok(())
    }
}

/// Cuts `text` before the earliest occurrence of any stop sequence.
pub fn truncate_at_stop<'a>(text: &'a str, stops: &[String]) -> &'a str {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min();
    match cut {
        Some(i) => &text[..i],
        None => text,
    }
}

/// A generation model. Implementations must be safe to call from several
/// threads at once.
pub trait LanguageModel: Send + Sync {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<String, BackendError>;

    /// Distribution over the next token after `prefix`. `step_index` of the
    /// result is 0; decoders stamp their own step.
    fn next_token_distribution(&self, prefix: &str) -> Result<TokenDistribution, BackendError>;

    fn supports_distributions(&self) -> bool;

    /// How many candidates a distribution lists before the residual, when
    /// the backend truncates.
    fn distribution_top_k(&self) -> Option<usize> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Base,
    Aligned,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Remote(String),
    Mock(PathBuf),
    InProcess,
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Remote(url) => f.write_str(url),
            Endpoint::Mock(path) => write!(f, "mock:{}", path.display()),
            Endpoint::InProcess => f.write_str("in-process"),
        }
    }
}

impl Endpoint {
    /// Parses `mock:<path>` or an `http(s)://` URL.
    pub fn parse(spec: &str) -> Result<Self, BackendError> {
        if let Some(path) = spec.strip_prefix("mock:") {
            if path.is_empty() {
                return Err(BackendError::InvalidRequest("mock: needs a script path".into()));
            }
            Ok(Endpoint::Mock(PathBuf::from(path)))
        } else if spec.starts_with("http://") || spec.starts_with("https://") {
            Ok(Endpoint::Remote(spec.trim_end_matches('/').to_string()))
        } else {
            Err(BackendError::InvalidRequest(format!(
                "backend must be an http(s) URL or mock:<path>, got {spec:?}"
            )))
        }
    }
}

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub remote: RemoteOptions,
}

impl Default for ClientOptions {
    fn default() -> Self {
        Self {
            retry: RetryPolicy::default(),
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            remote: RemoteOptions::default(),
        }
    }
}

/// A model bound to an endpoint and a role. Cheap to clone; clones share the
/// in-flight limit.
#[derive(Clone)]
pub struct BackendHandle {
    endpoint: Endpoint,
    label: String,
    role: Role,
    model: Arc<dyn LanguageModel>,
    retry: RetryPolicy,
    limit: Arc<InFlightLimit>,
}

impl fmt::Debug for BackendHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendHandle")
            .field("endpoint", &self.endpoint)
            .field("label", &self.label)
            .field("role", &self.role)
            .finish()
    }
}

impl BackendHandle {
    pub fn connect(spec: &str, role: Role, options: &ClientOptions) -> Result<Self, BackendError> {
        let endpoint = Endpoint::parse(spec)?;
        let model: Arc<dyn LanguageModel> = match &endpoint {
            Endpoint::Mock(path) => Arc::new(MockBackend::from_file(path)?),
            Endpoint::Remote(url) => Arc::new(RemoteBackend::new(url, options.remote.clone())),
            Endpoint::InProcess => unreachable!("parse never yields InProcess"),
        };
        let label = match &endpoint {
            Endpoint::Mock(p) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "mock".into()),
            Endpoint::Remote(url) => url.clone(),
            Endpoint::InProcess => unreachable!(),
        };
        Ok(Self {
            endpoint,
            label,
            role,
            model,
            retry: options.retry.clone(),
            limit: Arc::new(InFlightLimit::new(options.max_in_flight)),
        })
    }

    pub fn from_model(label: impl Into<String>, role: Role, model: Arc<dyn LanguageModel>) -> Self {
        Self {
            endpoint: Endpoint::InProcess,
            label: label.into(),
            role,
            model,
            retry: RetryPolicy::default(),
            limit: Arc::new(InFlightLimit::new(DEFAULT_MAX_IN_FLIGHT)),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.limit = Arc::new(InFlightLimit::new(n));
        self
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn supports_distributions(&self) -> bool {
        self.model.supports_distributions()
    }

    pub fn distribution_top_k(&self) -> Option<usize> {
        self.model.distribution_top_k()
    }

    pub fn max_in_flight(&self) -> usize {
        self.limit.capacity()
    }

    /// Samples a continuation, cut at the first stop sequence.
    pub fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<String, BackendError> {
        if prompt.is_empty() {
            return Err(BackendError::InvalidRequest("prompt is empty".into()));
        }
        params.validate().map_err(BackendError::InvalidRequest)?;
        let text = self.retry.run(|| {
            let _permit = self.limit.acquire();
            self.model.complete(prompt, params)
        })?;
        Ok(truncate_at_stop(&text, &params.stop_sequences).to_string())
    }

    pub fn next_token_distribution(&self, prefix: &str) -> Result<TokenDistribution, BackendError> {
        if prefix.is_empty() {
            return Err(BackendError::InvalidRequest("prefix is empty".into()));
        }
        if !self.model.supports_distributions() {
            return Err(BackendError::Unsupported(format!(
                "next-token distributions ({})",
                self.endpoint
            )));
        }
        self.retry.run(|| {
            let _permit = self.limit.acquire();
            self.model.next_token_distribution(prefix)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::time::Duration;

    struct Flaky {
        failures: usize,
        calls: AtomicUsize,
        retriable: bool,
    }

    impl LanguageModel for Flaky {
        fn complete(&self, _: &str, _: &SamplingParams) -> Result<String, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(BackendError::Transport {
                    message: format!("boom {n}"),
                    retriable: self.retriable,
                })
            } else {
                Ok("ok then stop here".into())
            }
        }

        fn next_token_distribution(&self, _: &str) -> Result<TokenDistribution, BackendError> {
            unreachable!()
        }

        fn supports_distributions(&self) -> bool {
            false
        }
    }

    fn flaky(failures: usize, retriable: bool) -> (BackendHandle, Arc<Flaky>) {
        let model = Arc::new(Flaky {
            failures,
            calls: AtomicUsize::new(0),
            retriable,
        });
        let handle = BackendHandle::from_model("flaky", Role::Base, model.clone())
            .with_retry(RetryPolicy::new(3, Duration::ZERO));
        (handle, model)
    }

    #[test]
    fn retries_hide_transient_failures() {
        let (h, m) = flaky(2, true);
        assert_eq!(h.complete("p", &SamplingParams::default()).unwrap(), "ok then stop here");
        assert_eq!(m.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retry_budget_exhaustion_surfaces() {
        let (h, m) = flaky(3, true);
        match h.complete("p", &SamplingParams::default()) {
            Err(BackendError::RetriesExhausted { attempts: 3, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(m.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn non_retriable_errors_fail_fast() {
        let (h, m) = flaky(1, false);
        assert!(matches!(
            h.complete("p", &SamplingParams::default()),
            Err(BackendError::Transport { retriable: false, .. })
        ));
        assert_eq!(m.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn stop_sequences_cut_reply() {
        let (h, _) = flaky(0, true);
        let params = SamplingParams {
            stop_sequences: vec!["stop".into(), "then".into()],
            ..SamplingParams::default()
        };
        assert_eq!(h.complete("p", &params).unwrap(), "ok ");
    }

    #[test]
    fn unsupported_distribution_is_typed() {
        let (h, _) = flaky(0, true);
        assert!(h.next_token_distribution("x").unwrap_err().is_unsupported());
    }

    #[test]
    fn empty_prompt_and_bad_params_rejected() {
        let (h, _) = flaky(0, true);
        assert!(matches!(
            h.complete("", &SamplingParams::default()),
            Err(BackendError::InvalidRequest(_))
        ));
        let bad = SamplingParams {
            top_p: 0.0,
            ..SamplingParams::default()
        };
        assert!(h.complete("p", &bad).is_err());
        let bad = SamplingParams {
            temperature: 0.0,
            ..SamplingParams::default()
        };
        assert!(h.complete("p", &bad).is_err());
    }

    #[test]
    fn endpoint_parsing() {
        assert_eq!(
            Endpoint::parse("mock:fixtures/m.json").unwrap(),
            Endpoint::Mock("fixtures/m.json".into())
        );
        assert_eq!(
            Endpoint::parse("http://localhost:8080/").unwrap(),
            Endpoint::Remote("http://localhost:8080".into())
        );
        assert!(Endpoint::parse("ftp://x").is_err());
        assert!(Endpoint::parse("mock:").is_err());
    }
}

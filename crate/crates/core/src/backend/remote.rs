//! JSON-over-HTTP client.
//!
//! ```text
//! POST {base}/complete  {"prompt", "temperature", "top_p", "max_tokens", "stop"} -> {"text"}
//! POST {base}/logits    {"prefix", "top_k"} -> {"entries": [{"token_id", "token", "p"}]}
//! ```
//!
//! 5xx, 408 and 429 responses and connection failures are retriable; 404 on
//! `/logits` means the server has no distribution capability.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use ureq::Agent;

use super::{BackendError, LanguageModel, SamplingParams, TokenDistribution, TokenProb};

#[derive(Debug, Clone)]
pub struct RemoteOptions {
    pub timeout: Duration,
    /// Candidates requested per `/logits` call.
    pub logits_top_k: usize,
}

impl Default for RemoteOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(120),
            logits_top_k: 20,
        }
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct CompleteRequest {
    pub prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
    pub stop: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CompleteResponse {
    pub text: String,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct LogitsRequest {
    pub prefix: String,
    pub top_k: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LogitsEntry {
    pub token_id: u32,
    pub token: String,
    pub p: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LogitsResponse {
    pub entries: Vec<LogitsEntry>,
}

pub struct RemoteBackend {
    base_url: String,
    agent: Agent,
    options: RemoteOptions,
    logits_missing: AtomicBool,
}

impl RemoteBackend {
    pub fn new(base_url: &str, options: RemoteOptions) -> Self {
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(options.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            agent,
            options,
            logits_missing: AtomicBool::new(false),
        }
    }

    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, BackendError> {
        let url = format!("{}{path}", self.base_url);
        let mut resp = self
            .agent
            .post(&url)
            .send_json(body)
            .map_err(|e| BackendError::Transport {
                message: format!("{url}: {e}"),
                retriable: true,
            })?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let text = resp.body_mut().read_to_string().unwrap_or_default();
            return Err(match status {
                404 if path == "/logits" => {
                    self.logits_missing.store(true, Ordering::Relaxed);
                    BackendError::Unsupported(format!("next-token distributions ({url})"))
                }
                408 | 429 | 500..=599 => BackendError::Transport {
                    message: format!("{url}: HTTP {status} {text}"),
                    retriable: true,
                },
                413 => BackendError::PromptTooLong(text),
                _ => BackendError::Refused(format!("HTTP {status}: {text}")),
            });
        }
        resp.body_mut()
            .read_json::<Resp>()
            .map_err(|e| BackendError::InvalidResponse(format!("{url}: {e}")))
    }
}

impl LanguageModel for RemoteBackend {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<String, BackendError> {
        let (temperature, top_p) = if params.greedy {
            (0.0, 1.0)
        } else {
            (params.temperature, params.top_p)
        };
        let req = CompleteRequest {
            prompt: prompt.to_string(),
            temperature,
            top_p,
            max_tokens: params.max_tokens,
            stop: params.stop_sequences.clone(),
        };
        let resp: CompleteResponse = self.post("/complete", &req)?;
        Ok(resp.text)
    }

    fn next_token_distribution(&self, prefix: &str) -> Result<TokenDistribution, BackendError> {
        let req = LogitsRequest {
            prefix: prefix.to_string(),
            top_k: self.options.logits_top_k,
        };
        let resp: LogitsResponse = self.post("/logits", &req)?;
        let entries = resp
            .entries
            .into_iter()
            .map(|e| TokenProb::new(e.token_id, e.token, e.p))
            .collect();
        Ok(TokenDistribution::from_truncated(0, entries)?)
    }

    /// Optimistically true until the server answers 404 on `/logits`.
    fn supports_distributions(&self) -> bool {
        !self.logits_missing.load(Ordering::Relaxed)
    }

    fn distribution_top_k(&self) -> Option<usize> {
        Some(self.options.logits_top_k)
    }
}

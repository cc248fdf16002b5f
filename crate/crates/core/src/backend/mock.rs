//! Deterministic scripted backend.
//!
//! A script is a JSON document:
//!
//! ```json
//! {
//!   "seed": 0,
//!   "distributions_supported": true,
//!   "completions": [
//!     { "pattern": "(?s)List of 20 tasks", "replies": ["...", "..."], "order": "cycle" },
//!     { "prefix_sha256": "<hex digest of the exact prompt>", "replies": ["..."] }
//!   ],
//!   "distributions": [
//!     { "pattern": "Reference: aspirin", "entries": [{"token_id": 1, "token": " A", "p": 0.9}] },
//!     { "pattern": "(?s)Instruction: (\\w+)", "emit": " About $1.", "anchor": "Response:",
//!       "confidence": 0.8, "end_token": "</s>" }
//!   ]
//! }
//! ```
//!
//! Rules are tried in order; the first match wins. Completion replies are
//! chosen by a per-rule call counter (`cycle`) or by hashing the prompt with
//! the seed (`hash`), and are cut to `max_tokens` whitespace-led chunks.
//!
//! An `emit` rule scripts a whole continuation: the text after the last
//! `anchor` is what has been generated so far, and the rule puts
//! `confidence` on the next chunk of the (capture-expanded) `emit` text,
//! followed by `end_token`, leaving the rest as residual mass. Once the
//! generated text leaves the script, `end_token` is proposed instead.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, LanguageModel, SamplingParams, TokenDistribution, TokenProb, RESIDUAL_TOKEN_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReplyOrder {
    #[default]
    Cycle,
    Hash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CompletionRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_sha256: Option<String>,
    pub replies: Vec<String>,
    #[serde(default)]
    pub order: ReplyOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_sha256: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entries: Option<Vec<TokenProb>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emit: Option<String>,
    #[serde(default = "default_anchor")]
    pub anchor: String,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default = "default_end_token")]
    pub end_token: String,
}

impl Default for DistributionRule {
    fn default() -> Self {
        Self {
            pattern: None,
            prefix_sha256: None,
            entries: None,
            emit: None,
            anchor: default_anchor(),
            confidence: default_confidence(),
            end_token: default_end_token(),
        }
    }
}

fn default_anchor() -> String {
    "Response:".into()
}

fn default_confidence() -> f64 {
    0.9
}

fn default_end_token() -> String {
    "</s>".into()
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub distributions_supported: bool,
    #[serde(default)]
    pub completions: Vec<CompletionRule>,
    #[serde(default)]
    pub distributions: Vec<DistributionRule>,
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            seed: 0,
            distributions_supported: true,
            completions: Vec::new(),
            distributions: Vec::new(),
        }
    }
}

#[derive(Debug)]
enum Matcher {
    Pattern(Regex),
    Digest(String),
}

impl Matcher {
    fn build(pattern: &Option<String>, digest: &Option<String>) -> Result<Self, BackendError> {
        match (pattern, digest) {
            (Some(p), None) => Regex::new(p)
                .map(Matcher::Pattern)
                .map_err(|e| BackendError::Script(e.to_string())),
            (None, Some(d)) => Ok(Matcher::Digest(d.to_ascii_lowercase())),
            _ => Err(BackendError::Script(
                "each rule needs exactly one of `pattern` or `prefix_sha256`".into(),
            )),
        }
    }

    fn matches(&self, text: &str) -> bool {
        match self {
            Matcher::Pattern(re) => re.is_match(text),
            Matcher::Digest(d) => sha256_hex(text) == *d,
        }
    }
}

#[derive(Debug)]
struct CompiledCompletion {
    matcher: Matcher,
    rule: CompletionRule,
    calls: AtomicUsize,
}

#[derive(Debug)]
struct CompiledDistribution {
    matcher: Matcher,
    rule: DistributionRule,
}

#[derive(Debug)]
pub struct MockBackend {
    script: MockScript,
    completions: Vec<CompiledCompletion>,
    distributions: Vec<CompiledDistribution>,
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Stable token id derived from the token text.
pub fn token_id_for(token: &str) -> u32 {
    let d = Sha256::digest(token.as_bytes());
    let id = u32::from_le_bytes([d[0], d[1], d[2], d[3]]);
    if id == RESIDUAL_TOKEN_ID {
        id - 1
    } else {
        id
    }
}

/// Splits text into chunks of leading whitespace plus one non-whitespace run.
/// Concatenating the chunks reproduces the input.
pub fn chunk_tokens(text: &str) -> Vec<&str> {
    let mut chunks = Vec::new();
    let mut start = 0;
    let mut in_word = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_word {
                chunks.push(&text[start..i]);
                start = i;
                in_word = false;
            }
        } else {
            in_word = true;
        }
    }
    if start < text.len() {
        chunks.push(&text[start..]);
    }
    chunks
}

impl MockBackend {
    pub fn new(script: MockScript) -> Result<Self, BackendError> {
        let completions = script
            .completions
            .iter()
            .map(|rule| {
                if rule.replies.is_empty() {
                    return Err(BackendError::Script("completion rule has no replies".into()));
                }
                Ok(CompiledCompletion {
                    matcher: Matcher::build(&rule.pattern, &rule.prefix_sha256)?,
                    rule: rule.clone(),
                    calls: AtomicUsize::new(0),
                })
            })
            .collect::<Result<_, _>>()?;
        let distributions = script
            .distributions
            .iter()
            .map(|rule| {
                match (&rule.entries, &rule.emit) {
                    (Some(_), None) | (None, Some(_)) => {}
                    _ => {
                        return Err(BackendError::Script(
                            "distribution rule needs exactly one of `entries` or `emit`".into(),
                        ))
                    }
                }
                if !(rule.confidence > 0.0 && rule.confidence <= 1.0) {
                    return Err(BackendError::Script(format!(
                        "confidence must be in (0, 1], got {}",
                        rule.confidence
                    )));
                }
                Ok(CompiledDistribution {
                    matcher: Matcher::build(&rule.pattern, &rule.prefix_sha256)?,
                    rule: rule.clone(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            script,
            completions,
            distributions,
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, BackendError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| BackendError::Script(format!("{}: {e}", path.display())))?;
        let script: MockScript = serde_json::from_str(&text)
            .map_err(|e| BackendError::Script(format!("{}: {e}", path.display())))?;
        Self::new(script)
    }

    /// A mock that answers every prompt with `replies` in turn.
    pub fn with_replies(replies: Vec<String>) -> Result<Self, BackendError> {
        Self::new(MockScript {
            completions: vec![CompletionRule {
                pattern: Some("(?s).*".into()),
                replies,
                ..CompletionRule::default()
            }],
            ..MockScript::default()
        })
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }

    fn emit_distribution(
        &self,
        rule: &DistributionRule,
        matcher: &Matcher,
        prefix: &str,
    ) -> Result<TokenDistribution, BackendError> {
        let anchor_at = prefix.rfind(&rule.anchor).ok_or_else(|| {
            BackendError::Script(format!("anchor {:?} not found in prefix", rule.anchor))
        })?;
        let prompt = &prefix[..anchor_at];
        let generated = &prefix[anchor_at + rule.anchor.len()..];
        let template = rule.emit.as_deref().unwrap_or_default();
        let target = match matcher {
            Matcher::Pattern(re) => match re.captures(prompt) {
                Some(caps) => {
                    let mut out = String::new();
                    caps.expand(template, &mut out);
                    out
                }
                None => template.to_string(),
            },
            Matcher::Digest(_) => template.to_string(),
        };
        let mut tokens: Vec<&str> = chunk_tokens(&target);
        tokens.push(&rule.end_token);

        let mut next = None;
        if tokens.concat().starts_with(generated) {
            let mut boundary = 0;
            for tok in &tokens {
                if boundary == generated.len() {
                    next = Some(*tok);
                    break;
                }
                boundary += tok.len();
            }
        }
        let token = next.unwrap_or(rule.end_token.as_str());
        let entries = vec![TokenProb::new(token_id_for(token), token, rule.confidence)];
        Ok(TokenDistribution::from_truncated(0, entries)?)
    }
}

impl LanguageModel for MockBackend {
    fn complete(&self, prompt: &str, params: &SamplingParams) -> Result<String, BackendError> {
        let rule = self
            .completions
            .iter()
            .find(|c| c.matcher.matches(prompt))
            .ok_or_else(|| BackendError::Refused("no scripted completion matches prompt".into()))?;
        let n = rule.rule.replies.len();
        let idx = match rule.rule.order {
            ReplyOrder::Cycle => rule.calls.fetch_add(1, Ordering::SeqCst) % n,
            ReplyOrder::Hash => {
                let d = Sha256::digest(format!("{}\u{0}{prompt}", self.script.seed).as_bytes());
                (u64::from_le_bytes(d[..8].try_into().unwrap()) % n as u64) as usize
            }
        };
        let reply = &rule.rule.replies[idx];
        let chunks = chunk_tokens(reply);
        Ok(chunks
            .into_iter()
            .take(params.max_tokens)
            .collect::<String>())
    }

    fn next_token_distribution(&self, prefix: &str) -> Result<TokenDistribution, BackendError> {
        if !self.script.distributions_supported {
            return Err(BackendError::Unsupported("next-token distributions (mock)".into()));
        }
        let rule = self
            .distributions
            .iter()
            .find(|d| d.matcher.matches(prefix))
            .ok_or_else(|| BackendError::Refused("no scripted distribution matches prefix".into()))?;
        match &rule.rule.entries {
            Some(entries) => Ok(TokenDistribution::from_truncated(0, entries.clone())?),
            None => self.emit_distribution(&rule.rule, &rule.matcher, prefix),
        }
    }

    fn supports_distributions(&self) -> bool {
        self.script.distributions_supported
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(max_tokens: usize) -> SamplingParams {
        SamplingParams {
            max_tokens,
            ..SamplingParams::default()
        }
    }

    #[test]
    fn scripted_reply_verbatim() {
        let m = MockBackend::with_replies(vec!["The answer is 42.".into()]).unwrap();
        assert_eq!(m.complete("q", &params(100)).unwrap(), "The answer is 42.");
    }

    #[test]
    fn max_tokens_one_yields_single_chunk() {
        let m = MockBackend::with_replies(vec![" alpha beta gamma".into()]).unwrap();
        assert_eq!(m.complete("q", &params(1)).unwrap(), " alpha");
    }

    #[test]
    fn cycle_and_hash_orders() {
        let m = MockBackend::with_replies(vec!["a".into(), "b".into()]).unwrap();
        let got: Vec<_> = (0..4).map(|_| m.complete("q", &params(5)).unwrap()).collect();
        assert_eq!(got, vec!["a", "b", "a", "b"]);

        let script = MockScript {
            seed: 3,
            completions: vec![CompletionRule {
                pattern: Some(".*".into()),
                replies: (0..10).map(|i| i.to_string()).collect(),
                order: ReplyOrder::Hash,
                ..CompletionRule::default()
            }],
            ..MockScript::default()
        };
        let a = MockBackend::new(script.clone()).unwrap();
        let b = MockBackend::new(script).unwrap();
        for p in ["x", "y", "zz"] {
            assert_eq!(a.complete(p, &params(5)).unwrap(), b.complete(p, &params(5)).unwrap());
            assert_eq!(a.complete(p, &params(5)).unwrap(), a.complete(p, &params(5)).unwrap());
        }
    }

    #[test]
    fn digest_rules_match_exact_prompt() {
        let script = MockScript {
            completions: vec![CompletionRule {
                prefix_sha256: Some(sha256_hex("exact prompt")),
                replies: vec!["hit".into()],
                ..CompletionRule::default()
            }],
            ..MockScript::default()
        };
        let m = MockBackend::new(script).unwrap();
        assert_eq!(m.complete("exact prompt", &params(5)).unwrap(), "hit");
        assert!(matches!(m.complete("other", &params(5)), Err(BackendError::Refused(_))));
    }

    #[test]
    fn programmed_distribution_is_exact() {
        let script = MockScript {
            distributions: vec![DistributionRule {
                pattern: Some(".*".into()),
                entries: Some(vec![TokenProb::new(1, "A", 0.9), TokenProb::new(2, "B", 0.1)]),
                ..DistributionRule::default()
            }],
            ..MockScript::default()
        };
        let m = MockBackend::new(script).unwrap();
        let d = m.next_token_distribution("prefix").unwrap();
        assert_eq!(d.entries(), &[TokenProb::new(1, "A", 0.9), TokenProb::new(2, "B", 0.1)]);
    }

    #[test]
    fn emit_rule_walks_the_script() {
        let script = MockScript {
            distributions: vec![DistributionRule {
                pattern: Some(r"Instruction: (\w+)".into()),
                emit: Some(" It is $1.".into()),
                confidence: 0.8,
                anchor: "Response:".into(),
                end_token: "</s>".into(),
                ..DistributionRule::default()
            }],
            ..MockScript::default()
        };
        let m = MockBackend::new(script).unwrap();
        let base = "Instruction: aspirin\nResponse:";
        let mut generated = String::new();
        let mut seen = Vec::new();
        for _ in 0..5 {
            let d = m.next_token_distribution(&format!("{base}{generated}")).unwrap();
            let tok = d.argmax().unwrap().token.clone();
            assert!((d.argmax().unwrap().p - 0.8).abs() < 1e-12);
            assert!((d.residual() - 0.2).abs() < 1e-12);
            seen.push(tok.clone());
            if tok == "</s>" {
                break;
            }
            generated.push_str(&tok);
        }
        assert_eq!(seen, vec![" It", " is", " aspirin.", "</s>"]);
        // Off-script prefixes are steered to the end token.
        let d = m.next_token_distribution(&format!("{base} Something else")).unwrap();
        assert_eq!(d.argmax().unwrap().token, "</s>");
    }

    #[test]
    fn unsupported_when_disabled() {
        let m = MockBackend::new(MockScript {
            distributions_supported: false,
            ..MockScript::default()
        })
        .unwrap();
        assert!(m.next_token_distribution("x").unwrap_err().is_unsupported());
    }

    #[test]
    fn chunking_round_trips() {
        for s in ["", " a", "a b  c\n", "  lead", "x"] {
            assert_eq!(chunk_tokens(s).concat(), s);
        }
        assert_eq!(chunk_tokens("a b"), vec!["a", " b"]);
    }

    #[test]
    fn bad_scripts_rejected() {
        let both = MockScript {
            completions: vec![CompletionRule {
                pattern: Some("a".into()),
                prefix_sha256: Some("b".into()),
                replies: vec!["x".into()],
                ..CompletionRule::default()
            }],
            ..MockScript::default()
        };
        assert!(MockBackend::new(both).is_err());
        let bad_regex = MockScript {
            completions: vec![CompletionRule {
                pattern: Some("(".into()),
                replies: vec!["x".into()],
                ..CompletionRule::default()
            }],
            ..MockScript::default()
        };
        assert!(MockBackend::new(bad_regex).is_err());
    }
}

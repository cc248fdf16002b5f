//! Retrieval-grounded response generation.
//!
//! The task's instruction and context form the retrieval query. Each of the
//! top-k documents is paired with the task in its own prompt, and every
//! decoding step mixes the k next-token distributions by the documents'
//! retrieval weights:
//!
//! ```text
//! p(y_t | x) = Σ_j w_j · p_lm(y_t | prompt(x, d_j), y_<t)
//! ```
//!
//! The chosen token is appended to all k prompts, so the branches share one
//! continuation. Weights are fixed by the initial query.

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hash, Hasher};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, BackendHandle, SamplingParams, TokenDistribution, TokenProb};
use crate::decode::{decode_loop, greedy_pick, sample_pick, DecodeParams, StopReason};
use crate::index::{truncate_to_terms, InvertedIndex, QueryOptions, RetrievedDoc, DEFAULT_TOP_K};
use crate::instruct::{GeneratedTask, DEFAULT_DOMAIN};

pub const DEFAULT_REFERENCE_CHAR_BUDGET: usize = 4000;
const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Marginalized,
    NoDocs,
    Contrastive,
    /// Backend lacked distributions; sampled once on the top document's prompt.
    SingleDoc,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub requested_k: usize,
    pub query_terms: usize,
    pub query_truncated: bool,
    /// Documents whose Reference block was cut to the character budget.
    #[serde(default)]
    pub truncated_doc_ids: Vec<u64>,
    /// Candidates per step listed by a truncating backend; the mixture is
    /// approximate when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distribution_top_k: Option<usize>,
    pub steps: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_reason: Option<StopReason>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecializationRecord {
    pub instruction: String,
    pub context: String,
    pub response: String,
    pub retrieved_doc_ids: Vec<u64>,
    pub retrieval_weights: Vec<f64>,
    pub iteration: u32,
    pub decode_mode: DecodeMode,
    #[serde(default)]
    pub provenance: Provenance,
}

impl SpecializationRecord {
    pub fn check(&self) -> Result<(), String> {
        if self.instruction.trim().is_empty() {
            return Err("instruction is empty".into());
        }
        if self.response.trim().is_empty() {
            return Err("response is empty".into());
        }
        if self.retrieved_doc_ids.len() != self.retrieval_weights.len() {
            return Err("doc ids and weights differ in length".into());
        }
        if self.decode_mode == DecodeMode::Marginalized && !self.retrieval_weights.is_empty() {
            let total: f64 = self.retrieval_weights.iter().sum();
            if (total - 1.0).abs() > WEIGHT_TOLERANCE {
                return Err(format!("retrieval weights sum to {total}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RejectedRecord {
    pub instruction: String,
    pub context: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ResponseOutcome {
    Accepted(SpecializationRecord),
    Rejected(RejectedRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseConfig {
    pub top_k: usize,
    pub decode: DecodeParams,
    pub domain_name: String,
    pub reference_char_budget: usize,
    pub query_term_budget: usize,
    /// Off reproduces the no-documents ablation.
    pub use_retrieval: bool,
    /// Sample a single-document completion when the backend has no
    /// distribution endpoint.
    pub fallback_to_sampling: bool,
    pub iteration: u32,
}

impl Default for ResponseConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            decode: DecodeParams::default(),
            domain_name: DEFAULT_DOMAIN.into(),
            reference_char_budget: DEFAULT_REFERENCE_CHAR_BUDGET,
            query_term_budget: crate::index::DEFAULT_QUERY_TERM_BUDGET,
            use_retrieval: true,
            fallback_to_sampling: true,
            iteration: 1,
        }
    }
}

impl ResponseConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.top_k == 0 {
            return Err("top_k must be at least 1".into());
        }
        self.decode.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuiltQuery {
    pub text: String,
    pub truncated: bool,
}

/// `instruction ⊕ " " ⊕ context`, cut to `term_budget` terms.
pub fn build_query(task: &GeneratedTask, term_budget: usize) -> BuiltQuery {
    let joined = if task.context.is_empty() {
        task.instruction.clone()
    } else {
        format!("{} {}", task.instruction, task.context)
    };
    let (text, truncated) = truncate_to_terms(&joined, term_budget);
    BuiltQuery {
        text: text.to_string(),
        truncated,
    }
}

pub fn response_preamble(domain: &str) -> String {
    format!(
        "You are a {domain} domain expert. Given an instruction and an input, \
generate the best response to solve the given {domain} task."
    )
}

fn truncate_chars(text: &str, budget: usize) -> (&str, bool) {
    match text.char_indices().nth(budget) {
        Some((i, _)) => (&text[..i], true),
        None => (text, false),
    }
}

/// Zero-shot response prompt, optionally grounded on one document. Returns the
/// prompt and whether the document text was cut to `reference_char_budget`.
pub fn build_response_prompt(
    task: &GeneratedTask,
    doc: Option<&RetrievedDoc>,
    domain: &str,
    reference_char_budget: usize,
) -> (String, bool) {
    let mut prompt = response_preamble(domain);
    prompt.push_str("\n\n");
    let mut truncated = false;
    if let Some(doc) = doc {
        let (text, cut) = truncate_chars(&doc.text, reference_char_budget);
        truncated = cut;
        prompt.push_str("Reference: ");
        prompt.push_str(text);
        prompt.push_str("\n\n");
    }
    prompt.push_str("Instruction: ");
    prompt.push_str(&task.instruction);
    prompt.push('\n');
    if !task.context.is_empty() {
        prompt.push_str("Input: ");
        prompt.push_str(&task.context);
        prompt.push('\n');
    }
    prompt.push_str("Response:");
    (prompt, truncated)
}

/// Weighted mixture of next-token distributions, one per prompt prefix.
/// Zero-weight branches are not queried. Identical token ids are summed.
pub fn marginalized_next_step(
    backend: &BackendHandle,
    prefixes: &[String],
    weights: &[f64],
) -> Result<TokenDistribution, BackendError> {
    if prefixes.is_empty() || prefixes.len() != weights.len() {
        return Err(BackendError::InvalidRequest(format!(
            "{} prefixes but {} weights",
            prefixes.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(BackendError::InvalidRequest("weights must be nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > WEIGHT_TOLERANCE {
        return Err(BackendError::InvalidRequest(format!("weights sum to {total}")));
    }

    let live: Vec<(usize, f64)> = weights
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, w)| *w > 0.0)
        .collect();
    let dists: Vec<TokenDistribution> = if live.len() == 1 {
        vec![backend.next_token_distribution(&prefixes[live[0].0])?]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = live
                .iter()
                .map(|&(j, _)| {
                    let prefix = &prefixes[j];
                    s.spawn(move || backend.next_token_distribution(prefix))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("distribution worker panicked"))
                .collect::<Result<Vec<_>, _>>()
        })?
    };
    mix_distributions(&dists, &live.iter().map(|l| l.1).collect::<Vec<_>>())
}

/// `Σ_j weights[j] · dists[j]`, renormalized to absorb rounding.
pub fn mix_distributions(
    dists: &[TokenDistribution],
    weights: &[f64],
) -> Result<TokenDistribution, BackendError> {
    let mut mixed: BTreeMap<u32, (String, f64)> = BTreeMap::new();
    for (dist, &w) in dists.iter().zip(weights) {
        for e in dist.entries() {
            let slot = mixed
                .entry(e.token_id)
                .or_insert_with(|| (e.token.clone(), 0.0));
            slot.1 += w * e.p;
        }
    }
    let entries = mixed
        .into_iter()
        .map(|(id, (token, p))| TokenProb::new(id, token, p))
        .collect();
    Ok(TokenDistribution::from_weights(0, entries)?)
}

fn task_rng(seed: u64, task: &GeneratedTask) -> ChaCha8Rng {
    let mut h = DefaultHasher::new();
    task.instruction.hash(&mut h);
    task.context.hash(&mut h);
    ChaCha8Rng::seed_from_u64(seed ^ h.finish())
}

/// Decodes with the mixture over `prompts`. Greedy by default.
pub fn decode_marginalized(
    backend: &BackendHandle,
    prompts: &[String],
    weights: &[f64],
    params: &DecodeParams,
    rng: &mut ChaCha8Rng,
) -> Result<crate::decode::DecodeOutput, BackendError> {
    decode_loop(params, |generated, step| {
        let prefixes: Vec<String> = prompts.iter().map(|p| format!("{p}{generated}")).collect();
        let dist = marginalized_next_step(backend, &prefixes, weights)?.with_step(step);
        let pick = if params.greedy {
            greedy_pick(&dist)
        } else {
            sample_pick(&dist, rng)
        };
        pick.ok_or_else(|| BackendError::InvalidResponse("distribution has no real tokens".into()))
    })
}

/// Retrieves, decodes and packages one task's response.
pub fn generate_response(
    task: &GeneratedTask,
    index: Option<&InvertedIndex>,
    backend: &BackendHandle,
    config: &ResponseConfig,
) -> Result<ResponseOutcome, BackendError> {
    config.validate().map_err(BackendError::InvalidRequest)?;
    let query = build_query(task, config.query_term_budget);
    let mut provenance = Provenance {
        requested_k: config.top_k,
        query_truncated: query.truncated,
        distribution_top_k: backend.distribution_top_k(),
        ..Provenance::default()
    };

    let docs = match (config.use_retrieval, index) {
        (true, Some(index)) => {
            let opts = QueryOptions {
                term_budget: config.query_term_budget,
                ..QueryOptions::default()
            };
            let res = index
                .query(&query.text, config.top_k, &opts)
                .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
            provenance.query_terms = res.query_terms;
            res.docs
        }
        _ => Vec::new(),
    };

    let (mut prompts, mut weights, mut doc_ids, mut mode) = (Vec::new(), Vec::new(), Vec::new(), DecodeMode::Marginalized);
    if docs.is_empty() {
        let (p, _) = build_response_prompt(task, None, &config.domain_name, config.reference_char_budget);
        prompts.push(p);
        weights.push(1.0);
        mode = DecodeMode::NoDocs;
    } else {
        for doc in &docs {
            let (p, cut) = build_response_prompt(task, Some(doc), &config.domain_name, config.reference_char_budget);
            if cut {
                provenance.truncated_doc_ids.push(doc.doc_id);
            }
            prompts.push(p);
            weights.push(doc.weight);
            doc_ids.push(doc.doc_id);
        }
    }

    let mut rng = task_rng(config.decode.sample_seed, task);
    let decoded = match decode_marginalized(backend, &prompts, &weights, &config.decode, &mut rng) {
        Ok(out) => {
            provenance.steps = out.steps;
            provenance.stop_reason = Some(out.stop_reason);
            out.text
        }
        Err(e) if e.is_unsupported() && config.fallback_to_sampling => {
            let mut params = SamplingParams::greedy(config.decode.max_steps);
            params.stop_sequences = config.decode.stop_sequences.clone();
            let text = backend.complete(&prompts[0], &params)?;
            if mode == DecodeMode::Marginalized {
                mode = DecodeMode::SingleDoc;
                doc_ids.truncate(1);
                weights = vec![1.0];
            }
            text
        }
        Err(e) => return Err(e),
    };

    let response = decoded.trim().to_string();
    if response.is_empty() {
        return Ok(ResponseOutcome::Rejected(RejectedRecord {
            instruction: task.instruction.clone(),
            context: task.context.clone(),
            reason: "empty response".into(),
        }));
    }
    if mode == DecodeMode::NoDocs {
        weights.clear();
    }
    Ok(ResponseOutcome::Accepted(SpecializationRecord {
        instruction: task.instruction.clone(),
        context: task.context.clone(),
        response,
        retrieved_doc_ids: doc_ids,
        retrieval_weights: weights,
        iteration: config.iteration,
        decode_mode: mode,
        provenance,
    }))
}

//! Expert-versus-base contrastive decoding for iterative specialization.
//!
//! At each step only tokens the expert finds plausible are eligible:
//!
//! ```text
//! V_head = { v : p_expert(v) ≥ α · max_w p_expert(w) }
//! ```
//!
//! Among them the chosen token maximizes either `log p_expert − log p_base`
//! ([`ContrastMode::LogRatio`], the default) or `p_expert − p_base`
//! ([`ContrastMode::ProbDiff`]). Ties go to the lowest token id.
//!
//! A token absent from a truncated base distribution is given the base's
//! residual mass, or 0 when there is none; log-probabilities are floored at
//! `ln(1e-12)`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, BackendHandle, TokenDistribution, TokenProb};
use crate::decode::{decode_loop, DecodeOutput, DecodeParams};
use crate::index::InvertedIndex;
use crate::instruct::GeneratedTask;
use crate::respond::{
    build_query, build_response_prompt, marginalized_next_step, DecodeMode,
    Provenance, RejectedRecord, ResponseConfig, ResponseOutcome, SpecializationRecord,
};

pub const DEFAULT_PLAUSIBILITY_ALPHA: f64 = 0.1;
const MIN_PROB: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ContrastMode {
    #[default]
    LogRatio,
    ProbDiff,
}

impl std::str::FromStr for ContrastMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "log_ratio" => Ok(Self::LogRatio),
            "prob_diff" => Ok(Self::ProbDiff),
            other => Err(format!("unknown contrast mode {other:?} (log_ratio | prob_diff)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastParams {
    pub plausibility_alpha: f64,
    pub mode: ContrastMode,
}

impl Default for ContrastParams {
    fn default() -> Self {
        Self {
            plausibility_alpha: DEFAULT_PLAUSIBILITY_ALPHA,
            mode: ContrastMode::LogRatio,
        }
    }
}

impl ContrastParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.plausibility_alpha > 0.0 && self.plausibility_alpha < 1.0) {
            return Err(format!(
                "plausibility_alpha must be in (0, 1), got {}",
                self.plausibility_alpha
            ));
        }
        Ok(())
    }
}

/// Token ids the expert rates at least `alpha` times its best token.
/// Never empty for a distribution with any real token.
pub fn plausibility_mask(expert: &TokenDistribution, alpha: f64) -> BTreeSet<u32> {
    let Some(top) = expert.argmax() else {
        return BTreeSet::new();
    };
    let cutoff = alpha * top.p;
    expert
        .tokens()
        .filter(|t| t.p >= cutoff)
        .map(|t| t.token_id)
        .collect()
}

fn base_prob(base: &TokenDistribution, token_id: u32) -> f64 {
    let p = base.prob(token_id);
    if p > 0.0 || base.tokens().any(|t| t.token_id == token_id) {
        p
    } else {
        base.residual()
    }
}

pub fn contrast_score(p_expert: f64, p_base: f64, mode: ContrastMode) -> f64 {
    match mode {
        ContrastMode::LogRatio => p_expert.max(MIN_PROB).ln() - p_base.max(MIN_PROB).ln(),
        ContrastMode::ProbDiff => p_expert - p_base,
    }
}

/// Picks the contrastive token from two already-fetched distributions.
pub fn contrastive_choice(
    expert: &TokenDistribution,
    base: &TokenDistribution,
    params: &ContrastParams,
) -> Option<TokenProb> {
    let mask = plausibility_mask(expert, params.plausibility_alpha);
    let mut best: Option<(f64, &TokenProb)> = None;
    // Tokens iterate in ascending id order; strict `>` keeps the lowest id on ties.
    for t in expert.tokens().filter(|t| mask.contains(&t.token_id)) {
        let score = contrast_score(t.p, base_prob(base, t.token_id), params.mode);
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, t));
        }
    }
    best.map(|(_, t)| t.clone())
}

pub fn contrastive_next_step(
    expert: &BackendHandle,
    base: &BackendHandle,
    prefix: &str,
    params: &ContrastParams,
) -> Result<TokenProb, BackendError> {
    params.validate().map_err(BackendError::InvalidRequest)?;
    let (e, b) = std::thread::scope(|s| {
        let e = s.spawn(|| expert.next_token_distribution(prefix));
        let b = base.next_token_distribution(prefix);
        (e.join().expect("expert worker panicked"), b)
    });
    let (e, b) = (e?, b?);
    contrastive_choice(&e, &b, params)
        .ok_or_else(|| BackendError::InvalidResponse("expert distribution has no real tokens".into()))
}

pub fn contrastive_generate(
    expert: &BackendHandle,
    base: &BackendHandle,
    prompt: &str,
    decode: &DecodeParams,
    contrast: &ContrastParams,
) -> Result<DecodeOutput, BackendError> {
    decode.validate().map_err(BackendError::InvalidRequest)?;
    decode_loop(decode, |generated, _| {
        contrastive_next_step(expert, base, &format!("{prompt}{generated}"), contrast)
    })
}

/// Contrast where each side is itself a retrieval mixture over the same
/// document prompts and weights.
fn contrastive_generate_marginalized(
    expert: &BackendHandle,
    base: &BackendHandle,
    prompts: &[String],
    weights: &[f64],
    decode: &DecodeParams,
    contrast: &ContrastParams,
) -> Result<DecodeOutput, BackendError> {
    decode_loop(decode, |generated, _| {
        let prefixes: Vec<String> = prompts.iter().map(|p| format!("{p}{generated}")).collect();
        let e = marginalized_next_step(expert, &prefixes, weights)?;
        let b = marginalized_next_step(base, &prefixes, weights)?;
        contrastive_choice(&e, &b, contrast)
            .ok_or_else(|| BackendError::InvalidResponse("expert distribution has no real tokens".into()))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationConfig {
    pub contrast: ContrastParams,
    /// Combine retrieval mixtures with the contrast.
    pub with_retrieval: bool,
    pub response: ResponseConfig,
}

impl Default for IterationConfig {
    fn default() -> Self {
        Self {
            contrast: ContrastParams::default(),
            with_retrieval: false,
            response: ResponseConfig {
                iteration: 2,
                ..ResponseConfig::default()
            },
        }
    }
}

/// Regenerates one task's response by contrasting `expert` against `base`.
pub fn generate_contrastive_response(
    task: &GeneratedTask,
    index: Option<&InvertedIndex>,
    expert: &BackendHandle,
    base: &BackendHandle,
    config: &IterationConfig,
) -> Result<ResponseOutcome, BackendError> {
    config.contrast.validate().map_err(BackendError::InvalidRequest)?;
    config.response.validate().map_err(BackendError::InvalidRequest)?;
    let rc = &config.response;
    let mut provenance = Provenance {
        requested_k: if config.with_retrieval { rc.top_k } else { 0 },
        distribution_top_k: expert.distribution_top_k(),
        ..Provenance::default()
    };
    let mut doc_ids = Vec::new();
    let mut weights = Vec::new();

    let docs = match (config.with_retrieval, index) {
        (true, Some(index)) => {
            let q = build_query(task, rc.query_term_budget);
            provenance.query_truncated = q.truncated;
            let opts = crate::index::QueryOptions {
                term_budget: rc.query_term_budget,
                ..Default::default()
            };
            let res = index
                .query(&q.text, rc.top_k, &opts)
                .map_err(|e| BackendError::InvalidRequest(e.to_string()))?;
            provenance.query_terms = res.query_terms;
            res.docs
        }
        _ => Vec::new(),
    };

    let out = if docs.is_empty() {
        let (prompt, _) = build_response_prompt(task, None, &rc.domain_name, rc.reference_char_budget);
        contrastive_generate(expert, base, &prompt, &rc.decode, &config.contrast)?
    } else {
        let mut prompts = Vec::new();
        for d in &docs {
            let (p, cut) = build_response_prompt(task, Some(d), &rc.domain_name, rc.reference_char_budget);
            if cut {
                provenance.truncated_doc_ids.push(d.doc_id);
            }
            prompts.push(p);
            doc_ids.push(d.doc_id);
            weights.push(d.weight);
        }
        contrastive_generate_marginalized(expert, base, &prompts, &weights, &rc.decode, &config.contrast)?
    };
    provenance.steps = out.steps;
    provenance.stop_reason = Some(out.stop_reason);

    let response = out.text.trim().to_string();
    if response.is_empty() {
        return Ok(ResponseOutcome::Rejected(RejectedRecord {
            instruction: task.instruction.clone(),
            context: task.context.clone(),
            reason: "empty response".into(),
        }));
    }
    Ok(ResponseOutcome::Accepted(SpecializationRecord {
        instruction: task.instruction.clone(),
        context: task.context.clone(),
        response,
        retrieved_doc_ids: doc_ids,
        retrieval_weights: weights,
        iteration: rc.iteration,
        decode_mode: DecodeMode::Contrastive,
        provenance,
    }))
}

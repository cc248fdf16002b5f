//! Token-by-token decoding shared by marginalized and contrastive generation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{truncate_at_stop, BackendError, TokenDistribution, TokenProb};

pub const DEFAULT_END_TOKEN: &str = "</s>";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    /// Generation horizon in tokens.
    pub max_steps: usize,
    pub stop_sequences: Vec<String>,
    pub greedy: bool,
    /// Seeds the sampler when `greedy` is off.
    pub sample_seed: u64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            max_steps: 512,
            stop_sequences: vec![DEFAULT_END_TOKEN.to_string()],
            greedy: true,
            sample_seed: 0,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_steps == 0 {
            return Err("max_steps must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    StopSequence,
    MaxSteps,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput {
    pub text: String,
    pub steps: usize,
    pub stop_reason: StopReason,
}

/// Argmax over real tokens, lowest id on ties.
pub fn greedy_pick(dist: &TokenDistribution) -> Option<TokenProb> {
    dist.argmax().cloned()
}

/// Samples a real token in proportion to its probability.
pub fn sample_pick<R: Rng + ?Sized>(dist: &TokenDistribution, rng: &mut R) -> Option<TokenProb> {
    let total: f64 = dist.tokens().map(|t| t.p).sum();
    if total <= 0.0 {
        return None;
    }
    let mut x = rng.gen::<f64>() * total;
    let mut last = None;
    for t in dist.tokens() {
        if t.p <= 0.0 {
            continue;
        }
        if x < t.p {
            return Some(t.clone());
        }
        x -= t.p;
        last = Some(t);
    }
    last.cloned()
}

/// Runs `next` once per step with the text generated so far, appending the
/// chosen token, until a stop sequence appears or `max_steps` is reached.
/// The returned text excludes the stop sequence.
pub fn decode_loop(
    params: &DecodeParams,
    mut next: impl FnMut(&str, usize) -> Result<TokenProb, BackendError>,
) -> Result<DecodeOutput, BackendError> {
    let mut text = String::new();
    for step in 0..params.max_steps {
        let token = next(&text, step)?;
        text.push_str(&token.token);
        let cut = truncate_at_stop(&text, &params.stop_sequences).len();
        if cut < text.len() {
            text.truncate(cut);
            return Ok(DecodeOutput {
                text,
                steps: step + 1,
                stop_reason: StopReason::StopSequence,
            });
        }
    }
    Ok(DecodeOutput {
        text,
        steps: params.max_steps,
        stop_reason: StopReason::MaxSteps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stops_on_sequence_and_strips_it() {
        let script = [" a", " b", "</s>", " c"];
        let out = decode_loop(&DecodeParams::default(), |_, step| {
            Ok(TokenProb::new(step as u32, script[step], 1.0))
        })
        .unwrap();
        assert_eq!(out.text, " a b");
        assert_eq!(out.steps, 3);
        assert_eq!(out.stop_reason, StopReason::StopSequence);
    }

    #[test]
    fn max_steps_one_emits_single_token() {
        let params = DecodeParams {
            max_steps: 1,
            ..DecodeParams::default()
        };
        let out = decode_loop(&params, |_, _| Ok(TokenProb::new(1, " x", 1.0))).unwrap();
        assert_eq!(out.text, " x");
        assert_eq!(out.stop_reason, StopReason::MaxSteps);
    }

    #[test]
    fn sampling_respects_support() {
        let d = TokenDistribution::from_truncated(
            0,
            vec![TokenProb::new(1, "a", 0.3), TokenProb::new(2, "b", 0.0)],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            assert_eq!(sample_pick(&d, &mut rng).unwrap().token_id, 1);
        }
    }
}

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Reserved id for the mass a backend did not enumerate. Never selected as
/// a decoded token.
pub const RESIDUAL_TOKEN_ID: u32 = u32::MAX;

const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum DistributionError {
    #[error("probability {p} for token {token_id} is negative or not finite")]
    BadProbability { token_id: u32, p: f64 },
    #[error("token id {0} appears twice")]
    DuplicateToken(u32),
    #[error("token id {0} is reserved for residual mass")]
    ReservedToken(u32),
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("distribution has no mass")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub token_id: u32,
    pub token: String,
    pub p: f64,
}

impl TokenProb {
    pub fn new(token_id: u32, token: impl Into<String>, p: f64) -> Self {
        Self {
            token_id,
            token: token.into(),
            p,
        }
    }

    pub fn is_residual(&self) -> bool {
        self.token_id == RESIDUAL_TOKEN_ID
    }
}

/// A normalized next-token distribution, entries sorted by token id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenDistribution {
    pub step_index: usize,
    entries: Vec<TokenProb>,
}

impl TokenDistribution {
    /// Entries must already sum to 1 within 1e-6. A residual entry is allowed.
    pub fn new(step_index: usize, entries: Vec<TokenProb>) -> Result<Self, DistributionError> {
        let entries = check_entries(entries, true)?;
        let total: f64 = entries.iter().map(|e| e.p).sum();
        if (total - 1.0).abs() > NORM_TOLERANCE {
            return Err(DistributionError::NotNormalized(total));
        }
        Ok(Self { step_index, entries })
    }

    /// Accepts a truncated top-k list. Missing mass becomes a residual entry;
    /// a list summing above 1 is rescaled.
    pub fn from_truncated(
        step_index: usize,
        entries: Vec<TokenProb>,
    ) -> Result<Self, DistributionError> {
        let mut entries = check_entries(entries, false)?;
        let total: f64 = entries.iter().map(|e| e.p).sum();
        if total <= 0.0 {
            return Err(DistributionError::Empty);
        }
        if total > 1.0 {
            for e in &mut entries {
                e.p /= total;
            }
        } else if 1.0 - total > f64::EPSILON * entries.len() as f64 {
            entries.push(TokenProb::new(RESIDUAL_TOKEN_ID, "", 1.0 - total));
        }
        Ok(Self { step_index, entries })
    }

    /// Normalizes nonnegative weights into a distribution.
    pub fn from_weights(
        step_index: usize,
        entries: Vec<TokenProb>,
    ) -> Result<Self, DistributionError> {
        let mut entries = check_entries(entries, true)?;
        let total: f64 = entries.iter().map(|e| e.p).sum();
        if total <= 0.0 || !total.is_finite() {
            return Err(DistributionError::Empty);
        }
        for e in &mut entries {
            e.p /= total;
        }
        Ok(Self { step_index, entries })
    }

    pub fn with_step(mut self, step_index: usize) -> Self {
        self.step_index = step_index;
        self
    }

    pub fn entries(&self) -> &[TokenProb] {
        &self.entries
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.p).sum()
    }

    pub fn prob(&self, token_id: u32) -> f64 {
        self.entries
            .binary_search_by_key(&token_id, |e| e.token_id)
            .map(|i| self.entries[i].p)
            .unwrap_or(0.0)
    }

    pub fn residual(&self) -> f64 {
        self.prob(RESIDUAL_TOKEN_ID)
    }

    /// Real (non-residual) tokens.
    pub fn tokens(&self) -> impl Iterator<Item = &TokenProb> {
        self.entries.iter().filter(|e| !e.is_residual())
    }

    /// Most probable real token; ties go to the lowest token id.
    pub fn argmax(&self) -> Option<&TokenProb> {
        // Entries are id-ascending, so strict `>` keeps the lowest id on ties.
        let mut best: Option<&TokenProb> = None;
        for e in self.tokens() {
            if best.is_none_or(|b| e.p > b.p) {
                best = Some(e);
            }
        }
        best
    }
}

fn check_entries(
    mut entries: Vec<TokenProb>,
    allow_residual: bool,
) -> Result<Vec<TokenProb>, DistributionError> {
    let mut seen = HashSet::with_capacity(entries.len());
    for e in &entries {
        if !(e.p.is_finite() && e.p >= 0.0) {
            return Err(DistributionError::BadProbability {
                token_id: e.token_id,
                p: e.p,
            });
        }
        if e.is_residual() && !allow_residual {
            return Err(DistributionError::ReservedToken(e.token_id));
        }
        if !seen.insert(e.token_id) {
            return Err(DistributionError::DuplicateToken(e.token_id));
        }
    }
    entries.sort_by_key(|e| e.token_id);
    Ok(entries)
}

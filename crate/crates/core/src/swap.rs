//! Overlap-aware swap decisions.
//!
//! A stage only changes its active set when the new candidate set overlaps the
//! previous active set by less than `gamma`. When it does, newly selected
//! blocks are loaded, and blocks leaving the set are either offloaded or, if a
//! host copy already exists, simply released.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::blockindex::{BlockId, BlockSet};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SwapError {
    #[error("candidate set is empty")]
    EmptyCandidate,
    #[error("sink block missing from the candidate set")]
    SinkMissing,
    #[error("gamma {0} outside [0, 1]")]
    Gamma(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwapPolicy {
    gamma: f64,
}

impl SwapPolicy {
    pub const DEFAULT_GAMMA: f64 = 0.9;

    pub fn new(gamma: f64) -> Result<Self, SwapError> {
        if !(0.0..=1.0).contains(&gamma) {
            return Err(SwapError::Gamma(gamma));
        }
        Ok(Self { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

impl Default for SwapPolicy {
    fn default() -> Self {
        Self {
            gamma: Self::DEFAULT_GAMMA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapPlan {
    pub stage: usize,
    pub triggered: bool,
    pub overlap: f64,
    pub new_active: BlockSet,
    pub load: BlockSet,
    pub offload: BlockSet,
    /// Leaving blocks that already have a host copy: freed without movement.
    pub evict: BlockSet,
}

/// `|candidate ∩ prev_active| / |candidate|`.
pub fn overlap_ratio(candidate: &BlockSet, prev_active: &BlockSet) -> Result<f64, SwapError> {
    if candidate.is_empty() {
        return Err(SwapError::EmptyCandidate);
    }
    let shared = candidate.intersection(prev_active).count();
    Ok(shared as f64 / candidate.len() as f64)
}

pub fn plan_swap(
    stage: usize,
    candidate: &BlockSet,
    prev_active: &BlockSet,
    b_memory: &BlockSet,
    policy: &SwapPolicy,
) -> Result<SwapPlan, SwapError> {
    if !candidate.contains(&BlockId::SINK) {
        return Err(SwapError::SinkMissing);
    }
    let overlap = overlap_ratio(candidate, prev_active)?;
    if overlap >= policy.gamma {
        return Ok(SwapPlan {
            stage,
            triggered: false,
            overlap,
            new_active: prev_active.clone(),
            load: BlockSet::new(),
            offload: BlockSet::new(),
            evict: BlockSet::new(),
        });
    }
    let leaving: BlockSet = prev_active.difference(candidate).copied().collect();
    Ok(SwapPlan {
        stage,
        triggered: true,
        overlap,
        new_active: candidate.clone(),
        load: candidate.difference(prev_active).copied().collect(),
        offload: leaving.difference(b_memory).copied().collect(),
        evict: leaving.intersection(b_memory).copied().collect(),
    })
}

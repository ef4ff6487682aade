use serde::{Deserialize, Serialize};

use crate::ccs::DEFAULT_K;
use crate::error::{Error, Result};
use crate::uncertainty::{UncertaintyVariant, DEFAULT_EPSILON};

/// Reliable-query count above which the shorter schedule is used.
pub const LARGE_TEST_SET: usize = 6000;
pub const ROUNDS_SMALL: usize = 50;
pub const ROUNDS_LARGE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Uncertainty-weighted entropy over cycle-consistent queries.
    #[default]
    Uatta,
    /// Plain entropy minimization over every query.
    Tent,
}

/// Where a query's negatives come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum NegativeSource {
    /// Ranks 2..k of the query's own list, topped up from outside the list.
    #[serde(rename = "topk")]
    TopK,
    /// Uniformly from the gallery minus the query's top-k list.
    #[default]
    #[serde(rename = "outside_topk")]
    OutsideTopK,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub k: usize,
    pub queries_per_batch: usize,
    pub negatives_per_query: usize,
    pub negative_source: NegativeSource,
    /// `None` picks 50 or 10 rounds from the reliable-query count.
    pub rounds: Option<usize>,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub uncertainty_variant: UncertaintyVariant,
    pub epsilon: f64,
    /// Treat the uncertainty weight as a constant during backpropagation.
    pub detach_uncertainty: bool,
    pub objective: Objective,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            k: DEFAULT_K,
            queries_per_batch: 32,
            negatives_per_query: 3,
            negative_source: NegativeSource::default(),
            rounds: None,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            uncertainty_variant: UncertaintyVariant::default(),
            epsilon: DEFAULT_EPSILON,
            detach_uncertainty: true,
            objective: Objective::default(),
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    /// Queries times tuple size; 128 with the defaults.
    pub fn effective_batch_size(&self) -> usize {
        self.queries_per_batch * (1 + self.negatives_per_query)
    }

    pub fn rounds_for(&self, n_reliable: usize) -> usize {
        self.rounds.unwrap_or(if n_reliable <= LARGE_TEST_SET {
            ROUNDS_SMALL
        } else {
            ROUNDS_LARGE
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if self.queries_per_batch == 0 {
            return bad("queries_per_batch must be at least 1");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.adam_eps) || !positive(self.epsilon) {
            return bad("adam_eps and epsilon must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }
}

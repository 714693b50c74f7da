//! Cache-efficiency score and the shaped objective maximized by the search.

use serde::Serialize;

use crate::budget::{FitnessConfig, LayerBudgets};

/// A task score together with its cache-efficiency shaping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ShapedFitness {
    /// Task metric after clamping at zero.
    pub raw_score: f64,
    pub cache_score: f64,
    pub shaped_value: f64,
    pub mean_budget: f64,
}

/// Efficiency multiplier in `[0, 1]` for a scheme whose average per-layer
/// budget is `mean_budget`.
///
/// Over-budget schemes lose linearly and hit zero at twice the target.
/// Under-budget schemes are discounted by at most `gamma`.
pub fn cache_score(mean_budget: f64, config: &FitnessConfig) -> f64 {
    let c = f64::from(config.target_budget);
    if mean_budget > c {
        (1.0 - (mean_budget - c) / c).max(0.0)
    } else {
        1.0 - config.gamma * (1.0 - mean_budget / c)
    }
}

/// `raw * (1 + lambda * cache_score(mean_budget))` with `raw` clamped at 0.
pub fn shape(raw_score: f64, mean_budget: f64, config: &FitnessConfig) -> ShapedFitness {
    let raw_score = raw_score.max(0.0);
    let cache_score = cache_score(mean_budget, config);
    ShapedFitness {
        raw_score,
        cache_score,
        shaped_value: raw_score * (1.0 + config.lambda * cache_score),
        mean_budget,
    }
}

pub fn shaped_fitness(raw_score: f64, budgets: &LayerBudgets, config: &FitnessConfig) -> ShapedFitness {
    shape(raw_score, budgets.mean(), config)
}

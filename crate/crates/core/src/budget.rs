//! Budget vectors, layer groups and run configuration.
//!
//! A budget is the number of cached token positions a layer keeps after
//! eviction. Everything in the public data model is integral; the only
//! place fractional budgets exist is inside the CMA-ES search space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a fixed-position cache chooses which positions to keep.
///
/// Carried as metadata in budget files so that evaluators which model
/// token positions can act on it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PositionPolicy {
    /// The first `sink_tokens` positions plus the most recent
    /// `budget - sink_tokens` positions.
    FixedPosition { sink_tokens: u32 },
}

impl PositionPolicy {
    /// Size of the recency window left for a layer with `budget` slots.
    pub fn recent_tokens(&self, budget: u32) -> u32 {
        match *self {
            PositionPolicy::FixedPosition { sink_tokens } => budget.saturating_sub(sink_tokens),
        }
    }
}

/// Per-layer KV cache budgets for a whole model.
///
/// Serializes to the canonical budget file format
/// `{"layer_count": L, "budgets": [k_1, ..., k_L]}` with an optional
/// `"policy"` object.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BudgetFile")]
pub struct LayerBudgets {
    layer_count: usize,
    budgets: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    policy: Option<PositionPolicy>,
}

#[derive(Deserialize)]
struct BudgetFile {
    layer_count: usize,
    budgets: Vec<u32>,
    #[serde(default)]
    policy: Option<PositionPolicy>,
}

impl TryFrom<BudgetFile> for LayerBudgets {
    type Error = Error;

    fn try_from(file: BudgetFile) -> Result<Self> {
        if file.budgets.len() != file.layer_count {
            return Err(Error::invalid(format!(
                "layer_count is {} but {} budgets were given",
                file.layer_count,
                file.budgets.len()
            )));
        }
        let mut budgets = LayerBudgets::new(file.budgets)?;
        budgets.policy = file.policy;
        Ok(budgets)
    }
}

impl LayerBudgets {
    pub fn new(budgets: Vec<u32>) -> Result<Self> {
        if budgets.is_empty() {
            return Err(Error::invalid("a budget vector needs at least one layer"));
        }
        Ok(LayerBudgets {
            layer_count: budgets.len(),
            budgets,
            policy: None,
        })
    }

    pub fn uniform(layer_count: usize, budget: u32) -> Result<Self> {
        Self::new(vec![budget; layer_count])
    }

    pub fn with_policy(mut self, policy: Option<PositionPolicy>) -> Self {
        self.policy = policy;
        self
    }

    pub fn layer_count(&self) -> usize {
        self.layer_count
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.budgets
    }

    pub fn into_vec(self) -> Vec<u32> {
        self.budgets
    }

    pub fn policy(&self) -> Option<&PositionPolicy> {
        self.policy.as_ref()
    }

    pub fn total(&self) -> u64 {
        self.budgets.iter().map(|&k| u64::from(k)).sum()
    }

    /// Average per-layer budget.
    pub fn mean(&self) -> f64 {
        self.total() as f64 / self.layer_count as f64
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Contiguous grouping of layers into optimization units.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupPartition {
    group_size: usize,
    groups: Vec<(usize, usize)>,
}

impl GroupPartition {
    pub fn group_size(&self) -> usize {
        self.group_size
    }

    pub fn group_count(&self) -> usize {
        self.groups.len()
    }

    /// Half-open `(start, end)` layer ranges, bottom layer first.
    pub fn groups(&self) -> &[(usize, usize)] {
        &self.groups
    }

    pub fn range(&self, group: usize) -> std::ops::Range<usize> {
        let (start, end) = self.groups[group];
        start..end
    }

    pub fn layer_count(&self) -> usize {
        self.groups.last().map_or(0, |&(_, end)| end)
    }
}

/// Splits `layer_count` layers into `ceil(layer_count / group_size)`
/// contiguous groups. Only the last group may be short.
pub fn partition_layers(layer_count: usize, group_size: usize) -> Result<GroupPartition> {
    if layer_count == 0 {
        return Err(Error::invalid("layer_count must be at least 1"));
    }
    if group_size == 0 {
        return Err(Error::invalid("group_size must be at least 1"));
    }
    let groups = (0..layer_count)
        .step_by(group_size)
        .map(|start| (start, (start + group_size).min(layer_count)))
        .collect();
    Ok(GroupPartition { group_size, groups })
}

/// CMA-ES population size for a group of `group_size` layers:
/// `4 + floor(3 ln n_g)`.
pub fn population_size_for(group_size: usize) -> Result<usize> {
    if group_size == 0 {
        return Err(Error::invalid("group_size must be at least 1"));
    }
    Ok(4 + (3.0 * (group_size as f64).ln()).floor() as usize)
}

/// Parameters of the cache-efficiency shaped objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitnessConfig {
    /// Target average per-layer budget `c`.
    pub target_budget: u32,
    /// Weight of the cache score in the shaped fitness.
    pub lambda: f64,
    /// Smoothing factor for under-budget schemes, in (0, 1].
    pub gamma: f64,
}

impl Default for FitnessConfig {
    fn default() -> Self {
        FitnessConfig {
            target_budget: 128,
            lambda: 0.3,
            gamma: 0.2,
        }
    }
}

impl FitnessConfig {
    pub fn new(target_budget: u32) -> Self {
        FitnessConfig {
            target_budget,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_budget < 1 {
            return Err(Error::invalid("target_budget must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda must be a non-negative number, got {}",
                self.lambda
            )));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::invalid(format!("gamma must lie in (0, 1], got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Settings of the group-wise evolutionary search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub group_size: usize,
    /// CMA-ES generations per group.
    pub max_iterations_per_group: usize,
    /// Initial step size in the normalized `[0, 1]` search box.
    pub sigma: f64,
    /// Overrides `population_size_for(group_size)` when set.
    pub population_size: Option<usize>,
    pub budget_lower_bound: u32,
    /// Defaults to four times the target budget.
    pub budget_upper_bound: Option<u32>,
    pub rng_seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            group_size: 8,
            max_iterations_per_group: 50,
            sigma: 0.3,
            population_size: None,
            budget_lower_bound: 1,
            budget_upper_bound: None,
            rng_seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn upper_bound(&self, target_budget: u32) -> u32 {
        self.budget_upper_bound
            .unwrap_or_else(|| target_budget.saturating_mul(4))
    }

    pub fn population(&self) -> Result<usize> {
        match self.population_size {
            Some(p) => Ok(p),
            None => population_size_for(self.group_size),
        }
    }

    pub fn validate(&self, fitness: &FitnessConfig) -> Result<()> {
        if self.group_size == 0 {
            return Err(Error::invalid("group_size must be at least 1"));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        if let Some(p) = self.population_size {
            if p < 2 {
                return Err(Error::invalid("population_size must be at least 2"));
            }
        }
        let c = fitness.target_budget;
        let upper = self.upper_bound(c);
        if !(self.budget_lower_bound <= c && c <= upper) {
            return Err(Error::invalid(format!(
                "bounds must satisfy lower <= target <= upper, got {} <= {} <= {}",
                self.budget_lower_bound, c, upper
            )));
        }
        if self.budget_lower_bound >= upper {
            return Err(Error::invalid("budget_lower_bound must be below budget_upper_bound"));
        }
        Ok(())
    }
}

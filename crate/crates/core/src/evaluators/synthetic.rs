//! Separable saturating task model with a known optimum.
//!
//! Layer `i` contributes `w_i * (1 - exp(-k_i / tau_i))`, so the score is
//! a sum of concave increasing curves and greedy unit-token allocation on
//! the marginal gains is exactly optimal.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::Evaluator;
use crate::budget::LayerBudgets;
use crate::error::{Error, EvalError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelFile")]
pub struct SaturatingTaskModel {
    weights: Vec<f64>,
    time_constants: Vec<f64>,
    noise_std: f64,
    rng_seed: u64,
}

#[derive(Deserialize)]
struct ModelFile {
    weights: Vec<f64>,
    time_constants: Vec<f64>,
    #[serde(default)]
    noise_std: f64,
    #[serde(default)]
    rng_seed: u64,
}

impl TryFrom<ModelFile> for SaturatingTaskModel {
    type Error = Error;

    fn try_from(f: ModelFile) -> Result<Self> {
        SaturatingTaskModel::new(f.weights, f.time_constants, f.noise_std, f.rng_seed)
    }
}

impl SaturatingTaskModel {
    /// Builds a model; `weights` are normalized to sum to one.
    pub fn new(weights: Vec<f64>, time_constants: Vec<f64>, noise_std: f64, rng_seed: u64) -> Result<Self> {
        if weights.is_empty() || weights.len() != time_constants.len() {
            return Err(Error::invalid(format!(
                "need one weight and one time constant per layer, got {} and {}",
                weights.len(),
                time_constants.len()
            )));
        }
        if weights
            .iter()
            .chain(&time_constants)
            .any(|&v| !(v > 0.0 && v.is_finite()))
        {
            return Err(Error::invalid("weights and time constants must be positive"));
        }
        if !(noise_std >= 0.0 && noise_std.is_finite()) {
            return Err(Error::invalid("noise_std must be non-negative"));
        }
        let total: f64 = weights.iter().sum();
        Ok(SaturatingTaskModel {
            weights: weights.iter().map(|w| w / total).collect(),
            time_constants,
            noise_std,
            rng_seed,
        })
    }

    /// Heterogeneous profile: heavy-tailed weights under a bump centred on
    /// the middle layers, time constants log-uniform in `[16, 512]`.
    pub fn mid_peaked(layer_count: usize, seed: u64) -> Result<Self> {
        if layer_count == 0 {
            return Err(Error::invalid("layer_count must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tails = LogNormal::new(0.0, 0.6).expect("valid lognormal");
        let centre = (layer_count as f64 - 1.0) / 2.0;
        let width = (layer_count as f64 / 6.0).max(1.0);
        let weights = (0..layer_count)
            .map(|i| {
                let bump = (-0.5 * ((i as f64 - centre) / width).powi(2)).exp();
                (0.15 + bump) * tails.sample(&mut rng)
            })
            .collect();
        let time_constants = (0..layer_count)
            .map(|_| 16.0 * 32f64.powf(rng.random::<f64>()))
            .collect();
        Self::new(weights, time_constants, 0.0, seed)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn time_constants(&self) -> &[f64] {
        &self.time_constants
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    /// Copy of the model with a different noise level.
    pub fn with_noise(&self, noise_std: f64, rng_seed: u64) -> Result<Self> {
        Self::new(self.weights.clone(), self.time_constants.clone(), noise_std, rng_seed)
    }

    pub fn noiseless_score(&self, budgets: &[u32]) -> f64 {
        budgets
            .iter()
            .zip(self.weights.iter().zip(&self.time_constants))
            .map(|(&k, (&w, &tau))| w * -(-f64::from(k) / tau).exp_m1())
            .sum()
    }

    /// Score gain of raising layer `layer` from `k` to `k + 1` tokens.
    pub fn marginal_gain(&self, layer: usize, k: u32) -> f64 {
        let tau = self.time_constants[layer];
        // w * (e^{-k/tau} - e^{-(k+1)/tau})
        self.weights[layer] * (-f64::from(k) / tau).exp() * -(-1.0 / tau).exp_m1()
    }

    fn noise(&self, budgets: &[u32]) -> f64 {
        if self.noise_std == 0.0 {
            return 0.0;
        }
        let mut hasher = Sha256::new();
        hasher.update(self.rng_seed.to_le_bytes());
        for k in budgets {
            hasher.update(k.to_le_bytes());
        }
        let digest = hasher.finalize();
        let key = u64::from_le_bytes(digest[..8].try_into().expect("sha256 yields 32 bytes"));
        let z: f64 = ChaCha8Rng::seed_from_u64(key).sample(StandardNormal);
        self.noise_std * z
    }
}

pub fn synthetic_evaluate(model: &SaturatingTaskModel, budgets: &LayerBudgets) -> Result<f64, EvalError> {
    if budgets.layer_count() != model.layer_count() {
        return Err(EvalError::DimensionMismatch {
            expected: model.layer_count(),
            actual: budgets.layer_count(),
        });
    }
    let k = budgets.as_slice();
    Ok(model.noiseless_score(k) + model.noise(k))
}

#[derive(PartialEq)]
struct Offer {
    gain: f64,
    layer: usize,
}

impl Eq for Offer {}

impl Ord for Offer {
    // Larger gain first, lower layer index first among ties.
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain
            .total_cmp(&other.gain)
            .then_with(|| other.layer.cmp(&self.layer))
    }
}

impl PartialOrd for Offer {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Greedy unit-token allocation; also returns the gain of every step.
pub(crate) fn greedy_allocation(model: &SaturatingTaskModel, total_budget: u64) -> (Vec<u32>, Vec<f64>) {
    let mut budgets = vec![0u32; model.layer_count()];
    let mut gains = Vec::with_capacity(total_budget as usize);
    let mut heap: BinaryHeap<Offer> = (0..model.layer_count())
        .map(|layer| Offer {
            gain: model.marginal_gain(layer, 0),
            layer,
        })
        .collect();
    for _ in 0..total_budget {
        let best = heap.pop().expect("one offer per layer is always queued");
        budgets[best.layer] += 1;
        gains.push(best.gain);
        heap.push(Offer {
            gain: model.marginal_gain(best.layer, budgets[best.layer]),
            layer: best.layer,
        });
    }
    (budgets, gains)
}

/// Noiseless optimum subject to `sum(k) <= total_budget`.
pub fn water_filling_optimum(model: &SaturatingTaskModel, total_budget: u64) -> (LayerBudgets, f64) {
    let (budgets, _) = greedy_allocation(model, total_budget);
    let score = model.noiseless_score(&budgets);
    (LayerBudgets::new(budgets).expect("model has at least one layer"), score)
}

/// In-process evaluator backed by a [`SaturatingTaskModel`].
#[derive(Clone, Debug)]
pub struct SyntheticEvaluator {
    model: SaturatingTaskModel,
}

impl SyntheticEvaluator {
    pub fn new(model: SaturatingTaskModel) -> Self {
        SyntheticEvaluator { model }
    }

    pub fn model(&self) -> &SaturatingTaskModel {
        &self.model
    }
}

impl Evaluator for SyntheticEvaluator {
    fn layer_count(&self) -> usize {
        self.model.layer_count()
    }

    fn metric_name(&self) -> &str {
        "synthetic_saturation"
    }

    fn max_concurrency(&self) -> usize {
        usize::MAX
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn evaluate(&self, budgets: &LayerBudgets) -> Result<f64, EvalError> {
        synthetic_evaluate(&self.model, budgets)
    }
}

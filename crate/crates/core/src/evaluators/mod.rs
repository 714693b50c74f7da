//! Black-box task scorers.
//!
//! An [`Evaluator`] maps a full per-layer budget vector to a downstream
//! task score. The search treats it as opaque; concurrency and determinism
//! hints come from the evaluator itself.

pub mod external;
pub mod protocol;
pub mod synthetic;

use std::time::Duration;

use crate::budget::LayerBudgets;
use crate::error::{Error, EvalError, Result};

pub use external::ExternalEvaluator;
pub use synthetic::{synthetic_evaluate, water_filling_optimum, SaturatingTaskModel, SyntheticEvaluator};

pub trait Evaluator: Send + Sync {
    fn layer_count(&self) -> usize;

    fn metric_name(&self) -> &str;

    /// Upper bound on simultaneous `evaluate` calls.
    fn max_concurrency(&self) -> usize {
        1
    }

    fn is_deterministic(&self) -> bool;

    fn evaluate(&self, budgets: &LayerBudgets) -> Result<f64, EvalError>;
}

/// Test double scoring a scheme as `mean_budget / 1000`.
#[derive(Clone, Debug)]
pub struct MeanBudgetEvaluator {
    pub layers: usize,
}

impl Evaluator for MeanBudgetEvaluator {
    fn layer_count(&self) -> usize {
        self.layers
    }

    fn metric_name(&self) -> &str {
        "mean_budget"
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn evaluate(&self, budgets: &LayerBudgets) -> Result<f64, EvalError> {
        if budgets.layer_count() != self.layers {
            return Err(EvalError::DimensionMismatch {
                expected: self.layers,
                actual: budgets.layer_count(),
            });
        }
        Ok(budgets.mean() / 1000.0)
    }
}

/// How to reach an evaluator, as written on the command line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EvaluatorSpec {
    /// `synthetic:<model.json>`
    Synthetic(String),
    /// `exec:<command line>`
    Exec(String),
}

impl std::str::FromStr for EvaluatorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("synthetic", path)) if !path.is_empty() => Ok(EvaluatorSpec::Synthetic(path.to_string())),
            Some(("exec", cmd)) if !cmd.trim().is_empty() => Ok(EvaluatorSpec::Exec(cmd.to_string())),
            _ => Err(Error::invalid(format!(
                "evaluator must be `synthetic:<file>` or `exec:<command>`, got `{s}`"
            ))),
        }
    }
}

impl std::fmt::Display for EvaluatorSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            EvaluatorSpec::Synthetic(path) => write!(f, "synthetic:{path}"),
            EvaluatorSpec::Exec(cmd) => write!(f, "exec:{cmd}"),
        }
    }
}

impl EvaluatorSpec {
    pub fn open(&self, timeout: Duration) -> Result<Box<dyn Evaluator>> {
        Ok(match self {
            EvaluatorSpec::Synthetic(path) => {
                let model = SaturatingTaskModel::from_path(path)
                    .map_err(|e| Error::invalid(format!("cannot load synthetic model `{path}`: {e}")))?;
                Box::new(SyntheticEvaluator::new(model))
            }
            EvaluatorSpec::Exec(cmd) => Box::new(ExternalEvaluator::spawn(cmd, timeout)?),
        })
    }
}

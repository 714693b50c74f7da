//! Per-layer KV cache budget allocation by group-wise evolutionary search.
//!
//! A transformer with `L` layers gets one integer cache budget per layer.
//! [`search::optimize`] looks for the allocation that maximizes a black-box
//! task score shaped by how well the average budget matches a target,
//! optimizing contiguous groups of layers one at a time with CMA-ES.
//! [`completion::complete`] re-targets any allocation to a new average and
//! [`allocators`] provides the heuristic baselines it is compared against.

pub mod allocators;
pub mod budget;
pub mod cli;
pub mod cmaes;
pub mod completion;
pub mod error;
pub mod evaluators;
pub mod fitness;
pub mod search;

pub use budget::{
    partition_layers, population_size_for, FitnessConfig, GroupPartition, LayerBudgets, PositionPolicy, SearchConfig,
};
pub use error::{Error, EvalError, Result};
pub use evaluators::Evaluator;
pub use search::{optimize, OptimizationResult, Optimizer, TrajectoryPoint};

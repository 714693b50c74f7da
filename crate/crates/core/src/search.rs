//! Bottom-up, group-wise evolutionary search over layer budgets.
//!
//! Every layer starts at the target budget. Groups are optimized one at a
//! time with a fresh CMA-ES run each; a candidate for group `j` is always
//! scored as the incumbent scheme with only group `j` swapped in. A
//! candidate replaces the incumbent only on strictly higher shaped fitness.

use std::collections::HashMap;
use std::io::Write;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::budget::{partition_layers, FitnessConfig, LayerBudgets, SearchConfig};
use crate::cmaes::CmaesState;
use crate::error::{Error, EvalError, Result};
use crate::evaluators::Evaluator;
use crate::fitness::{shape, ShapedFitness};

/// Which budgets the cache score averages over when a group candidate is
/// scored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheScoreScope {
    /// The candidate group's own budgets.
    Group,
    /// The whole evaluated scheme.
    #[default]
    Model,
}

/// One scored scheme in evaluation order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub group_index: usize,
    /// `0` marks the evaluation of the initial uniform scheme; CMA-ES
    /// generations count from `1`.
    pub generation: usize,
    pub evaluation_index: usize,
    #[serde(rename = "mean_budget")]
    pub candidate_mean_budget: f64,
    pub raw_score: f64,
    pub shaped_fitness: f64,
    pub best_so_far: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizationResult {
    pub best_budgets: LayerBudgets,
    pub best_fitness: f64,
    pub best_raw_score: f64,
    /// Shaped fitness of the initial uniform scheme.
    pub initial_fitness: f64,
    pub trajectory: Vec<TrajectoryPoint>,
    /// Candidate evaluations performed by the CMA-ES loop (groups x
    /// generations x population), memo hits included.
    pub evaluations_used: usize,
    /// Calls that actually reached the evaluator, the initial scheme included.
    pub evaluator_calls: usize,
}

/// Maps integer budgets in `[lower, upper]` onto `[0, 1]`.
pub fn encode_group(budgets: &[u32], lower: u32, upper: u32) -> Result<Vec<f64>> {
    if lower >= upper {
        return Err(Error::invalid(format!(
            "encoding needs lower < upper, got {lower} and {upper}"
        )));
    }
    let span = f64::from(upper - lower);
    budgets
        .iter()
        .map(|&k| {
            if k < lower || k > upper {
                Err(Error::invalid(format!("budget {k} outside [{lower}, {upper}]")))
            } else {
                Ok(f64::from(k - lower) / span)
            }
        })
        .collect()
}

/// Inverse of [`encode_group`], rounding half up.
pub fn decode_group(x: &[f64], lower: u32, upper: u32) -> Vec<u32> {
    let span = f64::from(upper.saturating_sub(lower));
    x.iter()
        .map(|&v| {
            let k = (f64::from(lower) + v.clamp(0.0, 1.0) * span + 0.5).floor();
            (k as u32).clamp(lower, upper)
        })
        .collect()
}

/// Runs the group-wise search with default options.
pub fn optimize(
    evaluator: &dyn Evaluator,
    fitness: &FitnessConfig,
    search: &SearchConfig,
    layer_count: usize,
) -> Result<OptimizationResult> {
    Optimizer::new(evaluator, fitness.clone(), search.clone()).run(layer_count)
}

pub struct Optimizer<'a> {
    evaluator: &'a dyn Evaluator,
    fitness: FitnessConfig,
    search: SearchConfig,
    scope: CacheScoreScope,
    jobs: usize,
}

impl<'a> Optimizer<'a> {
    pub fn new(evaluator: &'a dyn Evaluator, fitness: FitnessConfig, search: SearchConfig) -> Self {
        Optimizer {
            evaluator,
            fitness,
            search,
            scope: CacheScoreScope::default(),
            jobs: 1,
        }
    }

    /// Caps concurrent evaluator calls per generation. The evaluator's own
    /// limit still applies.
    pub fn jobs(mut self, jobs: usize) -> Self {
        self.jobs = jobs.max(1);
        self
    }

    pub fn cache_score_scope(mut self, scope: CacheScoreScope) -> Self {
        self.scope = scope;
        self
    }

    pub fn run(&self, layer_count: usize) -> Result<OptimizationResult> {
        self.fitness.validate()?;
        self.search.validate(&self.fitness)?;
        if self.evaluator.layer_count() != layer_count {
            return Err(Error::invalid(format!(
                "evaluator scores {} layers, run asks for {layer_count}",
                self.evaluator.layer_count()
            )));
        }
        let partition = partition_layers(layer_count, self.search.group_size)?;
        let population = self.search.population()?;
        let lower = self.search.budget_lower_bound;
        let upper = self.search.upper_bound(self.fitness.target_budget);
        let target = self.fitness.target_budget;

        let mut memo = Memo::new(self.evaluator, self.jobs);
        let mut incumbent = vec![target; layer_count];
        let mut trajectory = Vec::new();

        let initial_raw = memo
            .evaluate_all(std::slice::from_ref(&incumbent))
            .map_err(|source| Error::Evaluation {
                group: 0,
                generation: 0,
                source,
            })?[0];
        let initial = self.shaped(initial_raw, &incumbent, 0..layer_count);
        let mut best_fitness = initial.shaped_value;
        let mut best_raw = initial.raw_score;
        trajectory.push(TrajectoryPoint {
            group_index: 0,
            generation: 0,
            evaluation_index: 0,
            candidate_mean_budget: initial.mean_budget,
            raw_score: initial.raw_score,
            shaped_fitness: initial.shaped_value,
            best_so_far: best_fitness,
        });
        let mut evaluations_used = 0;

        for (group, &(start, end)) in partition.groups().iter().enumerate() {
            let initial_mean = encode_group(&incumbent[start..end], lower, upper)?;
            let mut cma = CmaesState::initialize(
                end - start,
                &initial_mean,
                self.search.sigma,
                population,
                group_seed(self.search.rng_seed, group),
            )?;
            for generation in 1..=self.search.max_iterations_per_group {
                let mut candidates = cma.ask();
                let schemes: Vec<Vec<u32>> = candidates
                    .iter()
                    .map(|cand| {
                        let mut scheme = incumbent.clone();
                        scheme[start..end].copy_from_slice(&decode_group(&cand.clipped, lower, upper));
                        scheme
                    })
                    .collect();
                let raws = memo.evaluate_all(&schemes).map_err(|source| Error::Evaluation {
                    group,
                    generation,
                    source,
                })?;

                for ((cand, scheme), raw) in candidates.iter_mut().zip(schemes).zip(raws) {
                    let scored = self.shaped(raw, &scheme, start..end);
                    cand.fitness = Some(scored.shaped_value);
                    if scored.shaped_value > best_fitness {
                        best_fitness = scored.shaped_value;
                        best_raw = scored.raw_score;
                        incumbent = scheme;
                    }
                    trajectory.push(TrajectoryPoint {
                        group_index: group,
                        generation,
                        evaluation_index: trajectory.len(),
                        candidate_mean_budget: scored.mean_budget,
                        raw_score: scored.raw_score,
                        shaped_fitness: scored.shaped_value,
                        best_so_far: best_fitness,
                    });
                    evaluations_used += 1;
                }
                cma.tell(&candidates)?;
            }
        }

        Ok(OptimizationResult {
            best_budgets: LayerBudgets::new(incumbent)?,
            best_fitness,
            best_raw_score: best_raw,
            initial_fitness: initial.shaped_value,
            trajectory,
            evaluations_used,
            evaluator_calls: memo.calls,
        })
    }

    fn shaped(&self, raw: f64, scheme: &[u32], group: std::ops::Range<usize>) -> ShapedFitness {
        let scored = match self.scope {
            CacheScoreScope::Group => &scheme[group],
            CacheScoreScope::Model => scheme,
        };
        let mean = scored.iter().map(|&k| f64::from(k)).sum::<f64>() / scored.len() as f64;
        shape(raw, mean, &self.fitness)
    }
}

fn group_seed(seed: u64, group: usize) -> u64 {
    seed ^ (group as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Evaluation cache keyed on the full integer budget vector.
struct Memo<'a> {
    evaluator: &'a dyn Evaluator,
    jobs: usize,
    scores: HashMap<Vec<u32>, f64>,
    calls: usize,
}

impl<'a> Memo<'a> {
    fn new(evaluator: &'a dyn Evaluator, jobs: usize) -> Self {
        Memo {
            evaluator,
            jobs: jobs.min(evaluator.max_concurrency()).max(1),
            scores: HashMap::new(),
            calls: 0,
        }
    }

    fn evaluate_all(&mut self, schemes: &[Vec<u32>]) -> Result<Vec<f64>, EvalError> {
        let mut fresh: Vec<&Vec<u32>> = Vec::new();
        for s in schemes {
            if !self.scores.contains_key(s) && !fresh.contains(&s) {
                fresh.push(s);
            }
        }
        let results = self.dispatch(&fresh);
        // Report the first failure in request order.
        for (scheme, result) in fresh.iter().zip(results) {
            let score = result?;
            self.calls += 1;
            self.scores.insert((*scheme).clone(), score);
        }
        Ok(schemes.iter().map(|s| self.scores[s]).collect())
    }

    fn dispatch(&self, schemes: &[&Vec<u32>]) -> Vec<Result<f64, EvalError>> {
        let call = |s: &Vec<u32>| -> Result<f64, EvalError> {
            let budgets = LayerBudgets::new(s.clone()).expect("schemes are never empty");
            let score = self.evaluator.evaluate(&budgets)?;
            if score.is_finite() {
                Ok(score)
            } else {
                Err(EvalError::NonFinite(score))
            }
        };
        if self.jobs == 1 || schemes.len() < 2 {
            return schemes.iter().map(|s| call(s)).collect();
        }
        let slots: Vec<Mutex<Option<Result<f64, EvalError>>>> = schemes.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..self.jobs.min(schemes.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= schemes.len() {
                        break;
                    }
                    *slots[i].lock().expect("slot lock") = Some(call(schemes[i]));
                });
            }
        });
        slots
            .into_iter()
            .map(|slot| slot.into_inner().expect("slot lock").expect("every slot is filled"))
            .collect()
    }
}

/// Writes the trajectory as CSV with a header row.
pub fn write_trajectory_csv<W: Write>(points: &[TrajectoryPoint], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for p in points {
        out.serialize(p)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluators::{MeanBudgetEvaluator, SaturatingTaskModel, SyntheticEvaluator};
    use proptest::prelude::*;
    use std::sync::atomic::AtomicUsize;

    struct Constant(usize, f64);

    impl Evaluator for Constant {
        fn layer_count(&self) -> usize {
            self.0
        }
        fn metric_name(&self) -> &str {
            "constant"
        }
        fn is_deterministic(&self) -> bool {
            true
        }
        fn evaluate(&self, _: &LayerBudgets) -> Result<f64, EvalError> {
            Ok(self.1)
        }
    }

    struct Counting {
        inner: SyntheticEvaluator,
        calls: AtomicUsize,
        fail_after: Option<usize>,
    }

    impl Evaluator for Counting {
        fn layer_count(&self) -> usize {
            self.inner.layer_count()
        }
        fn metric_name(&self) -> &str {
            "counting"
        }
        fn max_concurrency(&self) -> usize {
            4
        }
        fn is_deterministic(&self) -> bool {
            true
        }
        fn evaluate(&self, b: &LayerBudgets) -> Result<f64, EvalError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if self.fail_after.is_some_and(|limit| n >= limit) {
                return Err(EvalError::ProcessExited("gone".into()));
            }
            if b.as_slice()[0] == u32::MAX {
                return Ok(f64::NAN);
            }
            self.inner.evaluate(b)
        }
    }

    fn small_model() -> SyntheticEvaluator {
        SyntheticEvaluator::new(SaturatingTaskModel::mid_peaked(8, 5).unwrap())
    }

    fn quick_search(seed: u64) -> SearchConfig {
        SearchConfig {
            group_size: 4,
            max_iterations_per_group: 5,
            rng_seed: seed,
            ..SearchConfig::default()
        }
    }

    #[test]
    fn encode_endpoints() {
        assert_eq!(encode_group(&[1, 512], 1, 512).unwrap(), vec![0.0, 1.0]);
        let x = encode_group(&[128], 1, 512).unwrap()[0];
        assert!((x - 127.0 / 511.0).abs() < 1e-15);
        assert!((x - 0.2485).abs() < 1e-4);
        assert!(encode_group(&[0], 1, 512).is_err());
        assert!(encode_group(&[600], 1, 512).is_err());
        assert!(encode_group(&[5], 5, 5).is_err());
    }

    #[test]
    fn decode_rounds_half_up() {
        assert_eq!(decode_group(&[0.5], 0, 256), vec![128]);
        assert_eq!(decode_group(&[1.0], 1, 512), vec![512]);
        assert_eq!(decode_group(&[0.0], 1, 512), vec![1]);
        assert_eq!(decode_group(&[0.2485], 1, 512), vec![128]);
        // 0.25 * 2 = 0.5 exactly -> rounds up.
        assert_eq!(decode_group(&[0.25], 0, 2), vec![1]);
    }

    #[test]
    fn one_group_one_generation_accounting() {
        let eval = small_model();
        let search = SearchConfig {
            group_size: 8,
            max_iterations_per_group: 1,
            population_size: Some(10),
            rng_seed: 3,
            ..SearchConfig::default()
        };
        let r = optimize(&eval, &FitnessConfig::new(128), &search, 8).unwrap();
        assert_eq!(r.evaluations_used, 10);
        assert_eq!(r.trajectory.len(), 11);
        assert!(r.evaluator_calls <= 11);
    }

    #[test]
    fn constant_fitness_keeps_uniform_incumbent() {
        let eval = Constant(16, 0.5);
        let search = SearchConfig {
            group_size: 8,
            max_iterations_per_group: 4,
            ..SearchConfig::default()
        };
        let r = optimize(&eval, &FitnessConfig::new(64), &search, 16).unwrap();
        assert_eq!(r.best_budgets, LayerBudgets::uniform(16, 64).unwrap());
        assert_eq!(r.best_fitness, 0.5 * 1.3);
        assert_eq!(r.best_fitness, r.initial_fitness);
    }

    #[test]
    fn never_worse_than_uniform() {
        let eval = small_model();
        let fitness = FitnessConfig::new(64);
        let r = optimize(&eval, &fitness, &quick_search(1), 8).unwrap();
        let uniform = LayerBudgets::uniform(8, 64).unwrap();
        let uniform_fit = shape(eval.evaluate(&uniform).unwrap(), 64.0, &fitness).shaped_value;
        assert!(r.best_fitness >= uniform_fit);
        assert!(r.trajectory.windows(2).all(|w| w[0].best_so_far <= w[1].best_so_far));
    }

    #[test]
    fn incumbent_reproduces_its_score() {
        let eval = small_model();
        let r = optimize(&eval, &FitnessConfig::new(64), &quick_search(2), 8).unwrap();
        assert_eq!(eval.evaluate(&r.best_budgets).unwrap(), r.best_raw_score);
        let upper = 64 * 4;
        assert!(r.best_budgets.as_slice().iter().all(|&k| (1..=upper).contains(&k)));
    }

    #[test]
    fn evaluator_layer_count_must_match() {
        let eval = MeanBudgetEvaluator { layers: 4 };
        assert!(optimize(&eval, &FitnessConfig::new(8), &quick_search(0), 5).is_err());
    }

    #[test]
    fn failure_carries_group_and_generation() {
        let eval = Counting {
            inner: small_model(),
            calls: AtomicUsize::new(0),
            fail_after: Some(15),
        };
        let err = optimize(&eval, &FitnessConfig::new(64), &quick_search(0), 8).unwrap_err();
        match err {
            Error::Evaluation { group, generation, .. } => {
                assert_eq!(group, 0);
                assert!(generation >= 1);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn non_finite_scores_are_errors() {
        let eval = Counting {
            inner: small_model(),
            calls: AtomicUsize::new(0),
            fail_after: None,
        };
        let mut memo = Memo::new(&eval, 1);
        let bad = vec![vec![u32::MAX; 8]];
        assert!(matches!(memo.evaluate_all(&bad), Err(EvalError::NonFinite(_))));
    }

    #[test]
    fn concurrent_and_serial_runs_agree() {
        let eval = Counting {
            inner: small_model(),
            calls: AtomicUsize::new(0),
            fail_after: None,
        };
        let fitness = FitnessConfig::new(64);
        let serial = Optimizer::new(&eval, fitness.clone(), quick_search(4)).run(8).unwrap();
        let parallel = Optimizer::new(&eval, fitness, quick_search(4)).jobs(4).run(8).unwrap();
        assert_eq!(serial, parallel);
    }

    #[test]
    fn trajectory_csv_header() {
        let eval = small_model();
        let r = optimize(&eval, &FitnessConfig::new(64), &quick_search(0), 8).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&r.trajectory, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "group_index,generation,evaluation_index,mean_budget,raw_score,shaped_fitness,best_so_far"
        );
        assert_eq!(text.lines().count(), r.trajectory.len() + 1);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(lower in 0u32..1000, span in 1u32..5000, offset in 0u32..5000) {
            let upper = lower + span;
            let k = lower + offset % (span + 1);
            let x = encode_group(&[k], lower, upper).unwrap();
            prop_assert_eq!(decode_group(&x, lower, upper), vec![k]);
        }

        #[test]
        fn decode_stays_in_bounds(x in proptest::collection::vec(-2.0f64..3.0, 1..16), lower in 0u32..100, span in 1u32..1000) {
            let out = decode_group(&x, lower, lower + span);
            prop_assert!(out.iter().all(|&k| k >= lower && k <= lower + span));
        }
    }

    #[test]
    fn candidates_only_touch_their_group() {
        struct Recorder {
            inner: SyntheticEvaluator,
            seen: Mutex<Vec<Vec<u32>>>,
        }
        impl Evaluator for Recorder {
            fn layer_count(&self) -> usize {
                self.inner.layer_count()
            }
            fn metric_name(&self) -> &str {
                "recorder"
            }
            fn is_deterministic(&self) -> bool {
                true
            }
            fn evaluate(&self, b: &LayerBudgets) -> Result<f64, EvalError> {
                self.seen.lock().unwrap().push(b.as_slice().to_vec());
                self.inner.evaluate(b)
            }
        }
        let eval = Recorder {
            inner: small_model(),
            seen: Mutex::new(Vec::new()),
        };
        let r = optimize(&eval, &FitnessConfig::new(64), &quick_search(9), 8).unwrap();
        let seen = eval.seen.lock().unwrap();
        assert_eq!(seen[0], vec![64; 8]);
        let frozen = &r.best_budgets.as_slice()[..4];
        let mut in_second_group = false;
        for s in seen.iter().skip(1) {
            in_second_group |= s[4..] != [64; 4];
            if in_second_group {
                assert_eq!(&s[..4], frozen);
            } else {
                assert_eq!(&s[4..], &[64; 4]);
            }
        }
        assert!(in_second_group);
    }
}

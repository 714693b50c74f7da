//! Command-line front end: `optimize`, `complete`, `baseline`, `score`
//! and `compare`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::allocators::{fixed_position_allocation, pyramidal_allocation, uniform_allocation};
use crate::budget::{FitnessConfig, LayerBudgets, SearchConfig};
use crate::completion::{complete, is_down_scaling};
use crate::error::{Error, Result};
use crate::evaluators::EvaluatorSpec;
use crate::fitness::shaped_fitness;
use crate::search::{write_trajectory_csv, CacheScoreScope, Optimizer};

pub const SEED_ENV: &str = "EVOLKV_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "layerbudget",
    version,
    about = "Evolutionary per-layer KV cache budget allocation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search for per-layer budgets against an evaluator.
    Optimize(OptimizeArgs),
    /// Re-target a budget file to a new average budget.
    Complete(CompleteArgs),
    /// Write a heuristic baseline allocation.
    Baseline(BaselineArgs),
    /// Score one budget file.
    Score(ScoreArgs),
    /// Score several budget files and rank them.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    /// JSON run configuration; a previous run's manifest.json works too.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of model layers; defaults to what the evaluator reports.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub target_budget: Option<u32>,
    #[arg(long)]
    pub group_size: Option<usize>,
    /// CMA-ES generations per group.
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub lower_bound: Option<u32>,
    #[arg(long)]
    pub upper_bound: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub cache_score_scope: Option<ScopeArg>,
    /// `synthetic:<model.json>` or `exec:<command>`.
    #[arg(long)]
    pub evaluator: Option<String>,
    /// Maximum concurrent evaluations.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Per-evaluation timeout in seconds for external evaluators.
    #[arg(long)]
    pub timeout: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScopeArg {
    Group,
    Model,
}

impl From<ScopeArg> for CacheScoreScope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Group => CacheScoreScope::Group,
            ScopeArg::Model => CacheScoreScope::Model,
        }
    }
}

#[derive(Debug, Args)]
pub struct CompleteArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Target average per-layer budget.
    #[arg(long)]
    pub target: u32,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Strategy {
    Uniform,
    Pyramid,
    FixedPosition,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long, value_enum)]
    pub strategy: Strategy,
    #[arg(long)]
    pub layers: usize,
    /// Target average per-layer budget.
    #[arg(long)]
    pub budget: u32,
    /// Top-to-bottom budget ratio of the pyramid.
    #[arg(long, default_value_t = 0.2)]
    pub taper: f64,
    /// Attention-sink positions kept by the fixed-position layout.
    #[arg(long, default_value_t = 4)]
    pub sink: u32,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub budgets: PathBuf,
    #[arg(long)]
    pub evaluator: String,
    #[arg(long, default_value_t = 600.0)]
    pub timeout: f64,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub evaluator: String,
    /// Target average budget used for the shaped fitness column.
    #[arg(long)]
    pub target_budget: u32,
    #[arg(long, default_value_t = 0.3)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0.2)]
    pub gamma: f64,
    #[arg(long, default_value_t = 600.0)]
    pub timeout: f64,
    /// CSV output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Budget files, optionally as `name=path`.
    #[arg(required = true)]
    pub budgets: Vec<String>,
}

/// Run configuration file. Every field is optional; missing ones fall back
/// to the built-in defaults and command-line flags override them.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub layers: Option<usize>,
    pub evaluator: Option<String>,
    pub jobs: Option<usize>,
    pub timeout_seconds: Option<f64>,
    pub cache_score_scope: Option<CacheScoreScope>,
    pub fitness: FitnessConfig,
    pub search: SearchConfig,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub layers: usize,
    pub evaluator: String,
    pub metric: String,
    pub jobs: usize,
    pub timeout_seconds: f64,
    pub cache_score_scope: CacheScoreScope,
    pub fitness: FitnessConfig,
    pub search: SearchConfig,
    pub results: RunSummary,
}

#[derive(Debug, Serialize)]
pub struct RunSummary {
    pub best_fitness: f64,
    pub best_raw_score: f64,
    pub initial_fitness: f64,
    pub mean_budget: f64,
    pub completed_mean_budget: f64,
    pub evaluations_used: usize,
    pub evaluator_calls: usize,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Optimize(args) => cmd_optimize(args),
        Command::Complete(args) => cmd_complete(args),
        Command::Baseline(args) => cmd_baseline(args),
        Command::Score(args) => cmd_score(args),
        Command::Compare(args) => cmd_compare(args),
    }
}

fn read_budgets(path: &Path) -> Result<LayerBudgets> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    LayerBudgets::from_json(&text)
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn timeout(seconds: f64) -> Result<Duration> {
    Duration::try_from_secs_f64(seconds)
        .ok()
        .filter(|d| !d.is_zero())
        .ok_or_else(|| Error::invalid(format!("timeout must be a positive number of seconds, got {seconds}")))
}

fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::invalid(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

/// Merges defaults, the config file and flags, in increasing precedence.
/// A seed in the environment overrides all three.
pub fn resolve_config(args: &OptimizeArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => serde_json::from_str::<RunConfig>(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    let f = &mut cfg.fitness;
    if let Some(v) = args.target_budget {
        f.target_budget = v;
    }
    if let Some(v) = args.lambda {
        f.lambda = v;
    }
    if let Some(v) = args.gamma {
        f.gamma = v;
    }
    let s = &mut cfg.search;
    if let Some(v) = args.group_size {
        s.group_size = v;
    }
    if let Some(v) = args.iterations {
        s.max_iterations_per_group = v;
    }
    if let Some(v) = args.sigma {
        s.sigma = v;
    }
    if args.population.is_some() {
        s.population_size = args.population;
    }
    if let Some(v) = args.lower_bound {
        s.budget_lower_bound = v;
    }
    if args.upper_bound.is_some() {
        s.budget_upper_bound = args.upper_bound;
    }
    if let Some(v) = args.seed {
        s.rng_seed = v;
    }
    if let Some(v) = seed_from_env()? {
        s.rng_seed = v;
    }
    if args.layers.is_some() {
        cfg.layers = args.layers;
    }
    if args.evaluator.is_some() {
        cfg.evaluator = args.evaluator.clone();
    }
    if args.jobs.is_some() {
        cfg.jobs = args.jobs;
    }
    if args.timeout.is_some() {
        cfg.timeout_seconds = args.timeout;
    }
    if let Some(scope) = args.cache_score_scope {
        cfg.cache_score_scope = Some(scope.into());
    }
    Ok(cfg)
}

pub fn cmd_optimize(args: OptimizeArgs) -> Result<()> {
    let mut cfg = resolve_config(&args)?;
    let spec: EvaluatorSpec = cfg
        .evaluator
        .as_deref()
        .ok_or_else(|| Error::invalid("no evaluator given (use --evaluator)"))?
        .parse()?;
    let timeout_seconds = cfg.timeout_seconds.unwrap_or(600.0);
    let evaluator = spec.open(timeout(timeout_seconds)?)?;
    let layers = cfg.layers.unwrap_or_else(|| evaluator.layer_count());
    let jobs = cfg.jobs.unwrap_or(1).max(1);
    let scope = cfg.cache_score_scope.unwrap_or_default();

    // Pin derived defaults so the manifest replays exactly.
    cfg.search.population_size = Some(cfg.search.population()?);
    cfg.search.budget_upper_bound = Some(cfg.search.upper_bound(cfg.fitness.target_budget));

    let result = Optimizer::new(evaluator.as_ref(), cfg.fitness.clone(), cfg.search.clone())
        .jobs(jobs)
        .cache_score_scope(scope)
        .run(layers)?;
    let completed = complete(&result.best_budgets, cfg.fitness.target_budget)?;

    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("budgets.json"), result.best_budgets.to_json_pretty()?)?;
    fs::write(args.out.join("budgets.completed.json"), completed.to_json_pretty()?)?;
    write_trajectory_csv(&result.trajectory, fs::File::create(args.out.join("trajectory.csv"))?)?;

    let manifest = RunManifest {
        tool: format!("layerbudget {}", env!("CARGO_PKG_VERSION")),
        layers,
        evaluator: spec.to_string(),
        metric: evaluator.metric_name().to_string(),
        jobs,
        timeout_seconds,
        cache_score_scope: scope,
        fitness: cfg.fitness.clone(),
        search: cfg.search.clone(),
        results: RunSummary {
            best_fitness: result.best_fitness,
            best_raw_score: result.best_raw_score,
            initial_fitness: result.initial_fitness,
            mean_budget: result.best_budgets.mean(),
            completed_mean_budget: completed.mean(),
            evaluations_used: result.evaluations_used,
            evaluator_calls: result.evaluator_calls,
        },
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(args.out.join("manifest.json"), text)?;

    println!(
        "best shaped fitness {:.6} (raw {:.6}, uniform {:.6}); mean budget {:.2}; {} evaluations; wrote {}",
        result.best_fitness,
        result.best_raw_score,
        result.initial_fitness,
        result.best_budgets.mean(),
        result.evaluations_used,
        args.out.display()
    );
    Ok(())
}

pub fn cmd_complete(args: CompleteArgs) -> Result<()> {
    let budgets = read_budgets(&args.input)?;
    let completed = complete(&budgets, args.target)?;
    if is_down_scaling(&budgets, args.target) {
        eprintln!(
            "note: down-scaled from mean {:.2} to target {}",
            budgets.mean(),
            args.target
        );
    }
    emit(&completed.to_json_pretty()?, args.out.as_deref())
}

pub fn cmd_baseline(args: BaselineArgs) -> Result<()> {
    let budgets = match args.strategy {
        Strategy::Uniform => uniform_allocation(args.layers, args.budget)?,
        Strategy::Pyramid => pyramidal_allocation(args.layers, args.budget, args.taper)?,
        Strategy::FixedPosition => fixed_position_allocation(args.layers, args.budget, args.sink)?,
    };
    emit(&budgets.to_json_pretty()?, args.out.as_deref())
}

pub fn cmd_score(args: ScoreArgs) -> Result<()> {
    let budgets = read_budgets(&args.budgets)?;
    let spec: EvaluatorSpec = args.evaluator.parse()?;
    let evaluator = spec.open(timeout(args.timeout)?)?;
    let score = evaluator.evaluate(&budgets)?;
    if !score.is_finite() {
        return Err(crate::error::EvalError::NonFinite(score).into());
    }
    println!("{score}");
    Ok(())
}

/// One row of the `compare` table.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CompareRow {
    pub name: String,
    pub mean_budget: f64,
    pub raw_score: f64,
    pub shaped_fitness: f64,
}

fn named(entry: &str) -> (String, PathBuf) {
    match entry.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(entry);
            let name = path
                .file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.strip_suffix(".json").unwrap_or(n).to_string())
                .unwrap_or_else(|| entry.to_string());
            (name, path)
        }
    }
}

pub fn cmd_compare(args: CompareArgs) -> Result<()> {
    let fitness = FitnessConfig {
        target_budget: args.target_budget,
        lambda: args.lambda,
        gamma: args.gamma,
    };
    fitness.validate()?;
    let spec: EvaluatorSpec = args.evaluator.parse()?;
    let evaluator = spec.open(timeout(args.timeout)?)?;
    let mut rows = Vec::with_capacity(args.budgets.len());
    for entry in &args.budgets {
        let (name, path) = named(entry);
        let budgets = read_budgets(&path)?;
        let raw = evaluator.evaluate(&budgets)?;
        if !raw.is_finite() {
            return Err(crate::error::EvalError::NonFinite(raw).into());
        }
        let shaped = shaped_fitness(raw, &budgets, &fitness);
        rows.push(CompareRow {
            name,
            mean_budget: budgets.mean(),
            raw_score: raw,
            shaped_fitness: shaped.shaped_value,
        });
    }
    rows.sort_by(|a, b| b.raw_score.total_cmp(&a.raw_score).then_with(|| a.name.cmp(&b.name)));

    let mut out = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        out.serialize(row)?;
    }
    let bytes = out.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    emit(
        &String::from_utf8(bytes).expect("csv output is utf-8"),
        args.out.as_deref(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compare_names() {
        assert_eq!(
            named("runs/uniform.json"),
            ("uniform".into(), PathBuf::from("runs/uniform.json"))
        );
        assert_eq!(
            named("best=run1/budgets.json"),
            ("best".into(), PathBuf::from("run1/budgets.json"))
        );
        assert_eq!(named("run1/budgets.completed.json").0, "budgets.completed");
    }

    #[test]
    fn defaults_follow_published_settings() {
        let args = Cli::try_parse_from([
            "layerbudget",
            "optimize",
            "--out",
            "x",
            "--evaluator",
            "synthetic:m.json",
        ])
        .unwrap();
        let Command::Optimize(args) = args.command else {
            panic!()
        };
        if std::env::var(SEED_ENV).is_ok() {
            return;
        }
        let cfg = resolve_config(&args).unwrap();
        assert_eq!(cfg.fitness.lambda, 0.3);
        assert_eq!(cfg.fitness.gamma, 0.2);
        assert_eq!(cfg.search.sigma, 0.3);
        assert_eq!(cfg.search.group_size, 8);
        assert_eq!(cfg.search.population().unwrap(), 10);
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(
            &path,
            r#"{"layers": 16, "fitness": {"lambda": 0.5}, "search": {"group_size": 4, "sigma": 0.1}}"#,
        )
        .unwrap();
        let args = Cli::try_parse_from([
            "layerbudget",
            "optimize",
            "--out",
            "x",
            "--config",
            path.to_str().unwrap(),
            "--sigma",
            "0.2",
        ])
        .unwrap();
        let Command::Optimize(args) = args.command else {
            panic!()
        };
        let cfg = resolve_config(&args).unwrap();
        assert_eq!(cfg.layers, Some(16));
        assert_eq!(cfg.fitness.lambda, 0.5);
        assert_eq!(cfg.fitness.gamma, 0.2);
        assert_eq!(cfg.search.group_size, 4);
        assert_eq!(cfg.search.sigma, 0.2);
    }

    #[test]
    fn rejects_bad_timeouts() {
        assert!(timeout(0.0).is_err());
        assert!(timeout(-1.0).is_err());
        assert!(timeout(f64::NAN).is_err());
        assert_eq!(timeout(1.5).unwrap(), Duration::from_millis(1500));
    }
}

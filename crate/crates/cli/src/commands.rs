//! Subcommand handlers.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use bandex_core::datagen::{log_interactions, GenConfig};
use bandex_core::estimators::{
    augmented_ips, build_minsup, conservative_model, dm, dr, ips, minsup_estimate, AugmentOptions,
    EstimatorReport, DEFAULT_WEIGHT_BOUND,
};
use bandex_core::learning::{train_erm, train_reward_model, ObjectiveKind, RegressionConfig, TrainConfig, TrainInputs};
use bandex_core::oracle::{exact_ips_bias, ExactReport};
use bandex_core::policy::Policy;
use bandex_core::selection::{default_grid, sweep_k, SweepInputs, SweepResult};
use bandex_core::{LoggedDataset, RewardModel};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::collections::BTreeMap;

use crate::config::{EstimatorKind, ExperimentConfig};
use crate::error::{CliError, Result};
use crate::experiment::{self, build_scenario, key_name};
use crate::io::{read_dataset, read_json, read_policy, read_problem, write_dataset, write_json, PolicyFile};
use crate::verify::{self, Level};

#[derive(Debug, Parser)]
#[command(name = "bandex", version, about = "Off-policy bandit learning under support-deficient logging")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a problem, its logging policy and train/validation logs.
    Gen(GenArgs),
    /// Log interactions from a problem with a given policy.
    Log(LogArgs),
    /// Train a policy on a logged dataset.
    Train(TrainArgs),
    /// Estimate a policy's value from a logged dataset.
    Eval(EvalArgs),
    /// Sweep the reward shift and report each selector's choice.
    SweepK(SweepArgs),
    /// Run a full experiment over seeds and deficiency levels.
    Run(RunArgs),
    /// Check the estimator identities against the exact oracle.
    Verify(VerifyArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// GenConfig JSON.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LogArgs {
    #[arg(long)]
    pub problem: PathBuf,
    #[arg(long)]
    pub logging: PathBuf,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output JSON Lines file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TrainConfig JSON.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub problem: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Logging policy; required by the restricted and augmented objectives.
    #[arg(long)]
    pub logging: Option<PathBuf>,
    /// Reward model JSON for the augmented objective. Defaults to imputing
    /// the minimum reward.
    #[arg(long)]
    pub reward_model: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub problem: PathBuf,
    #[arg(long)]
    pub logging: PathBuf,
    #[arg(long)]
    pub policy: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Comma-separated estimators; defaults to all.
    #[arg(long, value_delimiter = ',')]
    pub estimators: Vec<EstimatorKind>,
    /// Reward model JSON. Without one, a regression is fitted on `--data`.
    #[arg(long)]
    pub reward_model: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// ExperimentConfig JSON.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Run this seed only.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long, value_enum, default_value_t = Level::Fast)]
    pub level: Level,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Runs `command`; `Ok(false)` means verify reported failures.
pub fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Gen(a) => gen(&a).map(|_| true),
        Command::Log(a) => log(&a).map(|_| true),
        Command::Train(a) => train(&a).map(|_| true),
        Command::Eval(a) => {
            let report = eval(&a)?;
            let text = serde_json::to_string_pretty(&report).expect("report serialises");
            println!("{text}");
            Ok(true)
        }
        Command::SweepK(a) => sweep(&a).map(|_| true),
        Command::Run(a) => run(&a).map(|_| true),
        Command::Verify(a) => {
            let report = verify::verify(a.level);
            verify::write_report(std::io::stdout().lock(), &report).map_err(|e| CliError::io("<stdout>", e))?;
            if let Some(path) = &a.out {
                write_json(path, &report)?;
            }
            Ok(report.passed())
        }
    }
}

pub fn gen(args: &GenArgs) -> Result<()> {
    let mut config: GenConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let sc = build_scenario(&config, config.seed, None)?;
    let out = &args.out;
    write_json(&out.join("problem.json"), &sc.problem)?;
    write_json(&out.join("logging.json"), &PolicyFile::Softmax(sc.logging))?;
    write_dataset(&out.join("train.jsonl"), &sc.train)?;
    write_dataset(&out.join("val.jsonl"), &sc.val)
}

pub fn log(args: &LogArgs) -> Result<()> {
    let problem = read_problem(&args.problem)?;
    let logging = read_policy(&args.logging)?;
    let data = log_interactions(&problem, logging.as_policy(), args.n, args.seed)
        .map_err(|e| CliError::stage("log", Some(args.seed), e))?;
    write_dataset(&args.out, &data)
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let mut config: TrainConfig = read_json(&args.config)?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let problem = read_problem(&args.problem)?;
    let data = read_dataset(&args.data, Some(problem.contexts.clone()))?;
    let logging: Option<Arc<dyn Policy>> = match &args.logging {
        Some(path) => Some(match read_policy(path)? {
            PolicyFile::Softmax(p) => Arc::new(p),
            PolicyFile::Tabular(p) => Arc::new(p),
        }),
        None => None,
    };
    let model = match &args.reward_model {
        Some(path) => read_json::<RewardModel>(path)?,
        None => conservative_model(problem.reward_bounds),
    };
    let reward_model = (config.objective == ObjectiveKind::Augmented).then_some(&model);
    let trained = train_erm(
        &TrainInputs {
            data: &data,
            n_actions: problem.n_actions,
            logging,
            reward_model,
        },
        &config,
    )
    .map_err(|e| CliError::stage("train", Some(config.seed), e))?;
    let policy = trained.policy.to_softmax(&problem.contexts)?;
    write_json(&args.out.join("policy.json"), &PolicyFile::Softmax(policy))?;
    let trace_path = args.out.join("trace.csv");
    let mut w = csv::Writer::from_path(&trace_path)?;
    for row in &trained.trace {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| CliError::io(&trace_path, e))
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub estimators: BTreeMap<EstimatorKind, EstimatorReport>,
    pub exact: ExactReport,
}

pub fn eval(args: &EvalArgs) -> Result<EvalReport> {
    let problem = read_problem(&args.problem)?;
    let logging = read_policy(&args.logging)?;
    let policy = read_policy(&args.policy)?;
    let data = read_dataset(&args.data, Some(problem.contexts.clone()))?;
    let (logging, policy) = (logging.as_policy(), policy.as_policy());
    let kinds = if args.estimators.is_empty() {
        EstimatorKind::ALL.to_vec()
    } else {
        args.estimators.clone()
    };
    let needs_model = kinds
        .iter()
        .any(|k| matches!(k, EstimatorKind::Regression | EstimatorKind::Dr | EstimatorKind::Dm));
    let model = match (&args.reward_model, needs_model) {
        (Some(path), _) => read_json::<RewardModel>(path)?,
        (None, true) => {
            let config = RegressionConfig {
                seed: args.seed,
                ..RegressionConfig::default()
            };
            train_reward_model(&data, problem.n_actions, &config)
                .map_err(|e| CliError::stage("train", Some(args.seed), e))?
        }
        (None, false) => conservative_model(problem.reward_bounds),
    };
    let mut estimators = BTreeMap::new();
    for kind in kinds {
        estimators.insert(kind, estimator_report(kind, &data, policy, logging, &model, &problem)?);
    }
    let exact = exact_ips_bias(&problem, logging, policy)?;
    Ok(EvalReport { estimators, exact })
}

fn estimator_report(
    kind: EstimatorKind,
    data: &LoggedDataset,
    policy: &dyn Policy,
    logging: &dyn Policy,
    model: &RewardModel,
    problem: &bandex_core::SyntheticProblem,
) -> Result<EstimatorReport> {
    Ok(match kind {
        EstimatorKind::Ips => ips(data, policy)?,
        EstimatorKind::Conservative => augmented_ips(
            data,
            policy,
            logging,
            &conservative_model(problem.reward_bounds),
            &AugmentOptions::default(),
        )?,
        EstimatorKind::Regression => augmented_ips(data, policy, logging, model, &AugmentOptions::default())?,
        EstimatorKind::Dr => dr(data, policy, model, Some(logging))?,
        EstimatorKind::Dm => {
            let base = ips(data, policy)?;
            EstimatorReport {
                value: dm(data, policy, model)?,
                weight_sum: base.weight_sum,
                n: base.n,
                diagnostics: BTreeMap::new(),
            }
        }
        EstimatorKind::MinSup => {
            let ms = build_minsup(logging, &data.contexts, DEFAULT_WEIGHT_BOUND)?;
            minsup_estimate(data, policy, &ms)?
        }
    })
}

fn load_experiment(path: &Path, seed: Option<u64>, out: Option<&PathBuf>) -> Result<ExperimentConfig> {
    let mut config: ExperimentConfig = read_json(path)?;
    if let Some(seed) = seed {
        config.seeds = vec![seed];
    }
    if let Some(out) = out {
        config.output_dir = out.clone();
    }
    config.validate()?;
    Ok(config)
}

/// Sweeps `k` for the first configured seed at the first deficiency level
/// (or the configured temperature when no levels are given).
pub fn sweep(args: &SweepArgs) -> Result<SweepResult> {
    let config = load_experiment(&args.config, args.seed, args.out.as_ref())?;
    let seed = config.seeds[0];
    let level = config.deficiency_levels.first().copied();
    let sc = build_scenario(&config.gen, seed, level)?;
    let regression = RegressionConfig {
        seed,
        ..config.regression.clone()
    };
    let model = train_reward_model(&sc.train, sc.problem.n_actions, &regression)
        .map_err(|e| CliError::stage("train", Some(seed), e))?;
    let grid = config
        .grid
        .clone()
        .unwrap_or_else(|| default_grid(sc.problem.reward_bounds));
    let train = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let result = sweep_k(
        &SweepInputs {
            train: &sc.train,
            val: &sc.val,
            n_actions: sc.problem.n_actions,
            logging: Arc::new(sc.logging.clone()),
            bounds: sc.problem.reward_bounds,
            reward_model: Some(&model),
            problem: Some(&sc.problem),
        },
        &grid,
        &train,
        &config.selectors,
    )
    .map_err(|e| CliError::stage("sweep", Some(seed), e))?;
    let dir = &config.output_dir;
    write_json(&dir.join("sweep.json"), &result)?;
    write_sweep_csv(&dir.join("sweep.csv"), &result, &config)?;
    Ok(result)
}

fn write_sweep_csv(path: &Path, result: &SweepResult, config: &ExperimentConfig) -> Result<()> {
    crate::io::ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["k".to_string()];
    header.extend(config.selectors.iter().map(key_name));
    header.push("exact_value".into());
    w.write_record(&header)?;
    let cell = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for e in &result.entries {
        let mut row = vec![e.k.to_string()];
        row.extend(config.selectors.iter().map(|s| cell(e.estimates.get(s).copied())));
        row.push(cell(e.exact_value));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn run(args: &RunArgs) -> Result<experiment::RunOutput> {
    let config = load_experiment(&args.config, args.seed, args.out.as_ref())?;
    experiment::run(&config)
}

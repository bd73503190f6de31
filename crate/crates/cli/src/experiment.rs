//! The `run` pipeline: generate, log, train every method, evaluate, sweep
//! the shift, then aggregate over seeds.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use bandex_core::datagen::{
    calibrate_temperature, deficient_logging, fit_logger, log_with_rng, make_problem, rng_for,
    stream, unsupported_fraction, GenConfig,
};
use bandex_core::estimators::{
    augmented_ips, build_minsup, conservative_model, dm, dr, ips, minsup_estimate, AugmentOptions,
    DEFAULT_WEIGHT_BOUND,
};
use bandex_core::learning::{
    greedy_policy, train_erm, train_reward_model, ObjectiveKind, RegressionConfig, TrainConfig,
    TrainInputs,
};
use bandex_core::oracle::{exact_policy_value, exact_support_divergence};
use bandex_core::policy::Policy;
use bandex_core::selection::{default_grid, sweep_k, Selector, SweepInputs, SweepResult};
use bandex_core::stats::{mean, sample_std};
use bandex_core::{LoggedDataset, RewardModel, SoftmaxPolicy, SyntheticProblem};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EstimatorKind, ExperimentConfig, Method};
use crate::error::{CliError, Result};
use crate::io::write_json;

/// One problem with one logging policy and its train/validation logs.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub problem: SyntheticProblem,
    pub logging: SoftmaxPolicy,
    pub temperature: f64,
    pub unsupported_fraction: f64,
    pub train: LoggedDataset,
    pub val: LoggedDataset,
}

/// Builds the problem for `seed`, fits the logger, sets its temperature
/// (calibrated to `level` unsupported pairs when given) and logs the train
/// and validation data.
pub fn build_scenario(gen: &GenConfig, seed: u64, level: Option<f64>) -> Result<Scenario> {
    let stage = |e: bandex_core::Error| CliError::stage("gen", Some(seed), e);
    let gen = GenConfig {
        seed,
        ..gen.clone()
    };
    let problem = make_problem(&gen).map_err(stage)?;
    let base = fit_logger(&problem, gen.logger_steps, gen.logger_learn_rate, seed).map_err(stage)?;
    let temperature = match level {
        Some(target) if target > 0.0 => {
            calibrate_temperature(&base, &problem.contexts, gen.clip_threshold, target).map_err(stage)?
        }
        Some(_) => 1e-9,
        None => gen.temperature,
    };
    let logging =
        deficient_logging(&base, &problem.contexts, temperature, gen.clip_threshold).map_err(stage)?;
    let fraction = unsupported_fraction(&logging, &problem.contexts).map_err(stage)?;
    let log = |n, s| {
        log_with_rng(&problem, &logging, n, &mut rng_for(seed, s))
            .map_err(|e| CliError::stage("log", Some(seed), e))
    };
    let train = log(gen.n_train, stream::TRAIN_LOG)?;
    let val = log(gen.n_val, stream::VALIDATION_LOG)?;
    Ok(Scenario {
        problem,
        logging,
        temperature,
        unsupported_fraction: fraction,
        train,
        val,
    })
}

/// A trained method's policy and, for policy restriction, the sweep behind it.
#[derive(Debug)]
pub struct MethodOutcome {
    pub policy: Arc<dyn Policy>,
    pub chosen_k: Option<f64>,
    pub sweep: Option<SweepResult>,
}

/// Shared inputs for [`train_method`].
#[derive(Debug, Clone, Copy)]
pub struct MethodContext<'a> {
    pub scenario: &'a Scenario,
    pub train: &'a TrainConfig,
    pub reward_model: &'a RewardModel,
    pub selectors: &'a [Selector],
    pub grid: &'a [f64],
}

pub fn train_method(ctx: &MethodContext<'_>, method: Method) -> Result<MethodOutcome> {
    let sc = ctx.scenario;
    let n_actions = sc.problem.n_actions;
    let logging: Arc<dyn Policy> = Arc::new(sc.logging.clone());
    let conservative = conservative_model(sc.problem.reward_bounds);
    let erm = |objective: ObjectiveKind, model: Option<&RewardModel>| -> Result<MethodOutcome> {
        let trained = train_erm(
            &TrainInputs {
                data: &sc.train,
                n_actions,
                logging: Some(logging.clone()),
                reward_model: model,
            },
            &ctx.train.clone().with_objective(objective),
        )?;
        Ok(MethodOutcome {
            policy: Arc::new(trained.policy),
            chosen_k: None,
            sweep: None,
        })
    };
    match method {
        Method::NaiveIps => erm(ObjectiveKind::NaiveIps, None),
        Method::ActionRestriction => erm(ObjectiveKind::ActionRestricted, None),
        Method::ConservativeExtrapolation => erm(ObjectiveKind::Augmented, Some(&conservative)),
        Method::RegressionExtrapolation => erm(ObjectiveKind::Augmented, Some(ctx.reward_model)),
        Method::DirectMethod => Ok(MethodOutcome {
            policy: Arc::new(greedy_policy(ctx.reward_model, &sc.problem.contexts, n_actions)?),
            chosen_k: None,
            sweep: None,
        }),
        Method::PolicyRestriction => {
            let primary = *ctx
                .selectors
                .first()
                .ok_or_else(|| CliError::Config("no selector for policy restriction".into()))?;
            let sweep = sweep_k(
                &SweepInputs {
                    train: &sc.train,
                    val: &sc.val,
                    n_actions,
                    logging,
                    bounds: sc.problem.reward_bounds,
                    reward_model: Some(ctx.reward_model),
                    problem: Some(&sc.problem),
                },
                ctx.grid,
                ctx.train,
                ctx.selectors,
            )?;
            let chosen_k = sweep.chosen.get(&primary).copied().flatten();
            let policy = sweep.policy_for(primary).cloned().ok_or_else(|| {
                CliError::stage("sweep", None, "every grid point failed".to_string())
            })?;
            Ok(MethodOutcome {
                policy: Arc::new(policy),
                chosen_k,
                sweep: Some(sweep),
            })
        }
    }
}

pub fn estimate(
    kind: EstimatorKind,
    scenario: &Scenario,
    policy: &dyn Policy,
    reward_model: &RewardModel,
) -> bandex_core::Result<f64> {
    let val = &scenario.val;
    let logging = &scenario.logging;
    Ok(match kind {
        EstimatorKind::Ips => ips(val, policy)?.value,
        EstimatorKind::Conservative => {
            let model = conservative_model(scenario.problem.reward_bounds);
            augmented_ips(val, policy, logging, &model, &AugmentOptions::default())?.value
        }
        EstimatorKind::Regression => {
            augmented_ips(val, policy, logging, reward_model, &AugmentOptions::default())?.value
        }
        EstimatorKind::Dr => dr(val, policy, reward_model, Some(logging))?.value,
        EstimatorKind::Dm => dm(val, policy, reward_model)?,
        EstimatorKind::MinSup => {
            let ms = build_minsup(logging, &val.contexts, DEFAULT_WEIGHT_BOUND)?;
            minsup_estimate(val, policy, &ms)?.value
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub exact_value: f64,
    pub support_divergence: f64,
    pub chosen_k: Option<f64>,
    pub estimates: BTreeMap<EstimatorKind, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub k: Option<f64>,
    pub exact_value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub deficiency_level: Option<f64>,
    pub temperature: f64,
    pub unsupported_fraction: f64,
    pub logging_value: f64,
    pub methods: BTreeMap<Method, MethodResult>,
    pub selection: BTreeMap<Selector, SelectionResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub levels: Vec<LevelReport>,
}

pub fn run_level(config: &ExperimentConfig, seed: u64, level: Option<f64>) -> Result<LevelReport> {
    let scenario = build_scenario(&config.gen, seed, level)?;
    let n_actions = scenario.problem.n_actions;
    let regression = RegressionConfig {
        seed,
        ..config.regression.clone()
    };
    let reward_model = train_reward_model(&scenario.train, n_actions, &regression)
        .map_err(|e| CliError::stage("train", Some(seed), e))?;
    let train = TrainConfig {
        seed,
        ..config.train.clone()
    };
    let grid = config
        .grid
        .clone()
        .unwrap_or_else(|| default_grid(scenario.problem.reward_bounds));
    let ctx = MethodContext {
        scenario: &scenario,
        train: &train,
        reward_model: &reward_model,
        selectors: &config.selectors,
        grid: &grid,
    };
    let value = |p: &dyn Policy| {
        exact_policy_value(&scenario.problem, p).map_err(|e| CliError::stage("eval", Some(seed), e))
    };
    let mut methods = BTreeMap::new();
    let mut selection = BTreeMap::new();
    for &method in &config.methods {
        let stage = if method == Method::PolicyRestriction { "sweep" } else { "train" };
        let outcome = train_method(&ctx, method).map_err(|e| match e {
            CliError::Stage { message, .. } | CliError::Config(message) => {
                CliError::stage(stage, Some(seed), message)
            }
            other => CliError::stage(stage, Some(seed), other),
        })?;
        let policy = outcome.policy.as_ref();
        let mut estimates = BTreeMap::new();
        for &kind in &config.estimators {
            let v = estimate(kind, &scenario, policy, &reward_model)
                .map_err(|e| CliError::stage("eval", Some(seed), e))?;
            estimates.insert(kind, v);
        }
        let support_divergence = exact_support_divergence(&scenario.problem, &scenario.logging, policy)
            .map_err(|e| CliError::stage("eval", Some(seed), e))?;
        methods.insert(
            method,
            MethodResult {
                exact_value: value(policy)?,
                support_divergence,
                chosen_k: outcome.chosen_k,
                estimates,
            },
        );
        if let Some(sweep) = &outcome.sweep {
            for &sel in &config.selectors {
                selection.insert(
                    sel,
                    SelectionResult {
                        k: sweep.chosen.get(&sel).copied().flatten(),
                        exact_value: sweep.entry_for(sel).and_then(|e| e.exact_value),
                    },
                );
            }
        }
    }
    Ok(LevelReport {
        deficiency_level: level,
        temperature: scenario.temperature,
        unsupported_fraction: scenario.unsupported_fraction,
        logging_value: value(&scenario.logging)?,
        methods,
        selection,
    })
}

pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedReport> {
    let levels: Vec<Option<f64>> = if config.deficiency_levels.is_empty() {
        vec![None]
    } else {
        config.deficiency_levels.iter().copied().map(Some).collect()
    };
    let levels = levels
        .into_iter()
        .map(|level| run_level(config, seed, level))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeedReport { seed, levels })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub level_index: usize,
    pub deficiency_level: Option<f64>,
    pub unsupported_fraction: f64,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub seeds: Vec<u64>,
    pub methods: BTreeMap<Method, Vec<Summary>>,
    pub selection: BTreeMap<Selector, Vec<Summary>>,
}

/// Mean and sample standard deviation over seeds of every method's exact
/// value and every selector's chosen value, per deficiency level.
pub fn aggregate(reports: &[SeedReport]) -> AggregateReport {
    let mut methods: BTreeMap<Method, Vec<Summary>> = BTreeMap::new();
    let mut selection: BTreeMap<Selector, Vec<Summary>> = BTreeMap::new();
    let n_levels = reports.iter().map(|r| r.levels.len()).max().unwrap_or(0);
    for idx in 0..n_levels {
        let levels: Vec<&LevelReport> = reports.iter().filter_map(|r| r.levels.get(idx)).collect();
        let fraction = mean(&levels.iter().map(|l| l.unsupported_fraction).collect::<Vec<_>>());
        let deficiency_level = levels.first().and_then(|l| l.deficiency_level);
        let summary = |values: Vec<f64>| Summary {
            level_index: idx,
            deficiency_level,
            unsupported_fraction: fraction,
            mean: mean(&values),
            std: sample_std(&values),
            n: values.len(),
        };
        let method_keys: std::collections::BTreeSet<Method> =
            levels.iter().flat_map(|l| l.methods.keys().copied()).collect();
        for m in method_keys {
            let values = levels
                .iter()
                .filter_map(|l| l.methods.get(&m).map(|r| r.exact_value))
                .collect();
            methods.entry(m).or_default().push(summary(values));
        }
        let selector_keys: std::collections::BTreeSet<Selector> =
            levels.iter().flat_map(|l| l.selection.keys().copied()).collect();
        for s in selector_keys {
            let values = levels
                .iter()
                .filter_map(|l| l.selection.get(&s).and_then(|r| r.exact_value))
                .collect();
            selection.entry(s).or_default().push(summary(values));
        }
    }
    AggregateReport {
        seeds: reports.iter().map(|r| r.seed).collect(),
        methods,
        selection,
    }
}

#[derive(Debug, Serialize)]
struct PlotRow<'a> {
    level_index: usize,
    deficiency_level: Option<f64>,
    unsupported_fraction: f64,
    series: &'a str,
    mean: f64,
    std: f64,
    n: usize,
}

pub fn key_name<T: Serialize>(key: &T) -> String {
    serde_json::to_value(key)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Deficiency level against exact value, one row per method (and per
/// selector, prefixed `select:`) and level.
pub fn write_plot_csv(path: &Path, agg: &AggregateReport) -> Result<()> {
    crate::io::ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path)?;
    let mut emit = |series: String, rows: &[Summary]| -> Result<()> {
        for s in rows {
            w.serialize(PlotRow {
                level_index: s.level_index,
                deficiency_level: s.deficiency_level,
                unsupported_fraction: s.unsupported_fraction,
                series: &series,
                mean: s.mean,
                std: s.std,
                n: s.n,
            })?;
        }
        Ok(())
    };
    for (m, rows) in &agg.methods {
        emit(key_name(m), rows)?;
    }
    for (s, rows) in &agg.selection {
        emit(format!("select:{}", key_name(s)), rows)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub seed_files: Vec<PathBuf>,
    pub aggregate_file: PathBuf,
    pub plot_file: PathBuf,
    pub aggregate: AggregateReport,
}

pub fn seed_file(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed_{seed}.json"))
}

/// Runs every seed in parallel, writes one JSON per seed, then the aggregate
/// JSON and plot CSV. Failed seeds are reported after the successful ones
/// have been written.
pub fn run(config: &ExperimentConfig) -> Result<RunOutput> {
    config.validate()?;
    let dir = &config.output_dir;
    let results: Vec<(u64, Result<SeedReport>)> = config
        .seeds
        .par_iter()
        .map(|&seed| (seed, run_seed(config, seed)))
        .collect();
    let mut reports = Vec::new();
    let mut seed_files = Vec::new();
    let mut failures = Vec::new();
    for (seed, result) in results {
        match result {
            Ok(report) => {
                let path = seed_file(dir, seed);
                write_json(&path, &report)?;
                seed_files.push(path);
                reports.push(report);
            }
            Err(e) => failures.push(e),
        }
    }
    let agg = aggregate(&reports);
    let aggregate_file = dir.join("aggregate.json");
    write_json(&aggregate_file, &agg)?;
    let plot_file = dir.join("plot.csv");
    write_plot_csv(&plot_file, &agg)?;
    if let Some(first) = failures.into_iter().next() {
        return Err(first);
    }
    Ok(RunOutput {
        seed_files,
        aggregate_file,
        plot_file,
        aggregate: agg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn level(values: &[(Method, f64)]) -> LevelReport {
        LevelReport {
            deficiency_level: Some(0.5),
            temperature: 1.0,
            unsupported_fraction: 0.5,
            logging_value: 0.0,
            methods: values
                .iter()
                .map(|&(m, v)| {
                    (
                        m,
                        MethodResult {
                            exact_value: v,
                            support_divergence: 0.0,
                            chosen_k: None,
                            estimates: BTreeMap::new(),
                        },
                    )
                })
                .collect(),
            selection: BTreeMap::new(),
        }
    }

    #[test]
    fn aggregate_has_mean_and_std_per_method() {
        let reports: Vec<SeedReport> = (0..5)
            .map(|s| SeedReport {
                seed: s,
                levels: vec![level(&[
                    (Method::NaiveIps, s as f64),
                    (Method::PolicyRestriction, 1.0),
                ])],
            })
            .collect();
        let agg = aggregate(&reports);
        assert_eq!(agg.methods.len(), 2);
        let naive = &agg.methods[&Method::NaiveIps][0];
        assert_eq!((naive.mean, naive.n), (2.0, 5));
        assert!((naive.std - 2.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(agg.methods[&Method::PolicyRestriction][0].std, 0.0);
    }
}

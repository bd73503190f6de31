//! Named invariant checks backed by the enumeration oracle.
//!
//! `fast` runs the exact identities; `full` adds the Monte Carlo suites.
//! Each check runs in isolation: an error or panic fails that entry only.

use std::io::{BufReader, Write};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use bandex_core::datagen::{log_interactions, random_instance, rng_for};
use bandex_core::estimators::{
    augmented_ips, build_minsup, conservative_model, dr, ips, AugmentOptions, DEFAULT_WEIGHT_BOUND,
};
use bandex_core::fixture;
use bandex_core::learning::{
    augment_dataset, objective_value_and_gradient, Batch, ObjectiveAux, ObjectiveKind,
};
use bandex_core::oracle::{
    adversarial_construction, exact_augmented_bias, exact_augmented_expectation, exact_ips_bias,
    exact_policy_value, exact_sampled_objective_expectation, exact_support_divergence,
    ips_bias_closed_form,
};
use bandex_core::policy::{prob_table, Policy, TabularPolicy};
use bandex_core::problem::RewardBounds;
use bandex_core::selection::check_kappa;
use bandex_core::stats::{mean, sample_std};
use bandex_core::support::SupportSet;
use bandex_core::{LoggedDataset, RewardModel, SoftmaxPolicy};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Fast,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub passed: bool,
    pub statistic: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub level: Level,
    pub entries: Vec<Entry>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

struct Outcome {
    passed: bool,
    statistic: f64,
    detail: String,
}

type CheckResult = Result<Outcome, String>;

fn outcome(passed: bool, statistic: f64, detail: impl Into<String>) -> CheckResult {
    Ok(Outcome {
        passed,
        statistic,
        detail: detail.into(),
    })
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

type Check = (&'static str, fn() -> CheckResult);

const FAST: &[Check] = &[
    ("theorem2_identity", theorem2_identity),
    ("ips_bias_closed_form", ips_bias_closed_form_check),
    ("augmented_bias_closed_form", augmented_bias_check),
    ("dr_identity", dr_identity),
    ("shift_identity", shift_identity),
    ("sampled_objective_expectation", sampled_objective_expectation),
    ("minsup_invariants", minsup_invariants),
    ("gradient_check", gradient_check),
    ("adversarial_gap", adversarial_gap),
    ("kappa_bound_formula", kappa_bound_formula),
    ("corrupt_propensity_rejected", corrupt_propensity_rejected),
];

const FULL: &[Check] = &[
    ("ips_unbiased_full_support", ips_unbiased_full_support),
    ("ips_bias_monte_carlo", ips_bias_monte_carlo),
    ("augmented_bias_monte_carlo", augmented_bias_monte_carlo),
    ("theorem2_convergence", theorem2_convergence),
    ("kappa_violation_frequency", kappa_violation_frequency),
    ("minsup_ips_monte_carlo", minsup_ips_monte_carlo),
];

pub fn check_names(level: Level) -> Vec<&'static str> {
    let mut names: Vec<_> = FAST.iter().map(|c| c.0).collect();
    if level == Level::Full {
        names.extend(FULL.iter().map(|c| c.0));
    }
    names
}

fn run_check(name: &str, f: fn() -> CheckResult) -> Entry {
    let result = catch_unwind(AssertUnwindSafe(f));
    let (passed, statistic, detail) = match result {
        Ok(Ok(o)) => (o.passed, o.statistic, o.detail),
        Ok(Err(e)) => (false, f64::NAN, format!("error: {e}")),
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            (false, f64::NAN, format!("panic: {msg}"))
        }
    };
    Entry {
        name: name.to_string(),
        passed,
        statistic,
        detail,
    }
}

pub fn verify(level: Level) -> VerifyReport {
    let mut checks: Vec<Check> = FAST.to_vec();
    if level == Level::Full {
        checks.extend_from_slice(FULL);
    }
    let entries = checks.iter().map(|&(name, f)| run_check(name, f)).collect();
    VerifyReport { level, entries }
}

/// One line per entry: status, name, statistic and detail.
pub fn write_report<W: Write>(mut out: W, report: &VerifyReport) -> std::io::Result<()> {
    for e in &report.entries {
        writeln!(
            out,
            "{} {:<32} {:>12.4e}  {}",
            if e.passed { "PASS" } else { "FAIL" },
            e.name,
            e.statistic,
            e.detail
        )?;
    }
    let failed = report.entries.iter().filter(|e| !e.passed).count();
    writeln!(out, "{} checks, {failed} failed", report.entries.len())
}

fn fuzz_bounds(rng: &mut impl Rng) -> RewardBounds {
    let lo = rng.random_range(-2.0..1.0);
    RewardBounds::new(lo, lo + rng.random_range(0.1..2.0)).expect("ordered bounds")
}

fn theorem2_identity() -> CheckResult {
    let mut rng = rng_for(101, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let b = fuzz_bounds(&mut rng);
        let (nc, na) = (rng.random_range(1..5), rng.random_range(1..6));
        let inst = random_instance(&mut rng, nc, na, b).map_err(err)?;
        let r = exact_ips_bias(&inst.problem, &inst.logging, &inst.target).map_err(err)?;
        worst = worst.max((r.expected_weight_sum + r.support_divergence - 1.0).abs());
    }
    outcome(worst <= 1e-12, worst, "max |E[S_D] + D - 1| over 500 instances")
}

fn ips_bias_closed_form_check() -> CheckResult {
    let mut rng = rng_for(102, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let b = fuzz_bounds(&mut rng);
        let (nc, na) = (rng.random_range(1..5), rng.random_range(1..6));
        let inst = random_instance(&mut rng, nc, na, b).map_err(err)?;
        let r = exact_ips_bias(&inst.problem, &inst.logging, &inst.target).map_err(err)?;
        let closed = ips_bias_closed_form(&inst.problem, &inst.logging, &inst.target).map_err(err)?;
        worst = worst.max((r.bias - closed).abs());
    }
    outcome(worst <= 1e-12, worst, "max |enumerated - closed-form IPS bias|")
}

fn random_table_model(rng: &mut impl Rng, nc: usize, na: usize) -> RewardModel {
    RewardModel::Table {
        values: (0..nc)
            .map(|_| (0..na).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect(),
    }
}

fn augmented_bias_check() -> CheckResult {
    let mut rng = rng_for(103, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let b = fuzz_bounds(&mut rng);
        let (nc, na) = (rng.random_range(1..5), rng.random_range(1..6));
        let inst = random_instance(&mut rng, nc, na, b).map_err(err)?;
        let model = random_table_model(&mut rng, nc, na);
        let p = &inst.problem;
        let enumerated = exact_augmented_expectation(p, &inst.logging, &inst.target, &model).map_err(err)?
            - exact_policy_value(p, &inst.target).map_err(err)?;
        let closed = exact_augmented_bias(p, &inst.logging, &inst.target, &model).map_err(err)?;
        worst = worst.max((enumerated - closed).abs());
    }
    outcome(worst <= 1e-12, worst, "max |enumerated - closed-form augmented bias|")
}

fn dr_identity() -> CheckResult {
    let mut rng = rng_for(104, 0);
    let mut worst: f64 = 0.0;
    for i in 0..200 {
        let b = fuzz_bounds(&mut rng);
        let (nc, na) = (rng.random_range(1..5), rng.random_range(1..6));
        let inst = random_instance(&mut rng, nc, na, b).map_err(err)?;
        let data = log_interactions(&inst.problem, &inst.logging, 50, i).map_err(err)?;
        let model = random_table_model(&mut rng, nc, na);
        let report = dr(&data, &inst.target, &model, Some(&inst.logging)).map_err(err)?;
        worst = worst.max(report.diagnostic("decomposition_gap").unwrap_or(f64::INFINITY));
        let zero = dr(&data, &inst.target, &RewardModel::Constant { value: 0.0 }, Some(&inst.logging))
            .map_err(err)?;
        if zero.value != ips(&data, &inst.target).map_err(err)?.value {
            return outcome(false, worst, "DR with a zero model differs from IPS");
        }
    }
    outcome(worst <= 1e-10, worst, "max gap between the two DR forms; zero model equals IPS")
}

fn random_softmax(rng: &mut impl Rng, na: usize, dim: usize) -> SoftmaxPolicy {
    SoftmaxPolicy::new(
        (0..na)
            .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect(),
        rng.random_range(0.5..2.0),
    )
    .expect("finite weights")
}

fn shift_identity() -> CheckResult {
    let f = fixture::reference();
    let data = log_interactions(&f.problem, &f.logging, 200, 5).map_err(err)?;
    let batch = Batch::full(&data);
    let mut rng = rng_for(105, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let policy = random_softmax(&mut rng, 3, 2);
        let k = rng.random_range(-3.0..3.0);
        let naive = objective_value_and_gradient(&policy, &batch, ObjectiveKind::NaiveIps, &ObjectiveAux::default(), 0.0)
            .map_err(err)?;
        let aux = ObjectiveAux {
            shift_k: k,
            support: None,
        };
        let shifted =
            objective_value_and_gradient(&policy, &batch, ObjectiveKind::Shifted, &aux, 0.0).map_err(err)?;
        worst = worst.max((shifted.value - naive.value - k * naive.weight_sum).abs());
    }
    outcome(worst <= 1e-12, worst, "max |shifted - naive - k S_D|")
}

fn sampled_objective_expectation() -> CheckResult {
    let f = fixture::reference();
    let mut worst: f64 = 0.0;
    for model in [RewardModel::exact(&f.problem), conservative_model(f.problem.reward_bounds)] {
        let exact = exact_augmented_expectation(&f.problem, &f.logging, &f.target, &model).map_err(err)?;
        for k in [1, 5] {
            let sampled =
                exact_sampled_objective_expectation(&f.problem, &f.logging, &f.target, &model, k).map_err(err)?;
            worst = worst.max((sampled - exact).abs());
        }
    }
    outcome(worst <= 1e-12, worst, "sampled objective expectation vs exact augmented IPS, replay 1 and 5")
}

fn minsup_invariants() -> CheckResult {
    let mut rng = rng_for(106, 0);
    let mut max_weight: f64 = 0.0;
    for _ in 0..1000 {
        let (nc, na) = (rng.random_range(1..4), rng.random_range(1..8));
        let inst = random_instance(&mut rng, nc, na, RewardBounds::new(0.0, 1.0).map_err(err)?).map_err(err)?;
        let ms = build_minsup(&inst.logging, &inst.problem.contexts, DEFAULT_WEIGHT_BOUND).map_err(err)?;
        for (row, l) in ms.table.iter().zip(&inst.logging.table) {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-12 {
                return outcome(false, total, "MinSup row does not sum to one");
            }
            for (&p, &p0) in row.iter().zip(l) {
                if p > 0.0 && p0 == 0.0 {
                    return outcome(false, p, "MinSup leaves the logging support");
                }
                if p > 0.0 {
                    max_weight = max_weight.max(p / p0);
                }
            }
        }
    }
    outcome(max_weight <= DEFAULT_WEIGHT_BOUND, max_weight, "max MinSup importance weight over 1000 loggers")
}

fn gradient_check() -> CheckResult {
    let mut rng = rng_for(107, 0);
    let mut worst: f64 = 0.0;
    for i in 0..10u64 {
        let inst = random_instance(&mut rng, 3, 4, RewardBounds::new(-1.0, 1.0).map_err(err)?).map_err(err)?;
        let data = log_interactions(&inst.problem, &inst.logging, 40, i).map_err(err)?;
        let support = SupportSet::from_contexts(&inst.logging, &inst.problem.contexts)
            .map_err(err)?
            .supported_mask();
        let model = random_table_model(&mut rng, 3, 4);
        let aug = augment_dataset(&data, &inst.logging, &model, 2, i).map_err(err)?;
        let batch = Batch::full_augmented(&aug);
        let aux = ObjectiveAux {
            shift_k: rng.random_range(-1.0..1.0),
            support: Some(&support),
        };
        let policy = random_softmax(&mut rng, 4, 3);
        for objective in [
            ObjectiveKind::NaiveIps,
            ObjectiveKind::ActionRestricted,
            ObjectiveKind::Augmented,
            ObjectiveKind::Shifted,
        ] {
            worst = worst.max(gradient_error(&policy, &batch, objective, &aux).map_err(err)?);
        }
    }
    outcome(worst < 1e-4, worst, "max relative error vs central differences, four objectives")
}

/// Largest relative gap between the analytic gradient and central
/// differences with step `1e-5`, with an absolute floor of `1e-8`.
pub fn gradient_error(
    policy: &SoftmaxPolicy,
    batch: &Batch<'_>,
    objective: ObjectiveKind,
    aux: &ObjectiveAux<'_>,
) -> bandex_core::Result<f64> {
    let h = 1e-5;
    let eval = objective_value_and_gradient(policy, batch, objective, aux, 0.0)?;
    let mut worst: f64 = 0.0;
    for a in 0..policy.weights.len() {
        for j in 0..policy.weights[a].len() {
            let mut plus = policy.clone();
            plus.weights[a][j] += h;
            let mut minus = policy.clone();
            minus.weights[a][j] -= h;
            let fp = objective_value_and_gradient(&plus, batch, objective, aux, 0.0)?.value;
            let fm = objective_value_and_gradient(&minus, batch, objective, aux, 0.0)?.value;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = eval.gradient[a][j];
            let scale = numeric.abs().max(analytic.abs()).max(1e-8);
            worst = worst.max((numeric - analytic).abs() / scale);
        }
    }
    Ok(worst)
}

fn adversarial_gap() -> CheckResult {
    let f = fixture::reference();
    let off = TabularPolicy::new(vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]]).map_err(err)?;
    let policies: Vec<&dyn Policy> = vec![&f.logging, &f.target, &off];
    let out = adversarial_construction(&f.problem, &f.logging, &policies).map_err(err)?;
    outcome(out.gap >= 1.0, out.gap, "gap on the fixture with a divergence-1 policy, rewards in [0, 1]")
}

fn kappa_bound_formula() -> CheckResult {
    let c = check_kappa(0.9, 0.5, 0.1, 5000, 0.1).map_err(err)?;
    let expected = 2.0 * (-1.0f64).exp();
    outcome(
        (c.failure_prob_bound - expected).abs() < 1e-15,
        c.failure_prob_bound,
        "bound at n = 5000, epsilon = 0.1, p_min = 0.1",
    )
}

fn corrupt_propensity_rejected() -> CheckResult {
    let path = std::env::temp_dir().join(format!("bandex-verify-{}.jsonl", std::process::id()));
    std::fs::write(
        &path,
        "{\"x\":{\"ctx\":0},\"y\":0,\"r\":1.0,\"p0\":0.5}\n{\"x\":{\"ctx\":0},\"y\":1,\"r\":0.0,\"p0\":0.0}\n",
    )
    .map_err(err)?;
    let file = std::fs::File::open(&path).map_err(err)?;
    let result = LoggedDataset::read_jsonl(BufReader::new(file), Some(vec![vec![1.0]]));
    let _ = std::fs::remove_file(&path);
    match result {
        Err(bandex_core::Error::CorruptData { record, reason }) => {
            outcome(record == 1, record as f64, format!("surfaced: {reason}"))
        }
        Err(other) => outcome(false, f64::NAN, format!("wrong error: {other}")),
        Ok(_) => outcome(false, f64::NAN, "p0 = 0 was accepted"),
    }
}

/// `reps` independent datasets of size `n`, each mapped to a statistic.
fn monte_carlo(
    problem: &bandex_core::SyntheticProblem,
    logging: &dyn Policy,
    n: usize,
    reps: usize,
    seed: u64,
    stat: impl Fn(&LoggedDataset) -> bandex_core::Result<f64> + Sync,
) -> Result<Vec<f64>, String> {
    (0..reps)
        .into_par_iter()
        .map(|r| {
            let data = log_interactions(problem, logging, n, seed.wrapping_mul(1_000_003).wrapping_add(r as u64))?;
            stat(&data)
        })
        .collect::<bandex_core::Result<Vec<_>>>()
        .map_err(err)
}

/// `|mean - expected|` in standard errors.
fn z_score(values: &[f64], expected: f64) -> f64 {
    let se = sample_std(values) / (values.len() as f64).sqrt();
    let gap = (mean(values) - expected).abs();
    if se == 0.0 {
        if gap <= 1e-12 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        gap / se
    }
}

fn ips_unbiased_full_support() -> CheckResult {
    let f = fixture::reference();
    let full = TabularPolicy::new(vec![vec![0.4, 0.3, 0.3], vec![0.2, 0.3, 0.5]]).map_err(err)?;
    let values = monte_carlo(&f.problem, &full, 1000, 200, 1, |d| Ok(ips(d, &f.target)?.value))?;
    let z = z_score(&values, exact_policy_value(&f.problem, &f.target).map_err(err)?);
    outcome(z <= 3.0, z, "z-score of mean IPS vs true value, full-support logging")
}

fn ips_bias_monte_carlo() -> CheckResult {
    let f = fixture::reference();
    let r = exact_ips_bias(&f.problem, &f.logging, &f.target).map_err(err)?;
    let values = monte_carlo(&f.problem, &f.logging, 1000, 200, 2, |d| Ok(ips(d, &f.target)?.value))?;
    let z = z_score(&values, r.true_value + ips_bias_closed_form(&f.problem, &f.logging, &f.target).map_err(err)?);
    outcome(z <= 3.0, z, "z-score of mean IPS vs value plus closed-form bias")
}

fn augmented_bias_monte_carlo() -> CheckResult {
    let f = fixture::reference();
    let mut rng = rng_for(108, 0);
    let mut worst: f64 = 0.0;
    for (i, model) in [
        conservative_model(f.problem.reward_bounds),
        random_table_model(&mut rng, 2, 3),
        random_table_model(&mut rng, 2, 3),
    ]
    .into_iter()
    .enumerate()
    {
        let expected = exact_policy_value(&f.problem, &f.target).map_err(err)?
            + exact_augmented_bias(&f.problem, &f.logging, &f.target, &model).map_err(err)?;
        let values = monte_carlo(&f.problem, &f.logging, 1000, 200, 3 + i as u64, |d| {
            Ok(augmented_ips(d, &f.target, &f.logging, &model, &AugmentOptions::default())?.value)
        })?;
        worst = worst.max(z_score(&values, expected));
    }
    outcome(worst <= 3.0, worst, "max z-score of augmented IPS vs value plus closed-form bias")
}

fn theorem2_convergence() -> CheckResult {
    let f = fixture::reference();
    let uniform = TabularPolicy::uniform(2, 3);
    let d = exact_support_divergence(&f.problem, &f.logging, &uniform).map_err(err)?;
    let mut stds = Vec::new();
    let mut worst_z: f64 = 0.0;
    for (i, n) in [100usize, 1000, 10000].into_iter().enumerate() {
        let values = monte_carlo(&f.problem, &f.logging, n, 200, 10 + i as u64, |data| {
            Ok(ips(data, &uniform)?.weight_sum + d)
        })?;
        worst_z = worst_z.max(z_score(&values, 1.0));
        stds.push(sample_std(&values));
    }
    let decreasing = stds.windows(2).all(|w| w[1] < w[0]);
    outcome(
        decreasing && worst_z <= 3.0,
        worst_z,
        format!("std of S_D + D at n = 100, 1000, 10000: {stds:.4?}"),
    )
}

fn kappa_violation_frequency() -> CheckResult {
    let f = fixture::reference();
    let logging = TabularPolicy::new(vec![vec![0.1, 0.9, 0.0], vec![1.0, 0.0, 0.0]]).map_err(err)?;
    let p_min = prob_table(&logging, &f.problem.contexts)
        .map_err(err)?
        .into_iter()
        .flatten()
        .filter(|&p| p > 0.0)
        .fold(1.0, f64::min);
    let d = exact_support_divergence(&f.problem, &logging, &f.target).map_err(err)?;
    let (kappa, epsilon, n) = (0.44, 0.1, 5000);
    let target = Arc::new(f.target.clone());
    let flags = monte_carlo(&f.problem, &logging, n, 2000, 20, |data| {
        let s = ips(data, target.as_ref())?.weight_sum;
        let c = check_kappa(s, kappa, epsilon, n, p_min)?;
        Ok(if c.satisfied && (d > kappa || d < 0.0) { 1.0 } else { 0.0 })
    })?;
    let freq = mean(&flags);
    let bound = check_kappa(1.0, kappa, epsilon, n, p_min).map_err(err)?.failure_prob_bound;
    outcome(freq <= bound, freq, format!("violation frequency over 2000 datasets, bound {bound:.4}"))
}

fn minsup_ips_monte_carlo() -> CheckResult {
    let f = fixture::reference();
    let logging = TabularPolicy::new(vec![vec![0.005, 0.995, 0.0], vec![0.3, 0.7, 0.0]]).map_err(err)?;
    let ms = build_minsup(&logging, &f.problem.contexts, DEFAULT_WEIGHT_BOUND).map_err(err)?;
    let exact = exact_policy_value(&f.problem, &ms).map_err(err)?;
    let mut max_weight: f64 = 0.0;
    let values = monte_carlo(&f.problem, &logging, 2000, 300, 30, |d| Ok(ips(d, &ms)?.value))?;
    for r in 0..5u64 {
        let data = log_interactions(&f.problem, &logging, 2000, 900 + r).map_err(err)?;
        max_weight = max_weight.max(ips(&data, &ms).map_err(err)?.diagnostic("max_weight").unwrap_or(0.0));
    }
    let z = z_score(&values, exact);
    outcome(
        z <= 3.0 && max_weight <= DEFAULT_WEIGHT_BOUND,
        z,
        format!("z-score of MinSup IPS vs exact value; max weight {max_weight:.2}"),
    )
}

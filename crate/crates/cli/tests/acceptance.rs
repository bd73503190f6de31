//! Acceptance criteria, one test each. Every test writes a single
//! `PASS`/`FAIL` line to stderr before asserting.

use std::io::Write;
use std::sync::OnceLock;

use bandex::config::{EstimatorKind, ExperimentConfig, Method};
use bandex::experiment::{run_level, LevelReport};
use bandex::verify::gradient_error;
use bandex_core::datagen::{log_interactions, random_instance, rng_for, GenConfig, RandomInstance};
use bandex_core::estimators::{
    augmented_ips, build_minsup, conservative_model, dr, ips, AugmentOptions, DEFAULT_WEIGHT_BOUND,
};
use bandex_core::fixture;
use bandex_core::learning::{augment_dataset, Batch, ObjectiveAux, ObjectiveKind, RegressionConfig, TrainConfig};
use bandex_core::oracle::{
    adversarial_construction, exact_augmented_bias, exact_augmented_expectation, exact_ips_bias,
    exact_policy_value, exact_sampled_objective_expectation, exact_support_divergence, ips_bias_closed_form,
};
use bandex_core::policy::{prob_table, Policy, TabularPolicy};
use bandex_core::selection::{check_kappa, Selector};
use bandex_core::stats::{mean, sample_std};
use bandex_core::support::SupportSet;
use bandex_core::{LoggedDataset, RewardBounds, RewardModel, SoftmaxPolicy, SyntheticProblem};
use rand::Rng;
use rayon::prelude::*;

fn report(id: u32, passed: bool, detail: &str) {
    let status = if passed { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "{status} criterion {id}: {detail}");
}

fn fuzz_instance(rng: &mut impl Rng) -> RandomInstance {
    let lo = rng.random_range(-2.0..1.0);
    let bounds = RewardBounds::new(lo, lo + rng.random_range(0.1..2.0)).unwrap();
    let (nc, na) = (rng.random_range(1..5), rng.random_range(1..6));
    random_instance(rng, nc, na, bounds).unwrap()
}

fn table_model(rng: &mut impl Rng, nc: usize, na: usize) -> RewardModel {
    RewardModel::Table {
        values: (0..nc)
            .map(|_| (0..na).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect(),
    }
}

/// Statistic over `reps` independent datasets of size `n`.
fn monte_carlo(
    problem: &SyntheticProblem,
    logging: &dyn Policy,
    n: usize,
    reps: usize,
    seed: u64,
    stat: impl Fn(&LoggedDataset) -> f64 + Sync,
) -> Vec<f64> {
    (0..reps as u64)
        .into_par_iter()
        .map(|r| stat(&log_interactions(problem, logging, n, seed * 100_000 + r).unwrap()))
        .collect()
}

fn z_score(values: &[f64], expected: f64) -> f64 {
    let se = sample_std(values) / (values.len() as f64).sqrt();
    (mean(values) - expected).abs() / se
}

#[test]
fn criterion_01_ips_bias_closed_form() {
    let mut rng = rng_for(1, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let inst = fuzz_instance(&mut rng);
        let enumerated = exact_ips_bias(&inst.problem, &inst.logging, &inst.target).unwrap();
        let closed = ips_bias_closed_form(&inst.problem, &inst.logging, &inst.target).unwrap();
        worst = worst.max((enumerated.bias - closed).abs());
    }
    let passed = worst <= 1e-12;
    report(1, passed, &format!("max |closed-form - enumerated| IPS bias = {worst:.2e} over 1000 problems"));
    assert!(passed);
}

#[test]
fn criterion_02_augmented_bias() {
    let mut rng = rng_for(2, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let inst = fuzz_instance(&mut rng);
        let (nc, na) = (inst.problem.n_contexts(), inst.problem.n_actions);
        let model = table_model(&mut rng, nc, na);
        let p = &inst.problem;
        let enumerated = exact_augmented_expectation(p, &inst.logging, &inst.target, &model).unwrap()
            - exact_policy_value(p, &inst.target).unwrap();
        let closed = exact_augmented_bias(p, &inst.logging, &inst.target, &model).unwrap();
        worst = worst.max((enumerated - closed).abs());
    }
    let f = fixture::reference();
    let zero = conservative_model(f.problem.reward_bounds);
    let bias = exact_augmented_bias(&f.problem, &f.logging, &f.target, &zero).unwrap();
    let truth = exact_policy_value(&f.problem, &f.target).unwrap();
    let values = monte_carlo(&f.problem, &f.logging, 100_000, 100, 2, |d| {
        augmented_ips(d, &f.target, &f.logging, &zero, &AugmentOptions::default()).unwrap().value
    });
    let z = z_score(&values, truth + bias);
    let mc_bias = mean(&values) - truth;
    let passed = worst <= 1e-12 && (bias + 0.265).abs() < 1e-12 && z <= 3.0;
    report(
        2,
        passed,
        &format!("closed-form gap {worst:.2e}; fixture bias {bias:.6} (expected -0.265); Monte Carlo bias {mc_bias:.5}, z = {z:.2}"),
    );
    assert!(passed);
}

#[test]
fn criterion_03_adversarial_gap() {
    let f = fixture::reference();
    let off_support = TabularPolicy::new(vec![vec![0.0, 0.0, 1.0], vec![0.0, 0.5, 0.5]]).unwrap();
    let d = exact_support_divergence(&f.problem, &f.logging, &off_support).unwrap();
    let policies: Vec<&dyn Policy> = vec![&f.logging, &f.target, &off_support];
    let out = adversarial_construction(&f.problem, &f.logging, &policies).unwrap();
    let passed = d == 1.0 && out.gap >= 1.0;
    report(3, passed, &format!("divergence {d}, realised gap {}", out.gap));
    assert!(passed);
}

#[test]
fn criterion_04_support_divergence_identity() {
    let mut rng = rng_for(4, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let inst = fuzz_instance(&mut rng);
        let r = exact_ips_bias(&inst.problem, &inst.logging, &inst.target).unwrap();
        worst = worst.max((r.expected_weight_sum + r.support_divergence - 1.0).abs());
    }
    let f = fixture::reference();
    let d = exact_support_divergence(&f.problem, &f.logging, &f.target).unwrap();
    let mut stds = Vec::new();
    let mut worst_z: f64 = 0.0;
    for (i, n) in [100usize, 1_000, 10_000].into_iter().enumerate() {
        let values = monte_carlo(&f.problem, &f.logging, n, 500, 40 + i as u64, |data| {
            ips(data, &f.target).unwrap().weight_sum + d
        });
        worst_z = worst_z.max(z_score(&values, 1.0));
        stds.push(sample_std(&values));
    }
    let decreasing = stds.windows(2).all(|w| w[1] < w[0]);
    let passed = worst <= 1e-12 && worst_z <= 3.0 && decreasing;
    report(
        4,
        passed,
        &format!("identity gap {worst:.2e}; max z {worst_z:.2}; std over n = 1e2, 1e3, 1e4: {stds:.4?}"),
    );
    assert!(passed);
}

#[test]
fn criterion_05_kappa_bound() {
    let f = fixture::reference();
    let logging = TabularPolicy::new(vec![vec![0.1, 0.9, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
    let p_min = prob_table(&logging, &f.problem.contexts)
        .unwrap()
        .into_iter()
        .flatten()
        .filter(|&p| p > 0.0)
        .fold(1.0, f64::min);
    assert_eq!(p_min, 0.1);
    let (n, epsilon) = (5000, 0.1);
    let bound = check_kappa(1.0, 0.3, epsilon, n, p_min).unwrap().failure_prob_bound;
    let formula_ok = (bound - 2.0 * (-1.0f64).exp()).abs() < 1e-15;

    // A policy whose divergence sits just above kappa: accepting it violates the claim.
    let d = exact_support_divergence(&f.problem, &logging, &f.target).unwrap();
    let kappa = d - 0.01;
    let flags = monte_carlo(&f.problem, &logging, n, 2000, 5, |data| {
        let s = ips(data, &f.target).unwrap().weight_sum;
        let c = check_kappa(s, kappa, epsilon, n, p_min).unwrap();
        f64::from(u8::from(c.satisfied && d > kappa))
    });
    let freq = mean(&flags);

    let mut rng = rng_for(5, 0);
    let mut monotone = true;
    for _ in 0..1000 {
        let eps = rng.random_range(0.01..0.2);
        let kappa = rng.random_range(2.0 * eps + 1e-6..1.0);
        let n = rng.random_range(1..10_000);
        let p = rng.random_range(0.01..1.0);
        let b = |n: usize, eps: f64, p: f64| check_kappa(0.5, kappa, eps, n, p).unwrap().failure_prob_bound;
        let base = b(n, eps, p);
        monotone &= b(n + 1, eps, p) <= base && b(n, eps * 0.99, p) >= base && b(n, eps, p * 0.99) >= base;
    }
    let passed = formula_ok && freq <= bound && monotone;
    report(
        5,
        passed,
        &format!("bound {bound:.4}, empirical violation frequency {freq:.4}, monotonicity fuzz {monotone}"),
    );
    assert!(passed);
}

#[test]
fn criterion_06_sampled_objective_expectation() {
    let f = fixture::reference();
    let mut rng = rng_for(6, 0);
    let mut worst: f64 = 0.0;
    for model in [conservative_model(f.problem.reward_bounds), table_model(&mut rng, 2, 3)] {
        let exact = exact_augmented_expectation(&f.problem, &f.logging, &f.target, &model).unwrap();
        for k in [1, 5] {
            let sampled = exact_sampled_objective_expectation(&f.problem, &f.logging, &f.target, &model, k).unwrap();
            worst = worst.max((sampled - exact).abs());
        }
    }
    let passed = worst <= 1e-12;
    report(6, passed, &format!("max gap {worst:.2e} for replay counts 1 and 5"));
    assert!(passed);
}

#[test]
fn criterion_07_dr_forms() {
    let mut rng = rng_for(7, 0);
    let mut worst: f64 = 0.0;
    let mut zero_is_ips = true;
    for i in 0..1000 {
        let inst = fuzz_instance(&mut rng);
        let (nc, na) = (inst.problem.n_contexts(), inst.problem.n_actions);
        let data = log_interactions(&inst.problem, &inst.logging, rng.random_range(1..60), i).unwrap();
        let model = table_model(&mut rng, nc, na);
        let r = dr(&data, &inst.target, &model, Some(&inst.logging)).unwrap();
        worst = worst.max(r.diagnostic("decomposition_gap").unwrap());
        let z = dr(&data, &inst.target, &RewardModel::Constant { value: 0.0 }, None).unwrap();
        zero_is_ips &= z.value == ips(&data, &inst.target).unwrap().value;
    }
    let passed = worst <= 1e-10 && zero_is_ips;
    report(7, passed, &format!("max gap between forms {worst:.2e}; zero model equals IPS: {zero_is_ips}"));
    assert!(passed);
}

#[test]
fn criterion_08_gradients() {
    let mut rng = rng_for(8, 0);
    let mut worst: f64 = 0.0;
    for i in 0..50u64 {
        let (nc, na, dim) = (rng.random_range(1..5), rng.random_range(2..6), rng.random_range(1..5));
        let bounds = RewardBounds::new(-1.0, 1.0).unwrap();
        let mut inst = random_instance(&mut rng, nc, na, bounds).unwrap();
        // Dense random features instead of one-hot ones.
        for x in inst.problem.contexts.iter_mut() {
            *x = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        }
        let data = log_interactions(&inst.problem, &inst.logging, 30, i).unwrap();
        let support = SupportSet::from_contexts(&inst.logging, &inst.problem.contexts).unwrap().supported_mask();
        let model = table_model(&mut rng, nc, na);
        let aug = augment_dataset(&data, &inst.logging, &model, rng.random_range(1..4), i).unwrap();
        let batch = Batch::full_augmented(&aug);
        let aux = ObjectiveAux {
            shift_k: rng.random_range(-1.0..1.0),
            support: Some(&support),
        };
        let weights = (0..na)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect())
            .collect();
        let policy = SoftmaxPolicy::new(weights, rng.random_range(0.5..2.0)).unwrap();
        for objective in [
            ObjectiveKind::NaiveIps,
            ObjectiveKind::ActionRestricted,
            ObjectiveKind::Augmented,
            ObjectiveKind::Shifted,
        ] {
            worst = worst.max(gradient_error(&policy, &batch, objective, &aux).unwrap());
        }
    }
    let passed = worst < 1e-4;
    report(8, passed, &format!("max relative error {worst:.2e} over 50 instances and 4 objectives"));
    assert!(passed);
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Multiclass problem, 20 contexts and 10 actions, rewards in [-1, 0],
/// logging calibrated to 60% unsupported pairs.
fn multiclass_runs() -> &'static Vec<LevelReport> {
    static RUNS: OnceLock<Vec<LevelReport>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let mut gen = GenConfig::multiclass(20, 10, 10, 0);
        gen.reward_offset = -1.0;
        let config = ExperimentConfig {
            gen,
            train: TrainConfig::default(),
            regression: RegressionConfig::default(),
            estimators: vec![EstimatorKind::Ips],
            selectors: vec![Selector::MinSup],
            methods: vec![
                Method::NaiveIps,
                Method::ActionRestriction,
                Method::ConservativeExtrapolation,
                Method::RegressionExtrapolation,
                Method::PolicyRestriction,
            ],
            seeds: SEEDS.to_vec(),
            output_dir: "unused".into(),
            deficiency_levels: vec![0.6],
            grid: None,
        };
        config.validate().unwrap();
        SEEDS.par_iter().map(|&s| run_level(&config, s, Some(0.6)).unwrap()).collect()
    })
}

#[test]
fn criterion_09_shift_beats_naive_ips() {
    let runs = multiclass_runs();
    let mut wins = 0;
    let mut lines = Vec::new();
    for r in runs {
        let naive = r.methods[&Method::NaiveIps].exact_value;
        let shifted = &r.methods[&Method::PolicyRestriction];
        wins += usize::from(shifted.exact_value > naive && r.unsupported_fraction >= 0.6);
        lines.push(format!(
            "[unsupported {:.2}, k {:?}: {:.3} vs {:.3}]",
            r.unsupported_fraction, shifted.chosen_k, shifted.exact_value, naive
        ));
    }
    let passed = wins >= 4;
    report(9, passed, &format!("shifted beats naive IPS in {wins}/5 seeds {}", lines.join(" ")));
    assert!(passed);
}

#[test]
fn criterion_10_action_restriction() {
    let runs = multiclass_runs();
    let mut zero_divergence = true;
    let mut within = true;
    let mut trailing = 0;
    for r in runs {
        let res = &r.methods[&Method::ActionRestriction];
        zero_divergence &= res.support_divergence == 0.0;
        let best = [
            Method::ConservativeExtrapolation,
            Method::RegressionExtrapolation,
            Method::PolicyRestriction,
        ]
        .iter()
        .map(|m| r.methods[m].exact_value)
        .fold(f64::NEG_INFINITY, f64::max);
        within &= res.exact_value <= best + 0.02;
        trailing += usize::from(res.exact_value < best);
    }
    let passed = zero_divergence && within && trailing >= 3;
    report(
        10,
        passed,
        &format!("zero divergence on every seed: {zero_divergence}; never more than 0.02 ahead: {within}; trails the best in {trailing}/5"),
    );
    assert!(passed);
}

#[test]
fn criterion_11_minsup() {
    let mut rng = rng_for(11, 0);
    let mut ok = true;
    let mut max_weight: f64 = 0.0;
    for _ in 0..1000 {
        let na = rng.random_range(1..10);
        let row: Vec<f64> = {
            let raw: Vec<f64> = (0..na)
                .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(1e-4..1.0) })
                .collect();
            let total: f64 = raw.iter().sum();
            if total == 0.0 {
                let mut r = vec![0.0; na];
                r[0] = 1.0;
                r
            } else {
                raw.iter().map(|p| p / total).collect()
            }
        };
        let logging = TabularPolicy::new(vec![row.clone()]).unwrap();
        let ms = build_minsup(&logging, &[vec![1.0]], DEFAULT_WEIGHT_BOUND).unwrap();
        let out = &ms.table[0];
        ok &= (out.iter().sum::<f64>() - 1.0).abs() <= 1e-12;
        for (&p, &p0) in out.iter().zip(&row) {
            ok &= p >= 0.0 && (p == 0.0 || p0 > 0.0);
            if p > 0.0 {
                max_weight = max_weight.max(p / p0);
            }
        }
    }
    ok &= max_weight <= DEFAULT_WEIGHT_BOUND;

    let f = fixture::reference();
    let logging = TabularPolicy::new(vec![vec![0.004, 0.996, 0.0], vec![0.25, 0.75, 0.0]]).unwrap();
    let ms = build_minsup(&logging, &f.problem.contexts, DEFAULT_WEIGHT_BOUND).unwrap();
    let exact = exact_policy_value(&f.problem, &ms).unwrap();
    let values = monte_carlo(&f.problem, &logging, 5000, 500, 11, |d| ips(d, &ms).unwrap().value);
    let z = z_score(&values, exact);
    let passed = ok && z <= 3.0;
    report(
        11,
        passed,
        &format!("invariants hold on 1000 loggers: {ok} (max weight {max_weight:.3}); IPS Monte Carlo z = {z:.2}"),
    );
    assert!(passed);
}

#[test]
fn criterion_12_minsup_selection_vs_conservative() {
    let gen = GenConfig::feature_split(100, 20, 10, 0);
    let config = ExperimentConfig {
        gen,
        train: TrainConfig::default(),
        regression: RegressionConfig::default(),
        estimators: vec![EstimatorKind::Ips],
        selectors: vec![Selector::MinSup, Selector::Conservative],
        methods: vec![Method::PolicyRestriction],
        seeds: SEEDS.to_vec(),
        output_dir: "unused".into(),
        deficiency_levels: vec![0.8],
        grid: None,
    };
    config.validate().unwrap();
    let runs: Vec<LevelReport> = SEEDS.par_iter().map(|&s| run_level(&config, s, Some(0.8)).unwrap()).collect();
    let mut wins = 0;
    let mut lines = Vec::new();
    for r in &runs {
        let v = |s: Selector| r.selection[&s].exact_value.unwrap();
        let (m, c) = (v(Selector::MinSup), v(Selector::Conservative));
        wins += usize::from(m >= c);
        lines.push(format!("[{:.2}: {m:.3} vs {c:.3}]", r.unsupported_fraction));
    }
    let passed = wins >= 4;
    report(12, passed, &format!("MinSup choice at least as good as Conservative in {wins}/5 seeds {}", lines.join(" ")));
    assert!(passed);
}

//! Exact expectations on finite problems by enumeration.
//!
//! Every estimator in this crate is a sample mean of i.i.d. per-record terms,
//! so its expectation over datasets equals the expectation of a single term:
//! a sum over contexts weighted by `P(x)` and logged actions weighted by
//! `pi_0(y|x)`. The closed forms for the bias of IPS and augmented IPS are
//! computed separately so the two routes can be compared.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{prob_table, Policy};
use crate::problem::SyntheticProblem;
use crate::reward_model::RewardModel;
use crate::support::unsupported_actions;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactReport {
    pub true_value: f64,
    pub estimator_expectation: f64,
    pub bias: f64,
    pub support_divergence: f64,
    pub expected_weight_sum: f64,
}

/// `sum_x P(x) sum_{y : pi_0(y|x) > 0} pi_0(y|x) term(x, y)`.
fn expect_logged(
    problem: &SyntheticProblem,
    logging: &[Vec<f64>],
    mut term: impl FnMut(usize, usize) -> f64,
) -> f64 {
    let mut total = 0.0;
    for (c, &px) in problem.context_weights.iter().enumerate() {
        let mut inner = 0.0;
        for (y, &p0) in logging[c].iter().enumerate() {
            if p0 > 0.0 {
                inner += p0 * term(c, y);
            }
        }
        total += px * inner;
    }
    total
}

fn check_actions(problem: &SyntheticProblem, policies: &[&dyn Policy]) -> Result<()> {
    for p in policies {
        if p.n_actions() != problem.n_actions {
            return Err(Error::contract(format!(
                "policy has {} actions, problem has {}",
                p.n_actions(),
                problem.n_actions
            )));
        }
    }
    Ok(())
}

/// `R(pi) = sum_x P(x) sum_y pi(y|x) delta(x, y)`.
pub fn exact_policy_value(problem: &SyntheticProblem, policy: &dyn Policy) -> Result<f64> {
    check_actions(problem, &[policy])?;
    let table = prob_table(policy, &problem.contexts)?;
    Ok(value_of_table(problem, &table))
}

pub(crate) fn value_of_table(problem: &SyntheticProblem, table: &[Vec<f64>]) -> f64 {
    problem
        .context_weights
        .iter()
        .zip(table)
        .zip(&problem.mean_reward)
        .map(|((px, probs), deltas)| px * probs.iter().zip(deltas).map(|(p, d)| p * d).sum::<f64>())
        .sum()
}

/// Support divergence `D_X(pi | pi_0) = sum_x P(x) sum_{y in U(x)} pi(y|x)`.
pub fn exact_support_divergence(
    problem: &SyntheticProblem,
    logging: &dyn Policy,
    target: &dyn Policy,
) -> Result<f64> {
    check_actions(problem, &[logging, target])?;
    let l = prob_table(logging, &problem.contexts)?;
    let t = prob_table(target, &problem.contexts)?;
    Ok(unsupported_mass(problem, &l, &t, |_, _| 1.0))
}

/// `sum_x P(x) sum_{y in U(x)} pi(y|x) f(x, y)`.
fn unsupported_mass(
    problem: &SyntheticProblem,
    logging: &[Vec<f64>],
    target: &[Vec<f64>],
    f: impl Fn(usize, usize) -> f64,
) -> f64 {
    let mut total = 0.0;
    for (c, &px) in problem.context_weights.iter().enumerate() {
        let inner: f64 = unsupported_actions(&logging[c])
            .into_iter()
            .map(|y| target[c][y] * f(c, y))
            .sum();
        total += px * inner;
    }
    total
}

/// Closed-form IPS bias: `-sum_x P(x) sum_{y in U(x)} pi(y|x) delta(x, y)`.
pub fn ips_bias_closed_form(
    problem: &SyntheticProblem,
    logging: &dyn Policy,
    target: &dyn Policy,
) -> Result<f64> {
    check_actions(problem, &[logging, target])?;
    let l = prob_table(logging, &problem.contexts)?;
    let t = prob_table(target, &problem.contexts)?;
    Ok(-unsupported_mass(problem, &l, &t, |c, y| problem.delta(c, y)))
}

/// Enumerated expectation of the IPS estimate and of `S_D`, with the true
/// value and support divergence of the target.
pub fn exact_ips_bias(
    problem: &SyntheticProblem,
    logging: &dyn Policy,
    target: &dyn Policy,
) -> Result<ExactReport> {
    check_actions(problem, &[logging, target])?;
    let l = prob_table(logging, &problem.contexts)?;
    let t = prob_table(target, &problem.contexts)?;
    let true_value = value_of_table(problem, &t);
    let estimator_expectation =
        expect_logged(problem, &l, |c, y| t[c][y] / l[c][y] * problem.delta(c, y));
    let expected_weight_sum = expect_logged(problem, &l, |c, y| t[c][y] / l[c][y]);
    Ok(ExactReport {
        true_value,
        estimator_expectation,
        bias: estimator_expectation - true_value,
        support_divergence: unsupported_mass(problem, &l, &t, |_, _| 1.0),
        expected_weight_sum,
    })
}

/// Closed-form augmented-IPS bias `sum_x P(x) sum_{y in U(x)} pi(y|x) (delta_hat - delta)`.
pub fn exact_augmented_bias(
    problem: &SyntheticProblem,
    logging: &dyn Policy,
    target: &dyn Policy,
    model: &RewardModel,
) -> Result<f64> {
    check_actions(problem, &[logging, target])?;
    let l = prob_table(logging, &problem.contexts)?;
    let t = prob_table(target, &problem.contexts)?;
    Ok(unsupported_mass(problem, &l, &t, |c, y| {
        model.predict(c, &problem.contexts[c], y) - problem.delta(c, y)
    }))
}

/// Enumerated expectation of the augmented IPS estimate.
pub fn exact_augmented_expectation(
    problem: &SyntheticProblem,
    logging: &dyn Policy,
    target: &dyn Policy,
    model: &RewardModel,
) -> Result<f64> {
    check_actions(problem, &[logging, target])?;
    let l = prob_table(logging, &problem.contexts)?;
    let t = prob_table(target, &problem.contexts)?;
    let imputed: Vec<f64> = (0..problem.n_contexts())
        .map(|c| {
            unsupported_actions(&l[c])
                .into_iter()
                .map(|y| t[c][y] * model.predict(c, &problem.contexts[c], y))
                .sum()
        })
        .collect();
    Ok(expect_logged(problem, &l, |c, y| {
        t[c][y] / l[c][y] * problem.delta(c, y) + imputed[c]
    }))
}

/// Above this many augmentation outcomes per record the expectation over the
/// replay draws is taken one draw at a time.
const MAX_DRAW_TUPLES: usize = 1 << 16;

/// Enumerated expectation of the sampled augmentation objective: the IPS term
/// on the logged record plus the average over `replay_count` uniform draws
/// `y' ~ U(x)` of `pi(y'|x) / (1/|U(x)|) * delta_hat(x, y')`. Records with an
/// empty unsupported set contribute zero-valued draws.
pub fn exact_sampled_objective_expectation(
    problem: &SyntheticProblem,
    logging: &dyn Policy,
    target: &dyn Policy,
    model: &RewardModel,
    replay_count: usize,
) -> Result<f64> {
    if replay_count == 0 {
        return Err(Error::contract("replay_count must be at least 1"));
    }
    check_actions(problem, &[logging, target])?;
    let l = prob_table(logging, &problem.contexts)?;
    let t = prob_table(target, &problem.contexts)?;
    let draws: Vec<f64> = (0..problem.n_contexts())
        .map(|c| expected_replay_average(&l[c], &t[c], replay_count, |y| {
            model.predict(c, &problem.contexts[c], y)
        }))
        .collect();
    Ok(expect_logged(problem, &l, |c, y| {
        t[c][y] / l[c][y] * problem.delta(c, y) + draws[c]
    }))
}

/// Expectation of `(1/k) sum_j pi(y_j) |U| delta_hat(y_j)` over
/// `(y_1..y_k) ~ Uniform(U)^k`, enumerating the tuples when feasible.
fn expected_replay_average(
    logging: &[f64],
    target: &[f64],
    k: usize,
    predict: impl Fn(usize) -> f64,
) -> f64 {
    let unsupported = unsupported_actions(logging);
    let u = unsupported.len();
    if u == 0 {
        return 0.0;
    }
    let terms: Vec<f64> = unsupported
        .iter()
        .map(|&y| target[y] * u as f64 * predict(y))
        .collect();
    let tuples = (u as f64).powi(k as i32);
    if tuples > MAX_DRAW_TUPLES as f64 {
        return terms.iter().sum::<f64>() / u as f64;
    }
    let prob = 1.0 / tuples;
    let mut odometer = vec![0usize; k];
    let mut total = 0.0;
    loop {
        let avg: f64 = odometer.iter().map(|&i| terms[i]).sum::<f64>() / k as f64;
        total += prob * avg;
        let mut pos = 0;
        loop {
            if pos == k {
                return total;
            }
            odometer[pos] += 1;
            if odometer[pos] < u {
                break;
            }
            odometer[pos] = 0;
            pos += 1;
        }
    }
}

/// The policy that ERM with IPS selects in the infinite-data limit: the
/// maximiser of `E_D[R_IPS(pi)]`. Ties (relative 1e-12) go to the policy
/// with the lowest true value, then to the larger support divergence, which
/// is the adversarial choice among the maximisers.
pub fn ips_erm_choice(
    problem: &SyntheticProblem,
    logging: &dyn Policy,
    policies: &[&dyn Policy],
) -> Result<usize> {
    if policies.is_empty() {
        return Err(Error::EmptyPolicyList);
    }
    let reports = policies
        .iter()
        .map(|p| exact_ips_bias(problem, logging, *p))
        .collect::<Result<Vec<_>>>()?;
    let best = reports
        .iter()
        .map(|r| r.estimator_expectation)
        .fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-12 * best.abs().max(1.0);
    let choice = (0..reports.len())
        .filter(|&i| reports[i].estimator_expectation >= best - tol)
        .min_by(|&a, &b| {
            let (ra, rb) = (&reports[a], &reports[b]);
            ra.true_value
                .total_cmp(&rb.true_value)
                .then(rb.support_divergence.total_cmp(&ra.support_divergence))
        })
        .expect("at least one maximiser");
    Ok(choice)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarialOutcome {
    pub mean_reward: Vec<Vec<f64>>,
    /// Index of the ERM choice in the policy list.
    pub erm_choice: usize,
    /// Index of the policy with the highest true value.
    pub best: usize,
    /// `R(pi*) - R(pi_hat)`.
    pub gap: f64,
    pub max_divergence: f64,
    /// `(r_max - r_min) * max_pi D_X(pi | pi_0)`.
    pub lower_bound: f64,
}

/// Builds the deterministic reward table under which IPS-based ERM is at
/// least `(r_max - r_min) * max D_X` suboptimal over `policies`.
///
/// For `r_min >= 0` unsupported actions earn `r_max` and supported ones
/// `r_min`; for `r_max <= 0` the roles flip (supported earn `r_max`, which
/// IPS cannot tell apart from the implicit zero on unsupported actions).
/// A range straddling zero admits no such table in general and is rejected.
pub fn adversarial_construction(
    skeleton: &SyntheticProblem,
    logging: &dyn Policy,
    policies: &[&dyn Policy],
) -> Result<AdversarialOutcome> {
    if policies.is_empty() {
        return Err(Error::EmptyPolicyList);
    }
    let bounds = skeleton.reward_bounds;
    let (on_unsupported, on_supported) = if bounds.min >= 0.0 {
        (bounds.max, bounds.min)
    } else if bounds.max <= 0.0 {
        (bounds.min, bounds.max)
    } else {
        return Err(Error::contract(format!(
            "reward range [{}, {}] straddles zero",
            bounds.min, bounds.max
        )));
    };
    let l = prob_table(logging, &skeleton.contexts)?;
    let mean_reward: Vec<Vec<f64>> = l
        .iter()
        .map(|row| {
            row.iter()
                .map(|&p| if p == 0.0 { on_unsupported } else { on_supported })
                .collect()
        })
        .collect();
    let problem = skeleton.with_mean_reward(mean_reward.clone())?;
    let erm_choice = ips_erm_choice(&problem, logging, policies)?;
    let values = policies
        .iter()
        .map(|p| exact_policy_value(&problem, *p))
        .collect::<Result<Vec<_>>>()?;
    let best = (0..values.len())
        .max_by(|&a, &b| values[a].total_cmp(&values[b]).then(b.cmp(&a)))
        .expect("nonempty");
    let max_divergence = policies
        .iter()
        .map(|p| exact_support_divergence(&problem, logging, *p))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    Ok(AdversarialOutcome {
        mean_reward,
        erm_choice,
        best,
        gap: values[best] - values[erm_choice],
        max_divergence,
        lower_bound: bounds.width() * max_divergence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::TabularPolicy;
    use crate::problem::RewardBounds;

    fn fixture() -> (SyntheticProblem, TabularPolicy, TabularPolicy) {
        let problem = SyntheticProblem::uniform(
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![1.0, 0.0, 0.5], vec![0.2, 0.8, 0.4]],
            RewardBounds::new(0.0, 1.0).unwrap(),
        )
        .unwrap();
        let logging = TabularPolicy::new(vec![vec![0.5, 0.5, 0.0], vec![1.0, 0.0, 0.0]]).unwrap();
        let target = TabularPolicy::new(vec![vec![0.2, 0.3, 0.5], vec![0.6, 0.3, 0.1]]).unwrap();
        (problem, logging, target)
    }

    #[test]
    fn fixture_values() {
        let (problem, logging, target) = fixture();
        let rep = exact_ips_bias(&problem, &logging, &target).unwrap();
        assert!((rep.true_value - 0.425).abs() < 1e-12);
        assert!((rep.estimator_expectation - 0.16).abs() < 1e-12);
        assert!((rep.bias + 0.265).abs() < 1e-12);
        assert!((rep.support_divergence - 0.45).abs() < 1e-12);
        assert!((rep.expected_weight_sum - 0.55).abs() < 1e-12);
        let closed = ips_bias_closed_form(&problem, &logging, &target).unwrap();
        assert!((closed - rep.bias).abs() < 1e-12);
    }

    #[test]
    fn constant_reward_and_optimum() {
        let (problem, _, _) = fixture();
        let flat = problem.with_mean_reward(vec![vec![0.3; 3]; 2]).unwrap();
        let uniform = TabularPolicy::uniform(2, 3);
        assert!((exact_policy_value(&flat, &uniform).unwrap() - 0.3).abs() < 1e-15);
        let best = TabularPolicy::deterministic(&[0, 1], 3).unwrap();
        assert!((exact_policy_value(&problem, &best).unwrap() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn divergence_edge_cases() {
        let (problem, logging, _) = fixture();
        assert_eq!(exact_support_divergence(&problem, &logging, &logging).unwrap(), 0.0);
        let on_u = TabularPolicy::deterministic(&[2, 1], 3).unwrap();
        assert_eq!(exact_support_divergence(&problem, &logging, &on_u).unwrap(), 1.0);
    }

    #[test]
    fn augmented_bias_cases() {
        let (problem, logging, target) = fixture();
        let exact = RewardModel::exact(&problem);
        assert_eq!(exact_augmented_bias(&problem, &logging, &target, &exact).unwrap(), 0.0);
        let conservative = RewardModel::conservative(problem.reward_bounds);
        let b = exact_augmented_bias(&problem, &logging, &target, &conservative).unwrap();
        assert!((b + 0.265).abs() < 1e-12);
        let shifted = RewardModel::Table {
            values: problem.mean_reward.iter().map(|r| r.iter().map(|d| d + 0.1).collect()).collect(),
        };
        let b = exact_augmented_bias(&problem, &logging, &target, &shifted).unwrap();
        assert!((b - 0.045).abs() < 1e-12);
        let e = exact_augmented_expectation(&problem, &logging, &target, &shifted).unwrap();
        assert!((e - 0.425 - 0.045).abs() < 1e-12);
    }

    #[test]
    fn sampled_objective_matches_exact_augmentation() {
        let (problem, logging, target) = fixture();
        let exact = RewardModel::exact(&problem);
        for k in [1, 2, 5] {
            let v = exact_sampled_objective_expectation(&problem, &logging, &target, &exact, k)
                .unwrap();
            assert!((v - 0.425).abs() < 1e-12, "k={k}: {v}");
        }
    }

    #[test]
    fn sampled_objective_without_unsupported_actions_is_ips() {
        let (problem, _, target) = fixture();
        let full = TabularPolicy::uniform(2, 3);
        let model = RewardModel::Constant { value: 0.9 };
        let v = exact_sampled_objective_expectation(&problem, &full, &target, &model, 3).unwrap();
        let ips = exact_ips_bias(&problem, &full, &target).unwrap().estimator_expectation;
        assert!((v - ips).abs() < 1e-15);
    }

    #[test]
    fn adversarial_fixture_realises_the_bound() {
        let (problem, logging, _) = fixture();
        let on_u = TabularPolicy::deterministic(&[2, 1], 3).unwrap();
        let policies: Vec<&dyn Policy> = vec![&logging, &on_u];
        let out = adversarial_construction(&problem, &logging, &policies).unwrap();
        assert_eq!(out.max_divergence, 1.0);
        assert_eq!(out.gap, 1.0);
        assert_eq!(out.erm_choice, 0);
        assert!(out.gap >= out.lower_bound);

        let only: Vec<&dyn Policy> = vec![&logging];
        let out = adversarial_construction(&problem, &logging, &only).unwrap();
        assert_eq!(out.gap, 0.0);
        assert_eq!(out.lower_bound, 0.0);
    }

    #[test]
    fn adversarial_rejects_empty_list_and_mixed_sign_ranges() {
        let (problem, logging, _) = fixture();
        assert_eq!(
            adversarial_construction(&problem, &logging, &[]),
            Err(Error::EmptyPolicyList)
        );
        let mut mixed = problem.with_mean_reward(vec![vec![0.0; 3]; 2]).unwrap();
        mixed.reward_bounds = RewardBounds::new(-1.0, 1.0).unwrap();
        let policies: Vec<&dyn Policy> = vec![&logging];
        assert!(matches!(
            adversarial_construction(&mixed, &logging, &policies),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn negative_rewards_let_erm_return_the_bad_policy() {
        // one context; actions 0 and 1 supported, action 2 never logged
        let problem = SyntheticProblem::uniform(
            vec![vec![1.0]],
            vec![vec![-0.1, -0.25, -1.0]],
            RewardBounds::new(-1.0, 0.0).unwrap(),
        )
        .unwrap();
        let logging = TabularPolicy::new(vec![vec![0.5, 0.5, 0.0]]).unwrap();
        let good = TabularPolicy::new(vec![vec![1.0, 0.0, 0.0]]).unwrap();
        let bad = TabularPolicy::new(vec![vec![0.0, 0.4, 0.6]]).unwrap();
        assert!((exact_policy_value(&problem, &good).unwrap() + 0.1).abs() < 1e-12);
        assert!((exact_policy_value(&problem, &bad).unwrap() + 0.7).abs() < 1e-12);
        assert!((exact_support_divergence(&problem, &logging, &bad).unwrap() - 0.6).abs() < 1e-12);
        let policies: Vec<&dyn Policy> = vec![&good, &bad];
        assert_eq!(ips_erm_choice(&problem, &logging, &policies).unwrap(), 1);
    }
}

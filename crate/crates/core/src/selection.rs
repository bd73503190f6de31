//! Grid search over the reward shift `k` and the concentration bound that
//! links the importance-weight sum to the support divergence.

use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LoggedDataset;
use crate::error::{Error, Result};
use crate::estimators::{augmented_ips, build_minsup, conservative_model, dm, ips, minsup_estimate, AugmentOptions, DEFAULT_WEIGHT_BOUND};
use crate::learning::{train_erm, LearnedPolicy, TrainConfig, TrainInputs};
use crate::oracle::exact_policy_value;
use crate::policy::{prob_table, Policy, SoftmaxPolicy};
use crate::problem::{RewardBounds, SyntheticProblem};
use crate::reward_model::RewardModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selector {
    MinSup,
    Dm,
    Conservative,
    Oracle,
}

impl Selector {
    pub const ALL: [Selector; 4] = [Selector::MinSup, Selector::Dm, Selector::Conservative, Selector::Oracle];
}

/// 21 evenly spaced shifts over `[-(r_max - r_min), r_max - r_min]`.
pub fn default_grid(bounds: RewardBounds) -> Vec<f64> {
    let w = bounds.width();
    (0..21).map(|i| -w + 2.0 * w * i as f64 / 20.0).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepEntry {
    pub k: f64,
    pub policy_id: usize,
    pub estimates: BTreeMap<Selector, f64>,
    /// `S_D` of the learned policy on the validation data.
    pub val_weight_sum: Option<f64>,
    pub implied_unsupported_mass: Option<f64>,
    pub exact_value: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub entries: Vec<SweepEntry>,
    /// Chosen `k` per selector; `None` when every grid point failed.
    pub chosen: BTreeMap<Selector, Option<f64>>,
    #[serde(skip)]
    pub policies: Vec<Option<LearnedPolicy>>,
}

impl SweepResult {
    pub fn entry_for(&self, selector: Selector) -> Option<&SweepEntry> {
        let k = (*self.chosen.get(&selector)?)?;
        self.entries.iter().find(|e| e.k == k && e.error.is_none())
    }

    pub fn policy_for(&self, selector: Selector) -> Option<&LearnedPolicy> {
        let entry = self.entry_for(selector)?;
        self.policies.get(entry.policy_id)?.as_ref()
    }

    pub fn softmax_for(&self, selector: Selector, contexts: &[Vec<f64>]) -> Option<Result<SoftmaxPolicy>> {
        self.policy_for(selector).map(|p| p.to_softmax(contexts))
    }
}

/// Everything a sweep needs besides the grid and training config.
#[derive(Debug, Clone)]
pub struct SweepInputs<'a> {
    pub train: &'a LoggedDataset,
    pub val: &'a LoggedDataset,
    pub n_actions: usize,
    pub logging: Arc<dyn Policy>,
    pub bounds: RewardBounds,
    /// Required by the DM selector.
    pub reward_model: Option<&'a RewardModel>,
    /// Required by the oracle selector and for exact values.
    pub problem: Option<&'a SyntheticProblem>,
}

fn estimate(
    selector: Selector,
    inputs: &SweepInputs<'_>,
    policy: &dyn Policy,
    minsup: &crate::estimators::MinSupPolicy,
) -> Result<f64> {
    match selector {
        Selector::MinSup => Ok(minsup_estimate(inputs.val, policy, minsup)?.value),
        Selector::Dm => {
            let model = inputs
                .reward_model
                .ok_or_else(|| Error::contract("DM selector needs a reward model"))?;
            dm(inputs.val, policy, model)
        }
        Selector::Conservative => Ok(augmented_ips(
            inputs.val,
            policy,
            inputs.logging.as_ref(),
            &conservative_model(inputs.bounds),
            &AugmentOptions::default(),
        )?
        .value),
        Selector::Oracle => {
            let problem = inputs
                .problem
                .ok_or_else(|| Error::contract("oracle selector needs the problem"))?;
            exact_policy_value(problem, policy)
        }
    }
}

/// Trains one shifted-objective policy per grid point (in parallel), scores
/// each with every selector on the validation data and picks the argmax per
/// selector, ties to the smaller `|k|`. Failed grid points are recorded and
/// skipped.
pub fn sweep_k(
    inputs: &SweepInputs<'_>,
    grid: &[f64],
    train_config: &TrainConfig,
    selectors: &[Selector],
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::contract("grid must be nonempty"));
    }
    if grid.iter().any(|k| !k.is_finite()) {
        return Err(Error::contract("grid values must be finite"));
    }
    let minsup = build_minsup(inputs.logging.as_ref(), &inputs.val.contexts, DEFAULT_WEIGHT_BOUND)?;
    let outcomes: Vec<(SweepEntry, Option<LearnedPolicy>)> = grid
        .par_iter()
        .enumerate()
        .map(|(id, &k)| {
            let mut entry = SweepEntry {
                k,
                policy_id: id,
                estimates: BTreeMap::new(),
                val_weight_sum: None,
                implied_unsupported_mass: None,
                exact_value: None,
                error: None,
            };
            let mut run = || -> Result<LearnedPolicy> {
                let trained = train_erm(
                    &TrainInputs {
                        data: inputs.train,
                        n_actions: inputs.n_actions,
                        logging: Some(inputs.logging.clone()),
                        reward_model: inputs.reward_model,
                    },
                    &train_config.clone().shifted(k),
                )?;
                let policy = trained.policy;
                let s = ips(inputs.val, &policy)?.weight_sum;
                entry.val_weight_sum = Some(s);
                entry.implied_unsupported_mass = Some(1.0 - s);
                if let Some(problem) = inputs.problem {
                    entry.exact_value = Some(exact_policy_value(problem, &policy)?);
                }
                for &sel in selectors {
                    entry.estimates.insert(sel, estimate(sel, inputs, &policy, &minsup)?);
                }
                Ok(policy)
            };
            match run() {
                Ok(policy) => (entry, Some(policy)),
                Err(e) => {
                    entry.error = Some(format!("k = {k}: {e}"));
                    entry.estimates.clear();
                    (entry, None)
                }
            }
        })
        .collect();
    let (entries, policies): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    let chosen = selectors
        .iter()
        .map(|&sel| (sel, choose(&entries, sel)))
        .collect();
    Ok(SweepResult {
        entries,
        chosen,
        policies,
    })
}

fn choose(entries: &[SweepEntry], selector: Selector) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for e in entries.iter().filter(|e| e.error.is_none()) {
        let Some(&v) = e.estimates.get(&selector) else {
            continue;
        };
        let better = match best {
            None => true,
            Some((bv, bk)) => v > bv || (v == bv && (e.k.abs(), e.k) < (bk.abs(), bk)),
        };
        if better {
            best = Some((v, e.k));
        }
    }
    best.map(|(_, k)| k)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaCheck {
    pub satisfied: bool,
    pub failure_prob_bound: f64,
}

/// `satisfied` iff `1 - kappa + epsilon <= weight_sum <= 1 - epsilon`. When
/// it holds, `0 <= D(pi|pi_0) <= kappa` fails with probability at most
/// `2 exp(-2 n epsilon^2 p_min^2)`.
pub fn check_kappa(weight_sum: f64, kappa: f64, epsilon: f64, n: usize, p_min: f64) -> Result<KappaCheck> {
    if !(epsilon > 0.0 && epsilon < kappa / 2.0) {
        return Err(Error::contract(format!("need 0 < epsilon < kappa/2, got epsilon {epsilon}, kappa {kappa}")));
    }
    if !(p_min > 0.0 && p_min <= 1.0) {
        return Err(Error::contract(format!("p_min {p_min} not in (0, 1]")));
    }
    if n == 0 {
        return Err(Error::contract("n must be positive"));
    }
    Ok(KappaCheck {
        satisfied: 1.0 - kappa + epsilon <= weight_sum && weight_sum <= 1.0 - epsilon,
        failure_prob_bound: 2.0 * (-2.0 * n as f64 * epsilon * epsilon * p_min * p_min).exp(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PMin {
    pub value: f64,
    /// True when taken from logged propensities rather than the policy.
    pub estimated: bool,
}

/// Smallest positive logging propensity over all contexts.
pub fn p_min_from_policy(logging: &dyn Policy, contexts: &[Vec<f64>]) -> Result<PMin> {
    let value = prob_table(logging, contexts)?
        .into_iter()
        .flatten()
        .filter(|&p| p > 0.0)
        .fold(f64::INFINITY, f64::min);
    if !value.is_finite() {
        return Err(Error::contract("logging policy has no support"));
    }
    Ok(PMin {
        value,
        estimated: false,
    })
}

/// Smallest logged propensity; an upper estimate of the true `p_min`.
pub fn p_min_from_sample(dataset: &LoggedDataset) -> Result<PMin> {
    dataset.validate()?;
    let value = dataset
        .records
        .iter()
        .map(|r| r.propensity)
        .fold(f64::INFINITY, f64::min);
    if !value.is_finite() {
        return Err(Error::EmptyDataset);
    }
    Ok(PMin {
        value,
        estimated: true,
    })
}

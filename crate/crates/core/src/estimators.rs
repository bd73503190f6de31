//! Counterfactual value estimators over logged data.
//!
//! Every estimator is a mean of per-record terms. Terms are computed once per
//! record from per-context probability tables and reduced with pairwise
//! summation, so results do not depend on thread count.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::LoggedDataset;
use crate::error::{Error, Result};
use crate::learning::augment_with_rng;
use crate::policy::{prob_table, Policy};
use crate::problem::RewardBounds;
use crate::reward_model::RewardModel;
use crate::stats::{pairwise_sum, std_error};
use crate::support::unsupported_actions;

pub const DEFAULT_WEIGHT_BOUND: f64 = 100.0;
pub const DEFAULT_EXACT_CUTOFF: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub value: f64,
    /// `S_D = (1/n) sum_i pi(y_i|x_i) / p0_i`.
    pub weight_sum: f64,
    pub n: usize,
    pub diagnostics: BTreeMap<String, f64>,
}

impl EstimatorReport {
    fn from_terms(values: &[f64], weights: &[f64]) -> Self {
        let n = values.len();
        let value = pairwise_sum(values) / n as f64;
        let weight_sum = pairwise_sum(weights) / n as f64;
        let mut diagnostics = BTreeMap::new();
        diagnostics.insert(
            "max_weight".to_string(),
            weights.iter().copied().fold(0.0, f64::max),
        );
        diagnostics.insert("unsupported_mass".to_string(), 1.0 - weight_sum);
        diagnostics.insert("std_error".to_string(), std_error(values));
        Self {
            value,
            weight_sum,
            n,
            diagnostics,
        }
    }

    pub fn diagnostic(&self, name: &str) -> Option<f64> {
        self.diagnostics.get(name).copied()
    }
}

fn checked(dataset: &LoggedDataset, policies: &[&dyn Policy]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    dataset.validate()?;
    for p in policies {
        if let Some((i, rec)) = dataset
            .records
            .iter()
            .enumerate()
            .find(|(_, r)| r.action >= p.n_actions())
        {
            return Err(Error::CorruptData {
                record: i,
                reason: format!("action {} outside {} actions", rec.action, p.n_actions()),
            });
        }
    }
    Ok(())
}

/// Importance weights `pi(y_i|x_i) / p0_i`, one per record.
pub fn importance_weights(dataset: &LoggedDataset, target: &dyn Policy) -> Result<Vec<f64>> {
    checked(dataset, &[target])?;
    let t = prob_table(target, &dataset.contexts)?;
    Ok(dataset
        .records
        .iter()
        .map(|r| t[r.context][r.action] / r.propensity)
        .collect())
}

/// `(1/n) sum_i pi(y_i|x_i) / p0_i * r_i`.
pub fn ips(dataset: &LoggedDataset, target: &dyn Policy) -> Result<EstimatorReport> {
    let weights = importance_weights(dataset, target)?;
    let values: Vec<f64> = weights
        .iter()
        .zip(&dataset.records)
        .map(|(w, r)| w * r.reward)
        .collect();
    Ok(EstimatorReport::from_terms(&values, &weights))
}

/// Imputes `r_min` on unsupported actions.
pub fn conservative_model(bounds: RewardBounds) -> RewardModel {
    RewardModel::conservative(bounds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentOptions {
    /// Unsupported sets larger than this are summed by sampling.
    pub exact_cutoff: usize,
    pub replay_count: usize,
    pub seed: u64,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        Self {
            exact_cutoff: DEFAULT_EXACT_CUTOFF,
            replay_count: 1,
            seed: 0,
        }
    }
}

/// IPS on the logged records plus `sum_{y in U(x_i)} pi(y|x_i) delta_hat(x_i, y)`
/// per record. The inner sum is exact unless some unsupported set is larger
/// than `options.exact_cutoff`, in which case it is replaced by uniform draws
/// from `U(x_i)` with propensity `1/|U(x_i)|`.
pub fn augmented_ips(
    dataset: &LoggedDataset,
    target: &dyn Policy,
    logging: &dyn Policy,
    model: &RewardModel,
    options: &AugmentOptions,
) -> Result<EstimatorReport> {
    checked(dataset, &[target, logging])?;
    let t = prob_table(target, &dataset.contexts)?;
    let l = prob_table(logging, &dataset.contexts)?;
    let unsupported: Vec<Vec<usize>> = l.iter().map(|row| unsupported_actions(row)).collect();
    let weights: Vec<f64> = dataset
        .records
        .iter()
        .map(|r| t[r.context][r.action] / r.propensity)
        .collect();
    let largest = unsupported.iter().map(Vec::len).max().unwrap_or(0);
    let imputed: Vec<f64> = if largest <= options.exact_cutoff {
        let per_context: Vec<f64> = unsupported
            .iter()
            .enumerate()
            .map(|(c, u)| {
                let x = &dataset.contexts[c];
                u.iter().map(|&y| t[c][y] * model.predict(c, x, y)).sum()
            })
            .collect();
        dataset.records.iter().map(|r| per_context[r.context]).collect()
    } else {
        if options.replay_count == 0 {
            return Err(Error::contract("replay_count must be at least 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
        let augmented = augment_with_rng(dataset, &unsupported, model, options.replay_count, &mut rng);
        let mut per_record = vec![0.0; dataset.len()];
        for (rec, &origin) in augmented.synthetic.iter().zip(&augmented.origin) {
            per_record[origin] += t[rec.context][rec.action] / rec.propensity * rec.reward;
        }
        let k = options.replay_count as f64;
        per_record.into_iter().map(|v| v / k).collect()
    };
    let values: Vec<f64> = weights
        .iter()
        .zip(&dataset.records)
        .zip(&imputed)
        .map(|((w, r), m)| w * r.reward + m)
        .collect();
    let mut report = EstimatorReport::from_terms(&values, &weights);
    report
        .diagnostics
        .insert("imputed".to_string(), pairwise_sum(&imputed) / dataset.len() as f64);
    Ok(report)
}

/// Doubly robust estimate
/// `(1/n) sum_i [ sum_y pi(y|x_i) delta_hat(x_i, y) + w_i (r_i - delta_hat(x_i, y_i)) ]`.
///
/// The same quantity is also computed as supported-sum plus correction plus
/// unsupported-sum, using the support of `logging` when given (an empty
/// unsupported set otherwise). The two must agree to `1e-10` relative.
pub fn dr(
    dataset: &LoggedDataset,
    target: &dyn Policy,
    model: &RewardModel,
    logging: Option<&dyn Policy>,
) -> Result<EstimatorReport> {
    checked(dataset, &[target])?;
    let t = prob_table(target, &dataset.contexts)?;
    let predictions: Vec<Vec<f64>> = dataset
        .contexts
        .iter()
        .enumerate()
        .map(|(c, x)| (0..t[c].len()).map(|y| model.predict(c, x, y)).collect())
        .collect();
    let unsupported: Vec<Vec<usize>> = match logging {
        Some(l) => {
            checked(dataset, &[l])?;
            prob_table(l, &dataset.contexts)?
                .iter()
                .map(|row| unsupported_actions(row))
                .collect()
        }
        None => vec![Vec::new(); dataset.contexts.len()],
    };
    let direct: Vec<f64> = (0..dataset.contexts.len())
        .map(|c| t[c].iter().zip(&predictions[c]).map(|(p, d)| p * d).sum())
        .collect();
    let split: Vec<(f64, f64)> = (0..dataset.contexts.len())
        .map(|c| {
            let (mut sup, mut unsup) = (0.0, 0.0);
            for (y, (p, d)) in t[c].iter().zip(&predictions[c]).enumerate() {
                if unsupported[c].contains(&y) {
                    unsup += p * d;
                } else {
                    sup += p * d;
                }
            }
            (sup, unsup)
        })
        .collect();
    let mut weights = Vec::with_capacity(dataset.len());
    let mut joint = Vec::with_capacity(dataset.len());
    let mut decomposed = Vec::with_capacity(dataset.len());
    for r in &dataset.records {
        let w = t[r.context][r.action] / r.propensity;
        let correction = w * (r.reward - predictions[r.context][r.action]);
        let (sup, unsup) = split[r.context];
        weights.push(w);
        joint.push(direct[r.context] + correction);
        decomposed.push(sup + correction + unsup);
    }
    let mut report = EstimatorReport::from_terms(&joint, &weights);
    let other = pairwise_sum(&decomposed) / dataset.len() as f64;
    let gap = (report.value - other).abs();
    if gap > 1e-10 * report.value.abs().max(1.0) {
        return Err(Error::IdentityViolation {
            name: "dr_decomposition",
            gap,
        });
    }
    report.diagnostics.insert("decomposition_gap".to_string(), gap);
    Ok(report)
}

/// Direct method over the logged contexts:
/// `(1/n) sum_i sum_y pi(y|x_i) delta_hat(x_i, y)`.
pub fn dm(dataset: &LoggedDataset, target: &dyn Policy, model: &RewardModel) -> Result<f64> {
    checked(dataset, &[target])?;
    let per_context = dm_per_context(&dataset.contexts, target, model)?;
    let values: Vec<f64> = dataset.records.iter().map(|r| per_context[r.context]).collect();
    Ok(pairwise_sum(&values) / values.len() as f64)
}

/// Direct method over explicit contexts with weights summing to one.
pub fn dm_weighted(
    contexts: &[Vec<f64>],
    weights: &[f64],
    target: &dyn Policy,
    model: &RewardModel,
) -> Result<f64> {
    if contexts.len() != weights.len() {
        return Err(Error::contract("one weight per context required"));
    }
    let per_context = dm_per_context(contexts, target, model)?;
    let values: Vec<f64> = per_context.iter().zip(weights).map(|(v, w)| v * w).collect();
    Ok(pairwise_sum(&values))
}

fn dm_per_context(contexts: &[Vec<f64>], target: &dyn Policy, model: &RewardModel) -> Result<Vec<f64>> {
    let t = prob_table(target, contexts)?;
    Ok(t.iter()
        .enumerate()
        .map(|(c, row)| {
            row.iter()
                .enumerate()
                .map(|(y, p)| p * model.predict(c, &contexts[c], y))
                .sum()
        })
        .collect())
}

/// A policy on the logging support that puts as much mass as the weight
/// bound allows on the least-supported actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinSupPolicy {
    pub table: Vec<Vec<f64>>,
    pub weight_bound: f64,
}

impl Policy for MinSupPolicy {
    fn n_actions(&self) -> usize {
        self.table.first().map_or(0, Vec::len)
    }

    fn probs(&self, context: usize, _features: &[f64]) -> Result<Vec<f64>> {
        self.table
            .get(context)
            .cloned()
            .ok_or_else(|| Error::contract(format!("context {context} outside the MinSup table")))
    }
}

/// Greedy construction per context: visit supported actions by ascending
/// propensity (ties by action index) and give each `min(remaining,
/// bound * pi_0(y|x))` until the mass is used up.
pub fn minsup_row(logging: &[f64], weight_bound: f64) -> Result<Vec<f64>> {
    if !(weight_bound >= 1.0) {
        return Err(Error::contract(format!("weight bound {weight_bound} must be at least 1")));
    }
    let mut order: Vec<usize> = (0..logging.len()).filter(|&y| logging[y] > 0.0).collect();
    if order.is_empty() {
        return Err(Error::InvalidPolicy("logging policy has empty support".into()));
    }
    order.sort_by(|&a, &b| logging[a].total_cmp(&logging[b]).then(a.cmp(&b)));
    let mut row = vec![0.0; logging.len()];
    let mut remaining: f64 = 1.0;
    for &y in &order {
        if remaining <= 0.0 {
            break;
        }
        let mut cap = weight_bound * logging[y];
        while cap / logging[y] > weight_bound {
            cap = cap.next_down();
        }
        let p = remaining.min(cap);
        row[y] = p;
        remaining -= p;
    }
    if remaining > 1e-12 {
        return Err(Error::InvalidPolicy(format!(
            "weight bound {weight_bound} leaves {remaining} mass unassigned"
        )));
    }
    Ok(row)
}

pub fn build_minsup(
    logging: &dyn Policy,
    contexts: &[Vec<f64>],
    weight_bound: f64,
) -> Result<MinSupPolicy> {
    let table = prob_table(logging, contexts)?
        .iter()
        .map(|row| minsup_row(row, weight_bound))
        .collect::<Result<Vec<_>>>()?;
    Ok(MinSupPolicy {
        table,
        weight_bound,
    })
}

/// `R_IPS(pi) + (1 - S_D(pi)) * R_IPS(pi_MinSup)`, both on the same data.
pub fn minsup_estimate(
    dataset: &LoggedDataset,
    target: &dyn Policy,
    minsup: &MinSupPolicy,
) -> Result<EstimatorReport> {
    minsup_estimate_with_holdout(dataset, target, minsup, dataset)
}

/// As [`minsup_estimate`], but `R_IPS(pi_MinSup)` is computed on `holdout`.
pub fn minsup_estimate_with_holdout(
    dataset: &LoggedDataset,
    target: &dyn Policy,
    minsup: &MinSupPolicy,
    holdout: &LoggedDataset,
) -> Result<EstimatorReport> {
    let mut report = ips(dataset, target)?;
    let fill = ips(holdout, minsup)?;
    report.value += (1.0 - report.weight_sum) * fill.value;
    report.diagnostics.insert("minsup_ips".to_string(), fill.value);
    Ok(report)
}

//! Stochastic policies over a finite action set.
//!
//! Every policy maps a context (its index in the problem's context table plus
//! its feature vector) to a probability vector over actions. Softmax policies
//! compute `exp(tau * f_w(x, y))` normalised over the actions left open by an
//! optional support mask; masked actions get an exact zero, which is what makes
//! the unsupported sets `U(x, pi_0)` unambiguous.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::support::unsupported_actions;

pub trait Policy: Send + Sync + fmt::Debug {
    fn n_actions(&self) -> usize;

    /// Action probabilities at context `context` with features `features`.
    fn probs(&self, context: usize, features: &[f64]) -> Result<Vec<f64>>;
}

impl<P: Policy + ?Sized> Policy for Arc<P> {
    fn n_actions(&self) -> usize {
        (**self).n_actions()
    }

    fn probs(&self, context: usize, features: &[f64]) -> Result<Vec<f64>> {
        (**self).probs(context, features)
    }
}

impl<P: Policy + ?Sized> Policy for &P {
    fn n_actions(&self) -> usize {
        (**self).n_actions()
    }

    fn probs(&self, context: usize, features: &[f64]) -> Result<Vec<f64>> {
        (**self).probs(context, features)
    }
}

/// Probability tables for every context in `contexts`.
pub fn prob_table(policy: &dyn Policy, contexts: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    contexts
        .iter()
        .enumerate()
        .map(|(c, x)| policy.probs(c, x))
        .collect()
}

/// Linear-score softmax policy with temperature and optional support mask.
///
/// Serialises as `{"weights": [[..]], "temperature": t, "mask": [[..]] | null}`
/// where `weights[action]` is the per-action weight vector over context
/// features and `mask[context][action] == false` forces probability zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    pub weights: Vec<Vec<f64>>,
    pub temperature: f64,
    pub mask: Option<Vec<Vec<bool>>>,
}

impl SoftmaxPolicy {
    pub fn new(weights: Vec<Vec<f64>>, temperature: f64) -> Result<Self> {
        let policy = Self {
            weights,
            temperature,
            mask: None,
        };
        policy.validate()?;
        Ok(policy)
    }

    pub fn zeros(n_actions: usize, dim: usize) -> Self {
        Self {
            weights: vec![vec![0.0; dim]; n_actions],
            temperature: 1.0,
            mask: None,
        }
    }

    pub fn with_mask(mut self, mask: Vec<Vec<bool>>) -> Result<Self> {
        self.mask = Some(mask);
        self.validate()?;
        Ok(self)
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        self.temperature = temperature;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.weights.is_empty() {
            return Err(Error::InvalidPolicy("policy has no actions".into()));
        }
        let dim = self.weights[0].len();
        if self.weights.iter().any(|w| w.len() != dim) {
            return Err(Error::InvalidPolicy("ragged weight matrix".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidPolicy(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if let Some(mask) = &self.mask {
            for (c, row) in mask.iter().enumerate() {
                if row.len() != self.weights.len() {
                    return Err(Error::InvalidPolicy(format!("mask row {c} has wrong length")));
                }
                if !row.iter().any(|&open| open) {
                    return Err(Error::InvalidPolicy(format!("every action masked at context {c}")));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.weights[0].len()
    }

    /// Raw scores `f_w(x, y)` before temperature.
    pub fn scores(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.dim() {
            return Err(Error::contract(format!(
                "context has dimension {}, policy expects {}",
                features.len(),
                self.dim()
            )));
        }
        Ok(self
            .weights
            .iter()
            .map(|w| w.iter().zip(features).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn mask_row(&self, context: usize) -> Result<Option<&[bool]>> {
        match &self.mask {
            None => Ok(None),
            Some(mask) => mask.get(context).map(|r| Some(r.as_slice())).ok_or_else(|| {
                Error::contract(format!(
                    "context {context} outside the {} masked contexts",
                    mask.len()
                ))
            }),
        }
    }

    /// Probabilities with an extra support restriction on top of the policy's
    /// own mask. Used for the action-restricted objective.
    pub fn probs_restricted(
        &self,
        context: usize,
        features: &[f64],
        allowed: Option<&[bool]>,
    ) -> Result<Vec<f64>> {
        let scores = self.scores(features)?;
        let own = self.mask_row(context)?;
        let open = |y: usize| own.is_none_or(|m| m[y]) && allowed.is_none_or(|m| m[y]);
        masked_softmax(&scores, self.temperature, open).map_err(|e| match e {
            Error::InvalidPolicy(_) if allowed.is_some() => Error::DegenerateRestriction {
                context: Some(context),
            },
            Error::InvalidPolicy(msg) => Error::InvalidPolicy(format!("{msg} (context {context})")),
            other => other,
        })
    }
}

impl Policy for SoftmaxPolicy {
    fn n_actions(&self) -> usize {
        self.weights.len()
    }

    fn probs(&self, context: usize, features: &[f64]) -> Result<Vec<f64>> {
        self.probs_restricted(context, features, None)
    }
}

/// Softmax of `temperature * scores` over the actions for which `open` holds,
/// with max-score subtraction. Closed actions get exactly zero.
pub fn masked_softmax(
    scores: &[f64],
    temperature: f64,
    open: impl Fn(usize) -> bool,
) -> Result<Vec<f64>> {
    if let Some(bad) = scores
        .iter()
        .enumerate()
        .find(|&(y, s)| open(y) && !(temperature * s).is_finite())
    {
        return Err(Error::InvalidPolicy(format!("non-finite score {}", bad.1)));
    }
    let max = scores
        .iter()
        .enumerate()
        .filter(|&(y, _)| open(y))
        .map(|(_, &s)| temperature * s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::InvalidPolicy("every action is masked".into()));
    }
    if !max.is_finite() {
        return Err(Error::InvalidPolicy(format!("non-finite score {max}")));
    }
    let mut out: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(y, &s)| if open(y) { (temperature * s - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(out)
}

/// A policy given directly by its probability table `table[context][action]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub table: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(table: Vec<Vec<f64>>) -> Result<Self> {
        let n_actions = table.first().map_or(0, Vec::len);
        if n_actions == 0 {
            return Err(Error::InvalidPolicy("empty probability table".into()));
        }
        for (c, row) in table.iter().enumerate() {
            if row.len() != n_actions {
                return Err(Error::InvalidPolicy(format!("row {c} has wrong length")));
            }
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::InvalidPolicy(format!("negative probability at context {c}")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidPolicy(format!(
                    "probabilities at context {c} sum to {total}"
                )));
            }
        }
        Ok(Self { table })
    }

    /// Uniform policy over all actions.
    pub fn uniform(n_contexts: usize, n_actions: usize) -> Self {
        Self {
            table: vec![vec![1.0 / n_actions as f64; n_actions]; n_contexts],
        }
    }

    /// Deterministic policy choosing `actions[context]`.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let table = actions
            .iter()
            .map(|&a| {
                let mut row = vec![0.0; n_actions];
                *row.get_mut(a).ok_or_else(|| Error::contract(format!("action {a} out of range")))? =
                    1.0;
                Ok(row)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { table })
    }

    /// Snapshot of any policy on a finite context table.
    pub fn from_policy(policy: &dyn Policy, contexts: &[Vec<f64>]) -> Result<Self> {
        Ok(Self {
            table: prob_table(policy, contexts)?,
        })
    }
}

impl Policy for TabularPolicy {
    fn n_actions(&self) -> usize {
        self.table[0].len()
    }

    fn probs(&self, context: usize, _features: &[f64]) -> Result<Vec<f64>> {
        self.table.get(context).cloned().ok_or_else(|| {
            Error::contract(format!(
                "context {context} outside the table of {} contexts",
                self.table.len()
            ))
        })
    }
}

/// Drops every action whose probability is below `threshold` and renormalises
/// the survivors. The result keeps the weights and temperature and records the
/// dropped actions in its mask, so those actions have probability exactly 0.
pub fn clip_support(
    policy: &SoftmaxPolicy,
    contexts: &[Vec<f64>],
    threshold: f64,
) -> Result<SoftmaxPolicy> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::contract(format!("clip threshold {threshold} not in (0, 1)")));
    }
    let mut mask = Vec::with_capacity(contexts.len());
    for (c, x) in contexts.iter().enumerate() {
        let probs = policy.probs(c, x)?;
        let row: Vec<bool> = probs.iter().map(|&p| p >= threshold).collect();
        if !row.iter().any(|&open| open) {
            return Err(Error::InvalidPolicy(format!(
                "clipping at {threshold} removes every action at context {c}"
            )));
        }
        mask.push(row);
    }
    Ok(SoftmaxPolicy {
        mask: Some(mask),
        ..policy.clone()
    })
}

/// `pi_res(y|x) = pi(y|x) 1{y not in U} / (1 - sum_{y' in U} pi(y'|x))`.
pub fn action_restrict(target: &[f64], unsupported: &[usize]) -> Result<Vec<f64>> {
    let total: f64 = target.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("target probabilities sum to {total}")));
    }
    let mut out = target.to_vec();
    for &y in unsupported {
        *out
            .get_mut(y)
            .ok_or_else(|| Error::contract(format!("unsupported action {y} out of range")))? = 0.0;
    }
    // 1 - sum over U, accumulated over the complement for accuracy
    let kept: f64 = out.iter().sum();
    if !(kept > 0.0) {
        return Err(Error::DegenerateRestriction { context: None });
    }
    for p in &mut out {
        *p /= kept;
    }
    Ok(out)
}

/// A policy transformed by [`action_restrict`] against a stored logging
/// policy, evaluated lazily per context.
#[derive(Debug, Clone)]
pub struct RestrictedPolicy<P = SoftmaxPolicy> {
    pub base: P,
    pub logging: Arc<dyn Policy>,
}

impl<P: Policy> RestrictedPolicy<P> {
    pub fn new(base: P, logging: Arc<dyn Policy>) -> Self {
        Self { base, logging }
    }
}

impl RestrictedPolicy<SoftmaxPolicy> {
    /// Equivalent softmax whose mask is the logging support (intersected with
    /// the base mask). Restricting a softmax renormalises over the supported
    /// actions, which is a masked softmax.
    pub fn to_masked_softmax(&self, contexts: &[Vec<f64>]) -> Result<SoftmaxPolicy> {
        let mut mask = Vec::with_capacity(contexts.len());
        for (c, x) in contexts.iter().enumerate() {
            let logging = self.logging.probs(c, x)?;
            let own = self.base.mask_row(c)?;
            mask.push(
                logging
                    .iter()
                    .enumerate()
                    .map(|(y, &p)| p > 0.0 && own.is_none_or(|m| m[y]))
                    .collect(),
            );
        }
        SoftmaxPolicy {
            mask: None,
            ..self.base.clone()
        }
        .with_mask(mask)
    }
}

impl<P: Policy> Policy for RestrictedPolicy<P> {
    fn n_actions(&self) -> usize {
        self.base.n_actions()
    }

    fn probs(&self, context: usize, features: &[f64]) -> Result<Vec<f64>> {
        let target = self.base.probs(context, features)?;
        let logging = self.logging.probs(context, features)?;
        action_restrict(&target, &unsupported_actions(&logging)).map_err(|e| match e {
            Error::DegenerateRestriction { .. } => Error::DegenerateRestriction {
                context: Some(context),
            },
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_scores(mask: Option<Vec<Vec<bool>>>) -> SoftmaxPolicy {
        // one feature equal to 1, so the scores are the weights themselves
        SoftmaxPolicy {
            weights: vec![vec![2f64.ln()], vec![0.0]],
            temperature: 1.0,
            mask,
        }
    }

    #[test]
    fn zero_weights_give_uniform() {
        let p = SoftmaxPolicy::zeros(3, 4);
        let probs = p.probs(0, &[0.3, -1.0, 2.0, 0.0]).unwrap();
        for q in probs {
            assert!((q - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn log_two_scores_give_two_thirds() {
        let probs = two_scores(None).probs(0, &[1.0]).unwrap();
        assert!((probs[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((probs[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn masked_action_gets_exact_zero() {
        let probs = two_scores(Some(vec![vec![false, true]])).probs(0, &[1.0]).unwrap();
        assert_eq!(probs, vec![0.0, 1.0]);
    }

    #[test]
    fn dimension_mismatch_is_a_contract_error() {
        let err = SoftmaxPolicy::zeros(3, 2).probs(0, &[1.0]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn fully_masked_context_is_invalid() {
        let p = SoftmaxPolicy::zeros(2, 1);
        assert!(matches!(
            p.with_mask(vec![vec![false, false]]),
            Err(Error::InvalidPolicy(_))
        ));
    }

    #[test]
    fn huge_scores_do_not_overflow() {
        let p = SoftmaxPolicy::new(vec![vec![800.0], vec![799.0]], 1.0).unwrap();
        let probs = p.probs(0, &[1.0]).unwrap();
        assert!((probs[0] - 1.0 / (1.0 + (-1f64).exp())).abs() < 1e-12);
    }

    /// Softmax with the given probabilities at a single context.
    fn softmax_with_probs(probs: &[f64]) -> SoftmaxPolicy {
        SoftmaxPolicy::new(probs.iter().map(|p| vec![p.ln()]).collect(), 1.0).unwrap()
    }

    #[test]
    fn clip_zeroes_small_entries_and_renormalises() {
        let p = softmax_with_probs(&[0.005, 0.495, 0.5]);
        let clipped = clip_support(&p, &[vec![1.0]], 0.01).unwrap();
        let probs = clipped.probs(0, &[1.0]).unwrap();
        assert_eq!(probs[0], 0.0);
        assert!((probs[1] - 0.495 / 0.995).abs() < 1e-12);
        assert!((probs[2] - 0.5 / 0.995).abs() < 1e-12);
        assert!((probs[1] - 0.4975).abs() < 1e-4 && (probs[2] - 0.5025).abs() < 1e-4);
    }

    #[test]
    fn clip_keeps_balanced_policy() {
        let p = softmax_with_probs(&[0.5, 0.5]);
        let clipped = clip_support(&p, &[vec![1.0]], 0.01).unwrap();
        assert_eq!(clipped.mask, Some(vec![vec![true, true]]));
        let before = p.probs(0, &[1.0]).unwrap();
        assert_eq!(clipped.probs(0, &[1.0]).unwrap(), before);
    }

    #[test]
    fn clip_that_removes_everything_fails() {
        let p = SoftmaxPolicy::zeros(10, 1);
        assert!(matches!(
            clip_support(&p, &[vec![1.0]], 0.2),
            Err(Error::InvalidPolicy(_))
        ));
        assert!(matches!(clip_support(&p, &[vec![1.0]], 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn restriction_renormalises_over_the_supported_set() {
        let out = action_restrict(&[0.2, 0.3, 0.5], &[2]).unwrap();
        assert!((out[0] - 0.4).abs() < 1e-15 && (out[1] - 0.6).abs() < 1e-15);
        assert_eq!(out[2], 0.0);
        assert_eq!(action_restrict(&[0.2, 0.3, 0.5], &[]).unwrap(), vec![0.2, 0.3, 0.5]);
        assert!(matches!(
            action_restrict(&[0.0, 0.0, 1.0], &[2]),
            Err(Error::DegenerateRestriction { .. })
        ));
    }

    #[test]
    fn restricted_softmax_equals_its_masked_form() {
        let base = SoftmaxPolicy::new(vec![vec![0.3, -1.0], vec![1.2, 0.4], vec![-0.5, 2.0]], 1.5)
            .unwrap();
        let logging: Arc<dyn Policy> = Arc::new(
            TabularPolicy::new(vec![vec![0.5, 0.5, 0.0], vec![1.0, 0.0, 0.0]]).unwrap(),
        );
        let contexts = vec![vec![1.0, 0.5], vec![-0.2, 1.0]];
        let restricted = RestrictedPolicy::new(base, logging);
        let masked = restricted.to_masked_softmax(&contexts).unwrap();
        for (c, x) in contexts.iter().enumerate() {
            let a = restricted.probs(c, x).unwrap();
            let b = masked.probs(c, x).unwrap();
            for (p, q) in a.iter().zip(&b) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn json_shape_matches_the_wire_format() {
        let p = two_scores(Some(vec![vec![true, false]]));
        let v: serde_json::Value = serde_json::to_value(&p).unwrap();
        assert!(v["weights"].is_array());
        assert_eq!(v["temperature"], 1.0);
        assert_eq!(v["mask"][0][1], false);
        let unmasked = serde_json::to_value(two_scores(None)).unwrap();
        assert!(unmasked["mask"].is_null());
    }
}

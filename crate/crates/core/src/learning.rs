//! Off-policy ERM for linear softmax policies.
//!
//! Each objective is linear in the policy's probabilities at the contexts of
//! a batch, `V(w) = sum_x sum_y C[x][y] pi_w(y|x)`, with coefficients built
//! from the batch records. The gradient through the softmax is then
//! `dV/dw_a = tau * x * pi(a|x) * (C[x][a] - sum_y C[x][y] pi(y|x))`, which
//! also holds for a masked softmax because masked actions have `pi = 0`.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{LoggedDataset, LoggedRecord};
use crate::error::{Error, Result};
use crate::policy::{prob_table, Policy, RestrictedPolicy, SoftmaxPolicy, TabularPolicy};
use crate::support::{unsupported_actions, SupportSet};

pub use crate::reward_model::{mse, train_reward_model, RegressionConfig, RewardModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    NaiveIps,
    ActionRestricted,
    Augmented,
    Shifted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    /// Added to every logged reward by the shifted objective.
    pub shift_k: f64,
    /// Uniform draws from `U(x)` per record for the augmented objective.
    pub replay_count: usize,
    pub learn_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::NaiveIps,
            shift_k: 0.0,
            replay_count: 1,
            learn_rate: 0.5,
            epochs: 60,
            batch_size: 128,
            l2: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_objective(mut self, objective: ObjectiveKind) -> Self {
        self.objective = objective;
        self
    }

    pub fn shifted(mut self, k: f64) -> Self {
        self.objective = ObjectiveKind::Shifted;
        self.shift_k = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !self.shift_k.is_finite() {
            return Err(Error::contract("shift_k must be finite"));
        }
        if self.replay_count == 0 {
            return Err(Error::contract("replay_count must be at least 1"));
        }
        if !(self.learn_rate > 0.0 && self.learn_rate.is_finite()) {
            return Err(Error::contract("learn_rate must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::contract("epochs and batch_size must be positive"));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::contract("l2 must be nonnegative"));
        }
        Ok(())
    }
}

/// Logged data plus imputed records `(x, y', delta_hat(x, y'), 1/|U(x)|)`
/// with `y'` drawn uniformly from `U(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedDataset {
    pub base: LoggedDataset,
    pub synthetic: Vec<LoggedRecord>,
    /// Index of the logged record each synthetic record was drawn for.
    pub origin: Vec<usize>,
    pub replay_count: usize,
}

impl AugmentedDataset {
    /// Normaliser of the imputed term: `replay_count * n`. Records with an
    /// empty unsupported set count as zero-valued draws, which keeps the
    /// objective's expectation equal to the exact augmented estimate.
    pub fn synthetic_norm(&self) -> f64 {
        (self.replay_count * self.base.len()) as f64
    }
}

pub fn augment_dataset(
    dataset: &LoggedDataset,
    logging: &dyn Policy,
    model: &RewardModel,
    replay_count: usize,
    seed: u64,
) -> Result<AugmentedDataset> {
    if replay_count == 0 {
        return Err(Error::contract("replay_count must be at least 1"));
    }
    let unsupported: Vec<Vec<usize>> = prob_table(logging, &dataset.contexts)?
        .iter()
        .map(|row| unsupported_actions(row))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(augment_with_rng(dataset, &unsupported, model, replay_count, &mut rng))
}

pub(crate) fn augment_with_rng(
    dataset: &LoggedDataset,
    unsupported: &[Vec<usize>],
    model: &RewardModel,
    replay_count: usize,
    rng: &mut impl Rng,
) -> AugmentedDataset {
    let mut synthetic = Vec::new();
    let mut origin = Vec::new();
    for _ in 0..replay_count {
        for (i, rec) in dataset.records.iter().enumerate() {
            let u = &unsupported[rec.context];
            if u.is_empty() {
                continue;
            }
            let action = u[rng.random_range(0..u.len())];
            synthetic.push(LoggedRecord {
                context: rec.context,
                action,
                reward: model.predict(rec.context, &dataset.contexts[rec.context], action),
                propensity: 1.0 / u.len() as f64,
            });
            origin.push(i);
        }
    }
    AugmentedDataset {
        base: dataset.clone(),
        synthetic,
        origin,
        replay_count,
    }
}

/// Records entering one objective evaluation, with the normalisers of the
/// logged and imputed terms.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    pub contexts: &'a [Vec<f64>],
    pub logged: Vec<&'a LoggedRecord>,
    pub synthetic: Vec<&'a LoggedRecord>,
    pub logged_norm: f64,
    pub synthetic_norm: f64,
}

impl<'a> Batch<'a> {
    pub fn full(dataset: &'a LoggedDataset) -> Self {
        Self {
            contexts: &dataset.contexts,
            logged: dataset.records.iter().collect(),
            synthetic: Vec::new(),
            logged_norm: dataset.len() as f64,
            synthetic_norm: 1.0,
        }
    }

    pub fn full_augmented(data: &'a AugmentedDataset) -> Self {
        Self {
            synthetic: data.synthetic.iter().collect(),
            synthetic_norm: data.synthetic_norm(),
            ..Self::full(&data.base)
        }
    }
}

/// Inputs needed by some objectives only.
#[derive(Debug, Clone, Copy, Default)]
pub struct ObjectiveAux<'a> {
    pub shift_k: f64,
    /// `supported[context][action]` under the logging policy.
    pub support: Option<&'a [Vec<bool>]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval {
    /// Objective to maximise, including the `-l2/2 |w|^2` penalty.
    pub value: f64,
    /// `(1/n) sum_i pi(y_i|x_i) / p0_i` over the logged records of the batch.
    pub weight_sum: f64,
    /// `gradient[action][feature]`.
    pub gradient: Vec<Vec<f64>>,
}

pub fn objective_value_and_gradient(
    policy: &SoftmaxPolicy,
    batch: &Batch<'_>,
    objective: ObjectiveKind,
    aux: &ObjectiveAux<'_>,
    l2: f64,
) -> Result<ObjectiveEval> {
    if batch.logged.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let n_actions = policy.n_actions();
    let restricted = objective == ObjectiveKind::ActionRestricted;
    if restricted && aux.support.is_none() {
        return Err(Error::contract("action-restricted objective needs the logging support"));
    }
    let shift = if objective == ObjectiveKind::Shifted {
        aux.shift_k
    } else {
        0.0
    };

    let mut cells: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut probs_at = |c: usize| -> Result<()> {
        if let std::collections::btree_map::Entry::Vacant(slot) = cells.entry(c) {
            let x = batch
                .contexts
                .get(c)
                .ok_or_else(|| Error::contract(format!("context {c} not in the batch table")))?;
            let allowed = if restricted {
                Some(aux.support.and_then(|s| s.get(c)).map(Vec::as_slice).ok_or_else(|| {
                    Error::contract(format!("no support row for context {c}"))
                })?)
            } else {
                None
            };
            let p = policy.probs_restricted(c, x, allowed)?;
            slot.insert((p, vec![0.0; n_actions]));
        }
        Ok(())
    };
    for rec in &batch.logged {
        probs_at(rec.context)?;
    }
    if objective == ObjectiveKind::Augmented {
        for rec in &batch.synthetic {
            probs_at(rec.context)?;
        }
    }

    let mut weight_sum = 0.0;
    for rec in &batch.logged {
        if rec.action >= n_actions {
            return Err(Error::contract(format!("action {} out of range", rec.action)));
        }
        let (p, coef) = cells.get_mut(&rec.context).expect("cached above");
        weight_sum += p[rec.action] / rec.propensity;
        coef[rec.action] += (rec.reward + shift) / (rec.propensity * batch.logged_norm);
    }
    weight_sum /= batch.logged_norm;
    if objective == ObjectiveKind::Augmented {
        for rec in &batch.synthetic {
            let (_, coef) = cells.get_mut(&rec.context).expect("cached above");
            coef[rec.action] += rec.reward / (rec.propensity * batch.synthetic_norm);
        }
    }

    let dim = policy.dim();
    let mut value = 0.0;
    let mut gradient = vec![vec![0.0; dim]; n_actions];
    for (&c, (p, coef)) in &cells {
        let mean: f64 = p.iter().zip(coef).map(|(p, c)| p * c).sum();
        value += mean;
        let x = &batch.contexts[c];
        for (a, g) in gradient.iter_mut().enumerate() {
            let s = policy.temperature * p[a] * (coef[a] - mean);
            if s != 0.0 {
                for (gj, xj) in g.iter_mut().zip(x) {
                    *gj += s * xj;
                }
            }
        }
    }
    if l2 > 0.0 {
        for (g, w) in gradient.iter_mut().zip(&policy.weights) {
            for (gj, wj) in g.iter_mut().zip(w) {
                value -= 0.5 * l2 * wj * wj;
                *gj -= l2 * wj;
            }
        }
    }
    Ok(ObjectiveEval {
        value,
        weight_sum,
        gradient,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub objective: f64,
    pub weight_sum: f64,
}

/// Either a plain softmax or its action restriction against the logging
/// policy, evaluated lazily.
#[derive(Debug, Clone)]
pub enum LearnedPolicy {
    Softmax(SoftmaxPolicy),
    Restricted(RestrictedPolicy<SoftmaxPolicy>),
}

impl LearnedPolicy {
    pub fn weights(&self) -> &SoftmaxPolicy {
        match self {
            LearnedPolicy::Softmax(p) => p,
            LearnedPolicy::Restricted(r) => &r.base,
        }
    }

    /// A standalone softmax with identical probabilities on `contexts`.
    pub fn to_softmax(&self, contexts: &[Vec<f64>]) -> Result<SoftmaxPolicy> {
        match self {
            LearnedPolicy::Softmax(p) => Ok(p.clone()),
            LearnedPolicy::Restricted(r) => r.to_masked_softmax(contexts),
        }
    }
}

impl Policy for LearnedPolicy {
    fn n_actions(&self) -> usize {
        self.weights().n_actions()
    }

    fn probs(&self, context: usize, features: &[f64]) -> Result<Vec<f64>> {
        match self {
            LearnedPolicy::Softmax(p) => p.probs(context, features),
            LearnedPolicy::Restricted(r) => r.probs(context, features),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedPolicy {
    pub policy: LearnedPolicy,
    pub trace: Vec<TraceRow>,
}

/// Training data and the objective-specific extras.
#[derive(Debug, Clone)]
pub struct TrainInputs<'a> {
    pub data: &'a LoggedDataset,
    pub n_actions: usize,
    /// Required by the action-restricted and augmented objectives.
    pub logging: Option<Arc<dyn Policy>>,
    /// Required by the augmented objective.
    pub reward_model: Option<&'a RewardModel>,
}

/// Mini-batch gradient ascent from zero weights with a constant step.
/// Batches of logged records carry all imputed draws made for them, so the
/// two terms keep their own normalisation.
pub fn train_erm(inputs: &TrainInputs<'_>, config: &TrainConfig) -> Result<TrainedPolicy> {
    config.validate()?;
    let data = inputs.data;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.validate()?;
    if data.contexts.is_empty() {
        return Err(Error::contract("dataset has no contexts"));
    }
    let dim = data.contexts[0].len();
    let need_logging = || {
        inputs
            .logging
            .clone()
            .ok_or_else(|| Error::contract("objective needs the logging policy"))
    };
    let support = match config.objective {
        ObjectiveKind::ActionRestricted => {
            let logging = need_logging()?;
            Some(SupportSet::from_contexts(logging.as_ref(), &data.contexts)?.supported_mask())
        }
        _ => None,
    };
    let augmented = match config.objective {
        ObjectiveKind::Augmented => {
            let logging = need_logging()?;
            let model = inputs
                .reward_model
                .ok_or_else(|| Error::contract("augmented objective needs a reward model"))?;
            Some(augment_dataset(
                data,
                logging.as_ref(),
                model,
                config.replay_count,
                config.seed,
            )?)
        }
        _ => None,
    };
    let mut by_origin: Vec<Vec<usize>> = vec![Vec::new(); data.len()];
    if let Some(aug) = &augmented {
        for (j, &i) in aug.origin.iter().enumerate() {
            by_origin[i].push(j);
        }
    }
    let aux = ObjectiveAux {
        shift_k: config.shift_k,
        support: support.as_deref(),
    };
    let full = match &augmented {
        Some(aug) => Batch::full_augmented(aug),
        None => Batch::full(data),
    };

    let mut policy = SoftmaxPolicy::zeros(inputs.n_actions, dim);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut batch = Batch {
                contexts: &data.contexts,
                logged: chunk.iter().map(|&i| &data.records[i]).collect(),
                synthetic: Vec::new(),
                logged_norm: chunk.len() as f64,
                synthetic_norm: 1.0,
            };
            if let Some(aug) = &augmented {
                batch.synthetic = chunk
                    .iter()
                    .flat_map(|&i| by_origin[i].iter().map(|&j| &aug.synthetic[j]))
                    .collect();
                batch.synthetic_norm = (aug.replay_count * chunk.len()) as f64;
            }
            let eval = objective_value_and_gradient(&policy, &batch, config.objective, &aux, config.l2)
                .map_err(|e| match e {
                    Error::InvalidPolicy(reason) => Error::TrainingFailure { step, reason },
                    other => other,
                })?;
            if !eval.value.is_finite() || eval.gradient.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::TrainingFailure {
                    step,
                    reason: "objective or gradient is not finite".into(),
                });
            }
            for (w, g) in policy.weights.iter_mut().zip(&eval.gradient) {
                for (wj, gj) in w.iter_mut().zip(g) {
                    *wj += config.learn_rate * gj;
                }
            }
            step += 1;
        }
        let eval = objective_value_and_gradient(&policy, &full, config.objective, &aux, config.l2)
            .map_err(|e| match e {
                Error::InvalidPolicy(reason) => Error::TrainingFailure { step, reason },
                other => other,
            })?;
        trace.push(TraceRow {
            epoch,
            objective: eval.value,
            weight_sum: eval.weight_sum,
        });
    }

    let policy = match config.objective {
        ObjectiveKind::ActionRestricted => {
            LearnedPolicy::Restricted(RestrictedPolicy::new(policy, need_logging()?))
        }
        _ => LearnedPolicy::Softmax(policy),
    };
    Ok(TrainedPolicy { policy, trace })
}

/// The direct-method policy: the action with the highest predicted reward
/// per context, ties to the lowest index.
pub fn greedy_policy(model: &RewardModel, contexts: &[Vec<f64>], n_actions: usize) -> Result<TabularPolicy> {
    let actions: Vec<usize> = contexts
        .iter()
        .enumerate()
        .map(|(c, x)| {
            let mut best = 0;
            let mut best_value = f64::NEG_INFINITY;
            for y in 0..n_actions {
                let v = model.predict(c, x, y);
                if v > best_value {
                    best = y;
                    best_value = v;
                }
            }
            best
        })
        .collect();
    TabularPolicy::deterministic(&actions, n_actions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::log_interactions;
    use crate::fixture;
    use crate::oracle::{exact_policy_value, exact_support_divergence};
    use crate::policy::TabularPolicy;

    fn one_hot_data(n: usize, seed: u64) -> (crate::problem::SyntheticProblem, TabularPolicy, LoggedDataset) {
        let f = fixture::reference();
        let data = log_interactions(&f.problem, &f.logging, n, seed).unwrap();
        (f.problem, f.logging, data)
    }

    fn random_policy(rng: &mut ChaCha8Rng, n_actions: usize, dim: usize) -> SoftmaxPolicy {
        SoftmaxPolicy::new(
            (0..n_actions)
                .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
            1.3,
        )
        .unwrap()
    }

    fn finite_difference_check(objective: ObjectiveKind) {
        let (problem, logging, data) = one_hot_data(50, 3);
        let support = SupportSet::from_contexts(&logging, &problem.contexts)
            .unwrap()
            .supported_mask();
        let model = RewardModel::Constant { value: 0.3 };
        let aug = augment_dataset(&data, &logging, &model, 2, 5).unwrap();
        let batch = Batch::full_augmented(&aug);
        let aux = ObjectiveAux {
            shift_k: -0.7,
            support: Some(&support),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let policy = random_policy(&mut rng, 3, 2);
        let eval = objective_value_and_gradient(&policy, &batch, objective, &aux, 0.01).unwrap();
        let h = 1e-5;
        for a in 0..3 {
            for j in 0..2 {
                let mut plus = policy.clone();
                plus.weights[a][j] += h;
                let mut minus = policy.clone();
                minus.weights[a][j] -= h;
                let fp = objective_value_and_gradient(&plus, &batch, objective, &aux, 0.01).unwrap().value;
                let fm = objective_value_and_gradient(&minus, &batch, objective, &aux, 0.01).unwrap().value;
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = eval.gradient[a][j];
                let rel = (numeric - analytic).abs() / analytic.abs().max(1e-8);
                assert!(rel < 1e-4 || (numeric - analytic).abs() < 1e-9, "{objective:?} {a} {j}: {numeric} vs {analytic}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for objective in [
            ObjectiveKind::NaiveIps,
            ObjectiveKind::ActionRestricted,
            ObjectiveKind::Augmented,
            ObjectiveKind::Shifted,
        ] {
            finite_difference_check(objective);
        }
    }

    #[test]
    fn augmentation_shape() {
        let (problem, logging, data) = one_hot_data(40, 1);
        let model = RewardModel::exact(&problem);
        let aug = augment_dataset(&data, &logging, &model, 3, 2).unwrap();
        let with_u = data.records.iter().filter(|r| r.context == 0 || r.context == 1).count();
        assert_eq!(aug.synthetic.len(), 3 * with_u);
        for rec in &aug.synthetic {
            match rec.context {
                0 => assert_eq!((rec.action, rec.propensity), (2, 1.0)),
                _ => {
                    assert!(rec.action == 1 || rec.action == 2);
                    assert_eq!(rec.propensity, 0.5);
                }
            }
        }
        let full = TabularPolicy::uniform(2, 3);
        assert!(augment_dataset(&data, &full, &model, 2, 0).unwrap().synthetic.is_empty());
    }

    #[test]
    fn zero_shift_equals_naive_and_shift_adds_weight_mass() {
        let (_, _, data) = one_hot_data(30, 4);
        let batch = Batch::full(&data);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let policy = random_policy(&mut rng, 3, 2);
        let naive = objective_value_and_gradient(&policy, &batch, ObjectiveKind::NaiveIps, &ObjectiveAux::default(), 0.0).unwrap();
        let zero = objective_value_and_gradient(&policy, &batch, ObjectiveKind::Shifted, &ObjectiveAux::default(), 0.0).unwrap();
        assert_eq!(naive, zero);
        let k = -0.37;
        let aux = ObjectiveAux { shift_k: k, support: None };
        let shifted = objective_value_and_gradient(&policy, &batch, ObjectiveKind::Shifted, &aux, 0.0).unwrap();
        assert!((shifted.value - naive.value - k * naive.weight_sum).abs() < 1e-12);
    }

    #[test]
    fn naive_ips_under_full_support_approaches_the_optimum() {
        let f = fixture::reference();
        let full_logging = TabularPolicy::new(vec![vec![0.4, 0.3, 0.3], vec![0.3, 0.4, 0.3]]).unwrap();
        let data = log_interactions(&f.problem, &full_logging, 4000, 7).unwrap();
        let config = TrainConfig {
            epochs: 200,
            learn_rate: 1.0,
            ..TrainConfig::default()
        };
        let trained = train_erm(
            &TrainInputs {
                data: &data,
                n_actions: 3,
                logging: None,
                reward_model: None,
            },
            &config,
        )
        .unwrap();
        let value = exact_policy_value(&f.problem, &trained.policy).unwrap();
        assert!(value > 0.9 - 0.05, "{value}");
        assert_eq!(trained.trace.len(), 200);
    }

    #[test]
    fn restricted_training_has_zero_divergence_and_is_deterministic() {
        let (problem, logging, data) = one_hot_data(500, 2);
        let logging: Arc<dyn Policy> = Arc::new(logging);
        let inputs = TrainInputs {
            data: &data,
            n_actions: 3,
            logging: Some(logging.clone()),
            reward_model: None,
        };
        let config = TrainConfig::default().with_objective(ObjectiveKind::ActionRestricted);
        let a = train_erm(&inputs, &config).unwrap();
        let b = train_erm(&inputs, &config).unwrap();
        assert_eq!(a.policy.weights(), b.policy.weights());
        assert_eq!(exact_support_divergence(&problem, logging.as_ref(), &a.policy).unwrap(), 0.0);
    }

    #[test]
    fn missing_inputs_are_contract_errors() {
        let (_, _, data) = one_hot_data(20, 2);
        let inputs = TrainInputs {
            data: &data,
            n_actions: 3,
            logging: None,
            reward_model: None,
        };
        for objective in [ObjectiveKind::ActionRestricted, ObjectiveKind::Augmented] {
            let config = TrainConfig::default().with_objective(objective);
            assert!(matches!(train_erm(&inputs, &config), Err(Error::Contract(_))));
        }
    }

    #[test]
    fn huge_step_fails_with_a_step_number() {
        let (_, _, data) = one_hot_data(100, 2);
        let data = data.translate_rewards(1e300);
        let inputs = TrainInputs {
            data: &data,
            n_actions: 3,
            logging: None,
            reward_model: None,
        };
        let config = TrainConfig {
            learn_rate: 1e300,
            ..TrainConfig::default()
        };
        let out = train_erm(&inputs, &config);
        assert!(matches!(out, Err(Error::TrainingFailure { .. })), "{:?}", out.map(|t| t.policy));
    }

    #[test]
    fn greedy_policy_picks_the_best_prediction() {
        let f = fixture::reference();
        let g = greedy_policy(&RewardModel::exact(&f.problem), &f.problem.contexts, 3).unwrap();
        assert_eq!(g.table, vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
    }
}

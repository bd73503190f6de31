//! Synthetic problems, logging policies and interaction logs.
//!
//! Two schemes are provided. `multiclass` is the usual supervised-to-bandit
//! conversion: each context has one correct label and the reward is
//! `1{y = y*}`. `feature_split` draws a raw vector per context, keeps the
//! first `context_dim` entries as features and min-max normalises the next
//! `n_actions` entries into a `[0, 1]` reward table.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{LoggedDataset, LoggedRecord};
use crate::error::{Error, Result};
use crate::policy::{clip_support, prob_table, Policy, SoftmaxPolicy, TabularPolicy};
use crate::problem::{RewardBounds, RewardNoise, SyntheticProblem};
use crate::support::SupportSet;

pub const DEFAULT_CLIP_THRESHOLD: f64 = 0.01;
pub const DEFAULT_LOGGER_STEPS: usize = 10;
pub const DEFAULT_LOGGER_LEARN_RATE: f64 = 0.5;

/// Independent random streams derived from one seed.
pub mod stream {
    pub const PROBLEM: u64 = 0;
    pub const LOGGER: u64 = 1;
    pub const TRAIN_LOG: u64 = 2;
    pub const VALIDATION_LOG: u64 = 3;
    pub const TEST_LOG: u64 = 4;
}

pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Multiclass,
    FeatureSplit,
}

fn default_clip() -> f64 {
    DEFAULT_CLIP_THRESHOLD
}
fn default_logger_steps() -> usize {
    DEFAULT_LOGGER_STEPS
}
fn default_logger_lr() -> f64 {
    DEFAULT_LOGGER_LEARN_RATE
}
fn default_n_train() -> usize {
    2000
}
fn default_n_val() -> usize {
    1000
}
fn default_feature_noise() -> f64 {
    0.5
}
fn default_noise() -> RewardNoise {
    RewardNoise::Deterministic
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub scheme: Scheme,
    pub n_contexts: usize,
    pub context_dim: usize,
    pub n_actions: usize,
    pub seed: u64,
    pub temperature: f64,
    #[serde(default = "default_clip")]
    pub clip_threshold: f64,
    #[serde(default = "default_logger_steps")]
    pub logger_steps: usize,
    #[serde(default = "default_logger_lr")]
    pub logger_learn_rate: f64,
    /// Standard deviation of the multiclass feature noise around each label
    /// centroid; larger values make labels harder to predict.
    #[serde(default = "default_feature_noise")]
    pub feature_noise: f64,
    /// Added to every reward after generation.
    #[serde(default)]
    pub reward_offset: f64,
    /// Only used by `feature_split`; multiclass rewards are deterministic.
    #[serde(default = "default_noise")]
    pub reward_noise: RewardNoise,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_val")]
    pub n_val: usize,
}

impl GenConfig {
    pub fn multiclass(n_contexts: usize, context_dim: usize, n_actions: usize, seed: u64) -> Self {
        Self {
            scheme: Scheme::Multiclass,
            n_contexts,
            context_dim,
            n_actions,
            seed,
            temperature: 1.0,
            clip_threshold: DEFAULT_CLIP_THRESHOLD,
            logger_steps: DEFAULT_LOGGER_STEPS,
            logger_learn_rate: DEFAULT_LOGGER_LEARN_RATE,
            feature_noise: default_feature_noise(),
            reward_offset: 0.0,
            reward_noise: RewardNoise::Deterministic,
            n_train: default_n_train(),
            n_val: default_n_val(),
        }
    }

    pub fn feature_split(n_contexts: usize, context_dim: usize, n_actions: usize, seed: u64) -> Self {
        Self {
            scheme: Scheme::FeatureSplit,
            ..Self::multiclass(n_contexts, context_dim, n_actions, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_contexts == 0 || self.context_dim == 0 {
            return Err(Error::contract("need at least one context and one feature"));
        }
        if self.n_actions < 2 {
            return Err(Error::contract("need at least two actions"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::contract(format!("temperature {} must be positive", self.temperature)));
        }
        if !(self.feature_noise >= 0.0) {
            return Err(Error::contract("feature noise must be nonnegative"));
        }
        if !(self.clip_threshold > 0.0 && self.clip_threshold < 1.0) {
            return Err(Error::contract(format!("clip threshold {} not in (0, 1)", self.clip_threshold)));
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut impl Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.sample(StandardNormal)).collect()
}

/// One correct label per context, `delta(x, y) = 1{y = y*(x)}`. Features are
/// a per-label centroid plus noise, so labels are predictable from features.
pub fn make_multiclass_problem(config: &GenConfig) -> Result<SyntheticProblem> {
    if config.scheme != Scheme::Multiclass {
        return Err(Error::contract("config scheme is not multiclass"));
    }
    config.validate()?;
    let mut rng = rng_for(config.seed, stream::PROBLEM);
    let centroids: Vec<Vec<f64>> = (0..config.n_actions)
        .map(|_| normal_vec(&mut rng, config.context_dim))
        .collect();
    let mut contexts = Vec::with_capacity(config.n_contexts);
    let mut mean_reward = Vec::with_capacity(config.n_contexts);
    for _ in 0..config.n_contexts {
        let label = rng.random_range(0..config.n_actions);
        let noise = normal_vec(&mut rng, config.context_dim);
        contexts.push(
            centroids[label]
                .iter()
                .zip(&noise)
                .map(|(m, e)| m + config.feature_noise * e)
                .collect(),
        );
        let mut row = vec![0.0; config.n_actions];
        row[label] = 1.0;
        mean_reward.push(row);
    }
    SyntheticProblem::uniform(contexts, mean_reward, RewardBounds::new(0.0, 1.0)?)
}

/// Features and per-action rewards split from one raw normal vector, rewards
/// min-max normalised over the whole table.
pub fn make_feature_split_problem(config: &GenConfig) -> Result<SyntheticProblem> {
    if config.scheme != Scheme::FeatureSplit {
        return Err(Error::contract("config scheme is not feature_split"));
    }
    config.validate()?;
    let mut rng = rng_for(config.seed, stream::PROBLEM);
    let mut contexts = Vec::with_capacity(config.n_contexts);
    let mut raw_rewards = Vec::with_capacity(config.n_contexts);
    for _ in 0..config.n_contexts {
        let raw = normal_vec(&mut rng, config.context_dim + config.n_actions);
        contexts.push(raw[..config.context_dim].to_vec());
        raw_rewards.push(raw[config.context_dim..].to_vec());
    }
    let lo = raw_rewards.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = raw_rewards.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = hi - lo;
    let mean_reward = raw_rewards
        .into_iter()
        .map(|row| {
            row.into_iter()
                .map(|r| if width > 0.0 { (r - lo) / width } else { 0.0 })
                .collect()
        })
        .collect();
    let n = config.n_contexts;
    SyntheticProblem::new(
        contexts,
        vec![1.0 / n as f64; n],
        mean_reward,
        RewardBounds::new(0.0, 1.0)?,
        config.reward_noise,
    )
}

/// Builds the problem for `config`'s scheme and applies its reward offset.
pub fn make_problem(config: &GenConfig) -> Result<SyntheticProblem> {
    let problem = match config.scheme {
        Scheme::Multiclass => make_multiclass_problem(config)?,
        Scheme::FeatureSplit => make_feature_split_problem(config)?,
    };
    Ok(if config.reward_offset != 0.0 {
        problem.translate_rewards(config.reward_offset)
    } else {
        problem
    })
}

/// Highest-reward action per context, ties to the lowest index.
pub fn best_actions(problem: &SyntheticProblem) -> Vec<usize> {
    problem
        .mean_reward
        .iter()
        .map(|row| {
            let mut best = 0;
            for (y, &d) in row.iter().enumerate() {
                if d > row[best] {
                    best = y;
                }
            }
            best
        })
        .collect()
}

/// Softmax classifier toward the best action of each context, trained with
/// a deliberately small number of full-batch cross-entropy steps so it stays
/// stochastic. Temperature 1, no mask.
pub fn fit_logger(
    problem: &SyntheticProblem,
    steps: usize,
    learn_rate: f64,
    seed: u64,
) -> Result<SoftmaxPolicy> {
    let mut rng = rng_for(seed, stream::LOGGER);
    let dim = problem.context_dim();
    let labels = best_actions(problem);
    let mut policy = SoftmaxPolicy::new(
        (0..problem.n_actions)
            .map(|_| normal_vec(&mut rng, dim).into_iter().map(|v| 0.01 * v).collect())
            .collect(),
        1.0,
    )?;
    for step in 0..steps {
        let mut grad = vec![vec![0.0; dim]; problem.n_actions];
        for (c, x) in problem.contexts.iter().enumerate() {
            let probs = policy.probs(c, x)?;
            let px = problem.context_weights[c];
            for (a, g) in grad.iter_mut().enumerate() {
                let coef = px * (probs[a] - if a == labels[c] { 1.0 } else { 0.0 });
                for (gj, xj) in g.iter_mut().zip(x) {
                    *gj += coef * xj;
                }
            }
        }
        for (w, g) in policy.weights.iter_mut().zip(&grad) {
            for (wj, gj) in w.iter_mut().zip(g) {
                *wj -= learn_rate * gj;
            }
        }
        if policy.weights.iter().flatten().any(|w| !w.is_finite()) {
            return Err(Error::TrainingFailure {
                step,
                reason: "logger weights diverged".into(),
            });
        }
    }
    Ok(policy)
}

/// Applies temperature to a fitted logger and clips its propensities.
pub fn deficient_logging(
    base: &SoftmaxPolicy,
    contexts: &[Vec<f64>],
    temperature: f64,
    clip_threshold: f64,
) -> Result<SoftmaxPolicy> {
    let tempered = SoftmaxPolicy {
        mask: None,
        ..base.clone()
    }
    .with_temperature(temperature)?;
    clip_support(&tempered, contexts, clip_threshold)
}

/// Fits a logger with the default step budget, then applies temperature and
/// clipping. Larger temperatures leave more actions unsupported.
pub fn make_logging_policy(
    problem: &SyntheticProblem,
    temperature: f64,
    clip_threshold: f64,
    seed: u64,
) -> Result<SoftmaxPolicy> {
    if !(temperature > 0.0) {
        return Err(Error::contract(format!("temperature {temperature} must be positive")));
    }
    let base = fit_logger(problem, DEFAULT_LOGGER_STEPS, DEFAULT_LOGGER_LEARN_RATE, seed)?;
    deficient_logging(&base, &problem.contexts, temperature, clip_threshold)
}

/// Unweighted fraction of `(context, action)` pairs with zero propensity.
pub fn unsupported_fraction(logging: &dyn Policy, contexts: &[Vec<f64>]) -> Result<f64> {
    Ok(SupportSet::from_contexts(logging, contexts)?.unsupported_fraction())
}

/// Smallest temperature (to bisection precision) at which clipping leaves at
/// least `target` of the `(context, action)` pairs unsupported. The
/// unsupported fraction is nondecreasing in the temperature whenever
/// `n_actions <= 1 / clip_threshold`, which makes bisection valid.
pub fn calibrate_temperature(
    base: &SoftmaxPolicy,
    contexts: &[Vec<f64>],
    clip_threshold: f64,
    target: f64,
) -> Result<f64> {
    let frac = |t: f64| -> Result<f64> {
        unsupported_fraction(&deficient_logging(base, contexts, t, clip_threshold)?, contexts)
    };
    let mut hi = 1.0;
    while frac(hi)? < target {
        hi *= 2.0;
        if hi > 1e8 {
            return Err(Error::contract(format!(
                "no temperature reaches unsupported fraction {target}"
            )));
        }
    }
    let mut lo = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mid <= 0.0 {
            break;
        }
        if frac(mid)? >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

/// Draws `n` interactions: `x ~ P(X)`, `y ~ pi_0(.|x)`, `r` from the reward
/// law; the recorded propensity is exactly `pi_0(y|x)`.
pub fn log_interactions(
    problem: &SyntheticProblem,
    logging: &dyn Policy,
    n: usize,
    seed: u64,
) -> Result<LoggedDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    log_with_rng(problem, logging, n, &mut rng)
}

pub fn log_with_rng(
    problem: &SyntheticProblem,
    logging: &dyn Policy,
    n: usize,
    rng: &mut impl Rng,
) -> Result<LoggedDataset> {
    if logging.n_actions() != problem.n_actions {
        return Err(Error::contract("logging policy and problem disagree on action count"));
    }
    let table = prob_table(logging, &problem.contexts)?;
    let context_dist = WeightedIndex::new(&problem.context_weights)
        .map_err(|e| Error::contract(format!("context weights: {e}")))?;
    let action_dists = table
        .iter()
        .map(|row| WeightedIndex::new(row).map_err(|e| Error::InvalidPolicy(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::with_capacity(n);
    for _ in 0..n {
        let context = context_dist.sample(rng);
        let action = action_dists[context].sample(rng);
        let reward = problem.sample_reward(context, action, rng);
        records.push(LoggedRecord {
            context,
            action,
            reward,
            propensity: table[context][action],
        });
    }
    Ok(LoggedDataset {
        contexts: problem.contexts.clone(),
        records,
    })
}

/// A small tabular instance with random rewards, a support-deficient
/// logging policy and an arbitrary target. Used for fuzzing identities.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub problem: SyntheticProblem,
    pub logging: TabularPolicy,
    pub target: TabularPolicy,
}

fn random_simplex(rng: &mut impl Rng, n: usize, keep: &[bool]) -> Vec<f64> {
    let raw: Vec<f64> = (0..n)
        .map(|y| if keep[y] { rng.random::<f64>() + 1e-3 } else { 0.0 })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Every context keeps at least one supported action; each other action is
/// dropped from the logging support with probability one half. The target
/// has zeros with probability one quarter per action (never all of them).
pub fn random_instance(
    rng: &mut impl Rng,
    n_contexts: usize,
    n_actions: usize,
    bounds: RewardBounds,
) -> Result<RandomInstance> {
    if n_contexts == 0 || n_actions == 0 {
        return Err(Error::contract("need at least one context and one action"));
    }
    let weights = random_simplex(rng, n_contexts, &vec![true; n_contexts]);
    let mean_reward = (0..n_contexts)
        .map(|_| {
            (0..n_actions)
                .map(|_| (bounds.min + rng.random::<f64>() * bounds.width()).clamp(bounds.min, bounds.max))
                .collect()
        })
        .collect();
    let contexts = (0..n_contexts)
        .map(|c| (0..n_contexts).map(|j| if j == c { 1.0 } else { 0.0 }).collect())
        .collect();
    let problem = SyntheticProblem::new(contexts, weights, mean_reward, bounds, RewardNoise::Deterministic)?;
    let mut logging = Vec::with_capacity(n_contexts);
    let mut target = Vec::with_capacity(n_contexts);
    for _ in 0..n_contexts {
        let anchor = rng.random_range(0..n_actions);
        let keep: Vec<bool> = (0..n_actions).map(|y| y == anchor || rng.random_bool(0.5)).collect();
        logging.push(random_simplex(rng, n_actions, &keep));
        let anchor = rng.random_range(0..n_actions);
        let keep: Vec<bool> = (0..n_actions).map(|y| y == anchor || rng.random_bool(0.75)).collect();
        target.push(random_simplex(rng, n_actions, &keep));
    }
    Ok(RandomInstance {
        problem,
        logging: TabularPolicy::new(logging)?,
        target: TabularPolicy::new(target)?,
    })
}

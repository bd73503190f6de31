//! Full-information ground truth for a finite contextual-bandit problem.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBounds {
    pub min: f64,
    pub max: f64,
}

impl RewardBounds {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite() && min <= max) {
            return Err(Error::contract(format!("invalid reward bounds [{min}, {max}]")));
        }
        Ok(Self { min, max })
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }

    pub fn contains(&self, r: f64) -> bool {
        r >= self.min && r <= self.max
    }
}

/// How an observed reward is drawn around its mean `delta(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardNoise {
    /// The reward equals its mean.
    Deterministic,
    /// Two-point law on the reward bounds with mean `delta(x, y)`; for bounds
    /// `[0, 1]` this is Bernoulli(`delta`).
    Bernoulli,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProblem {
    pub contexts: Vec<Vec<f64>>,
    pub context_weights: Vec<f64>,
    pub n_actions: usize,
    /// `mean_reward[context][action]`.
    pub mean_reward: Vec<Vec<f64>>,
    pub reward_bounds: RewardBounds,
    pub reward_noise: RewardNoise,
}

impl SyntheticProblem {
    pub fn new(
        contexts: Vec<Vec<f64>>,
        context_weights: Vec<f64>,
        mean_reward: Vec<Vec<f64>>,
        reward_bounds: RewardBounds,
        reward_noise: RewardNoise,
    ) -> Result<Self> {
        let n_actions = mean_reward.first().map_or(0, Vec::len);
        let problem = Self {
            contexts,
            context_weights,
            n_actions,
            mean_reward,
            reward_bounds,
            reward_noise,
        };
        problem.validate()?;
        Ok(problem)
    }

    /// Uniform context weights.
    pub fn uniform(
        contexts: Vec<Vec<f64>>,
        mean_reward: Vec<Vec<f64>>,
        reward_bounds: RewardBounds,
    ) -> Result<Self> {
        let n = contexts.len();
        let weights = vec![1.0 / n as f64; n];
        Self::new(contexts, weights, mean_reward, reward_bounds, RewardNoise::Deterministic)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.contexts.len();
        if n == 0 || self.n_actions == 0 {
            return Err(Error::contract("problem needs at least one context and one action"));
        }
        if self.context_weights.len() != n || self.mean_reward.len() != n {
            return Err(Error::contract("contexts, weights and reward table differ in length"));
        }
        let dim = self.contexts[0].len();
        if self.contexts.iter().any(|x| x.len() != dim) {
            return Err(Error::contract("context feature vectors differ in dimension"));
        }
        if self.context_weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::contract("context weights must be nonnegative"));
        }
        let total: f64 = self.context_weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!("context weights sum to {total}, not 1")));
        }
        for (c, row) in self.mean_reward.iter().enumerate() {
            if row.len() != self.n_actions {
                return Err(Error::contract(format!("reward row {c} has wrong length")));
            }
            if let Some(&bad) = row.iter().find(|&&d| !self.reward_bounds.contains(d)) {
                return Err(Error::contract(format!(
                    "mean reward {bad} at context {c} outside [{}, {}]",
                    self.reward_bounds.min, self.reward_bounds.max
                )));
            }
        }
        Ok(())
    }

    pub fn n_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn context_dim(&self) -> usize {
        self.contexts[0].len()
    }

    pub fn delta(&self, context: usize, action: usize) -> f64 {
        self.mean_reward[context][action]
    }

    /// Draws an observed reward for `(context, action)`.
    pub fn sample_reward<R: Rng + ?Sized>(&self, context: usize, action: usize, rng: &mut R) -> f64 {
        let d = self.delta(context, action);
        match self.reward_noise {
            RewardNoise::Deterministic => d,
            RewardNoise::Bernoulli => {
                let RewardBounds { min, max } = self.reward_bounds;
                if max == min {
                    return d;
                }
                let p = (d - min) / (max - min);
                if rng.random::<f64>() < p {
                    max
                } else {
                    min
                }
            }
        }
    }

    /// Adds `offset` to every mean reward and both bounds.
    pub fn translate_rewards(&self, offset: f64) -> Self {
        let mut out = self.clone();
        for row in &mut out.mean_reward {
            for d in row.iter_mut() {
                *d += offset;
            }
        }
        out.reward_bounds = RewardBounds {
            min: self.reward_bounds.min + offset,
            max: self.reward_bounds.max + offset,
        };
        out
    }

    /// The same problem with a different mean-reward table.
    pub fn with_mean_reward(&self, mean_reward: Vec<Vec<f64>>) -> Result<Self> {
        let out = Self {
            mean_reward,
            ..self.clone()
        };
        out.validate()?;
        Ok(out)
    }
}

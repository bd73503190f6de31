//! Reward regression `delta_hat(x, y)` used by the direct method, by reward
//! extrapolation and by DR.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::LoggedDataset;
use crate::error::{Error, Result};
use crate::problem::{RewardBounds, SyntheticProblem};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardModel {
    Constant { value: f64 },
    /// `values[context][action]`, indexed by context position.
    Table { values: Vec<Vec<f64>> },
    Regression(RegressionModel),
}

impl RewardModel {
    pub fn predict(&self, context: usize, features: &[f64], action: usize) -> f64 {
        match self {
            RewardModel::Constant { value } => *value,
            RewardModel::Table { values } => values[context][action],
            RewardModel::Regression(m) => m.predict(features, action),
        }
    }

    /// Imputes the lowest possible reward everywhere.
    pub fn conservative(bounds: RewardBounds) -> Self {
        RewardModel::Constant { value: bounds.min }
    }

    /// The true mean-reward table of `problem`.
    pub fn exact(problem: &SyntheticProblem) -> Self {
        RewardModel::Table {
            values: problem.mean_reward.clone(),
        }
    }

    pub fn loss_trace(&self) -> &[f64] {
        match self {
            RewardModel::Regression(m) => &m.loss_trace,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    /// `weights[unit][input]`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

/// Per-action linear head over standardised features, optionally behind one
/// `tanh` hidden layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionModel {
    /// Indices of the context features the model sees; `None` means all.
    pub features: Option<Vec<usize>>,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
    pub hidden: Option<HiddenLayer>,
    /// `out_weights[action][unit]`.
    pub out_weights: Vec<Vec<f64>>,
    pub out_bias: Vec<f64>,
    /// Training MSE after each epoch.
    pub loss_trace: Vec<f64>,
}

impl RegressionModel {
    fn inputs(&self, features: &[f64]) -> Vec<f64> {
        let pick = |j: usize, f: usize| (features[f] - self.center[j]) / self.scale[j];
        match &self.features {
            Some(idx) => idx.iter().enumerate().map(|(j, &f)| pick(j, f)).collect(),
            None => (0..features.len()).map(|j| pick(j, j)).collect(),
        }
    }

    fn representation(&self, z: &[f64]) -> Vec<f64> {
        match &self.hidden {
            None => z.to_vec(),
            Some(h) => h
                .weights
                .iter()
                .zip(&h.bias)
                .map(|(w, b)| (dot(w, z) + b).tanh())
                .collect(),
        }
    }

    pub fn predict(&self, features: &[f64], action: usize) -> f64 {
        let h = self.representation(&self.inputs(features));
        dot(&self.out_weights[action], &h) + self.out_bias[action]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressionConfig {
    /// Width of the optional hidden layer.
    pub hidden: Option<usize>,
    pub epochs: usize,
    pub learn_rate: f64,
    pub l2: f64,
    pub seed: u64,
    /// Restrict the model to these context features.
    pub features: Option<Vec<usize>>,
}

impl Default for RegressionConfig {
    fn default() -> Self {
        Self {
            hidden: None,
            epochs: 1500,
            learn_rate: 0.05,
            l2: 0.0,
            seed: 0,
            features: None,
        }
    }
}

/// Observed `(context, action)` cell: count, mean reward and reward sum of
/// squares, which is all the squared loss needs.
struct Cell {
    context: usize,
    action: usize,
    count: f64,
    mean: f64,
    sq_dev: f64,
}

fn cells(dataset: &LoggedDataset, n_actions: usize) -> Result<Vec<Cell>> {
    let mut acc: std::collections::BTreeMap<(usize, usize), (f64, f64, f64)> = Default::default();
    for (i, rec) in dataset.records.iter().enumerate() {
        if rec.action >= n_actions {
            return Err(Error::CorruptData {
                record: i,
                reason: format!("action {} out of range", rec.action),
            });
        }
        let e = acc.entry((rec.context, rec.action)).or_default();
        e.0 += 1.0;
        e.1 += rec.reward;
        e.2 += rec.reward * rec.reward;
    }
    Ok(acc
        .into_iter()
        .map(|((context, action), (n, s, ss))| {
            let mean = s / n;
            Cell {
                context,
                action,
                count: n,
                mean,
                sq_dev: (ss - n * mean * mean).max(0.0),
            }
        })
        .collect())
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-12);
        }
    }
}

/// Fits a [`RegressionModel`] by full-batch gradient descent (Adam, linearly
/// decayed step) on the mean squared error over logged `(x, y, r)` triples.
pub fn train_reward_model(
    dataset: &LoggedDataset,
    n_actions: usize,
    config: &RegressionConfig,
) -> Result<RewardModel> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let dim = dataset.contexts[0].len();
    let selected: Vec<usize> = match &config.features {
        Some(idx) => {
            if let Some(&bad) = idx.iter().find(|&&f| f >= dim) {
                return Err(Error::contract(format!("feature {bad} out of range")));
            }
            idx.clone()
        }
        None => (0..dim).collect(),
    };
    let d = selected.len();
    let cells = cells(dataset, n_actions)?;
    let n = dataset.len() as f64;

    // standardise with record-weighted moments
    let mut center = vec![0.0; d];
    let mut scale = vec![0.0; d];
    for cell in &cells {
        let x = &dataset.contexts[cell.context];
        for (j, &f) in selected.iter().enumerate() {
            center[j] += cell.count * x[f] / n;
        }
    }
    for cell in &cells {
        let x = &dataset.contexts[cell.context];
        for (j, &f) in selected.iter().enumerate() {
            scale[j] += cell.count * (x[f] - center[j]).powi(2) / n;
        }
    }
    for s in &mut scale {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let width = config.hidden.unwrap_or(d);
    let hidden = match config.hidden {
        None => None,
        Some(h) => {
            let normal = Normal::new(0.0, 1.0 / (d.max(1) as f64).sqrt()).expect("valid normal");
            Some(HiddenLayer {
                weights: (0..h).map(|_| (0..d).map(|_| normal.sample(&mut rng)).collect()).collect(),
                bias: vec![0.0; h],
            })
        }
    };
    let out_init = match config.hidden {
        None => Normal::new(0.0, 0.0).expect("valid normal"),
        Some(h) => Normal::new(0.0, 0.1 / (h as f64).sqrt()).expect("valid normal"),
    };
    let mean_reward = dataset.records.iter().map(|r| r.reward).sum::<f64>() / n;
    let mut model = RegressionModel {
        features: config.features.clone(),
        center,
        scale,
        hidden,
        out_weights: (0..n_actions)
            .map(|_| (0..width).map(|_| out_init.sample(&mut rng)).collect())
            .collect(),
        out_bias: vec![mean_reward; n_actions],
        loss_trace: Vec::with_capacity(config.epochs),
    };

    let inputs: Vec<Vec<f64>> = dataset.contexts.iter().map(|x| model.inputs(x)).collect();
    let n_params = flatten(&model).len();
    let mut adam = Adam::new(n_params);
    let irreducible: f64 = cells.iter().map(|c| c.sq_dev).sum::<f64>() / n;

    for epoch in 0..config.epochs {
        let mut grad = Gradients::zeros_like(&model);
        let mut loss = irreducible;
        for cell in &cells {
            let z = &inputs[cell.context];
            let h = model.representation(z);
            let pred = dot(&model.out_weights[cell.action], &h) + model.out_bias[cell.action];
            let resid = pred - cell.mean;
            loss += cell.count * resid * resid / n;
            let g = 2.0 * cell.count * resid / n;
            grad.out_bias[cell.action] += g;
            for (gw, hv) in grad.out_weights[cell.action].iter_mut().zip(&h) {
                *gw += g * hv;
            }
            if let Some(gl) = grad.hidden.as_mut() {
                for (u, &hu) in h.iter().enumerate() {
                    let back = g * model.out_weights[cell.action][u] * (1.0 - hu * hu);
                    gl.bias[u] += back;
                    for (gw, zv) in gl.weights[u].iter_mut().zip(z) {
                        *gw += back * zv;
                    }
                }
            }
        }
        if config.l2 > 0.0 {
            grad.add_l2(&model, config.l2);
        }
        if !loss.is_finite() {
            return Err(Error::TrainingFailure {
                step: epoch,
                reason: format!("regression loss became {loss}"),
            });
        }
        model.loss_trace.push(loss);
        let mut params = flatten(&model);
        let progress = epoch as f64 / config.epochs as f64;
        adam.step(&mut params, &grad.flatten(), config.learn_rate * (1.0 - 0.9 * progress));
        unflatten(&mut model, &params);
    }
    Ok(RewardModel::Regression(model))
}

struct Gradients {
    hidden: Option<HiddenLayer>,
    out_weights: Vec<Vec<f64>>,
    out_bias: Vec<f64>,
}

impl Gradients {
    fn zeros_like(m: &RegressionModel) -> Self {
        Self {
            hidden: m.hidden.as_ref().map(|h| HiddenLayer {
                weights: h.weights.iter().map(|r| vec![0.0; r.len()]).collect(),
                bias: vec![0.0; h.bias.len()],
            }),
            out_weights: m.out_weights.iter().map(|r| vec![0.0; r.len()]).collect(),
            out_bias: vec![0.0; m.out_bias.len()],
        }
    }

    fn add_l2(&mut self, m: &RegressionModel, l2: f64) {
        for (g, w) in self.out_weights.iter_mut().flatten().zip(m.out_weights.iter().flatten()) {
            *g += l2 * w;
        }
        if let (Some(g), Some(h)) = (self.hidden.as_mut(), m.hidden.as_ref()) {
            for (gv, wv) in g.weights.iter_mut().flatten().zip(h.weights.iter().flatten()) {
                *gv += l2 * wv;
            }
        }
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if let Some(h) = &self.hidden {
            out.extend(h.weights.iter().flatten());
            out.extend(&h.bias);
        }
        out.extend(self.out_weights.iter().flatten());
        out.extend(&self.out_bias);
        out
    }
}

fn flatten(m: &RegressionModel) -> Vec<f64> {
    let mut out = Vec::new();
    if let Some(h) = &m.hidden {
        out.extend(h.weights.iter().flatten());
        out.extend(&h.bias);
    }
    out.extend(m.out_weights.iter().flatten());
    out.extend(&m.out_bias);
    out
}

fn unflatten(m: &mut RegressionModel, params: &[f64]) {
    let mut it = params.iter().copied();
    if let Some(h) = m.hidden.as_mut() {
        for v in h.weights.iter_mut().flatten() {
            *v = it.next().expect("parameter count");
        }
        for v in &mut h.bias {
            *v = it.next().expect("parameter count");
        }
    }
    for v in m.out_weights.iter_mut().flatten() {
        *v = it.next().expect("parameter count");
    }
    for v in &mut m.out_bias {
        *v = it.next().expect("parameter count");
    }
}

/// Mean squared error of `model` on the logged rewards of `dataset`.
pub fn mse(model: &RewardModel, dataset: &LoggedDataset) -> f64 {
    let total: f64 = dataset
        .records
        .iter()
        .map(|r| (model.predict(r.context, dataset.features(r), r.action) - r.reward).powi(2))
        .sum();
    total / dataset.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::LoggedRecord;

    fn fixture_data() -> LoggedDataset {
        // deterministic rewards of the reference problem on its logging support
        let mut records = Vec::new();
        for _ in 0..25 {
            records.push(LoggedRecord { context: 0, action: 0, reward: 1.0, propensity: 0.5 });
            records.push(LoggedRecord { context: 0, action: 1, reward: 0.0, propensity: 0.5 });
            records.push(LoggedRecord { context: 1, action: 0, reward: 0.2, propensity: 1.0 });
            records.push(LoggedRecord { context: 1, action: 0, reward: 0.2, propensity: 1.0 });
        }
        LoggedDataset::new(vec![vec![1.0, 0.0], vec![0.0, 1.0]], records).unwrap()
    }

    #[test]
    fn realizable_regression_reaches_small_mse() {
        let data = fixture_data();
        let model = train_reward_model(&data, 3, &RegressionConfig::default()).unwrap();
        let err = mse(&model, &data);
        assert!(err < 1e-4, "mse {err}");
        assert_eq!(model.loss_trace().len(), 1500);
    }

    #[test]
    fn constant_rewards_are_fitted() {
        let mut data = fixture_data();
        for r in &mut data.records {
            r.reward = 0.37;
        }
        let model = train_reward_model(&data, 3, &RegressionConfig::default()).unwrap();
        for r in &data.records {
            assert!((model.predict(r.context, data.features(r), r.action) - 0.37).abs() < 1e-3);
        }
    }

    #[test]
    fn hidden_layer_model_trains() {
        let data = fixture_data();
        let cfg = RegressionConfig {
            hidden: Some(8),
            epochs: 3000,
            ..Default::default()
        };
        let model = train_reward_model(&data, 3, &cfg).unwrap();
        assert!(mse(&model, &data) < 1e-3);
    }

    #[test]
    fn divergence_is_reported() {
        let data = fixture_data();
        let cfg = RegressionConfig {
            learn_rate: f64::INFINITY,
            epochs: 5,
            ..Default::default()
        };
        assert!(matches!(
            train_reward_model(&data, 3, &cfg),
            Err(Error::TrainingFailure { .. })
        ));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let data = LoggedDataset::new(vec![vec![0.0]], vec![]).unwrap();
        assert_eq!(
            train_reward_model(&data, 2, &RegressionConfig::default()),
            Err(Error::EmptyDataset)
        );
    }
}

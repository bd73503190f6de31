use std::path::PathBuf;

use bandex_core::datagen::GenConfig;
use bandex_core::learning::{RegressionConfig, TrainConfig};
use bandex_core::selection::Selector;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Learning approaches compared by `run`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    NaiveIps,
    ActionRestriction,
    ConservativeExtrapolation,
    RegressionExtrapolation,
    /// Shifted objective with `k` picked by the first configured selector.
    PolicyRestriction,
    /// Greedy policy of the reward regression.
    DirectMethod,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::NaiveIps,
        Method::ActionRestriction,
        Method::ConservativeExtrapolation,
        Method::RegressionExtrapolation,
        Method::PolicyRestriction,
        Method::DirectMethod,
    ];
}

/// Off-policy estimates reported for each learned policy on validation data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum EstimatorKind {
    Ips,
    Conservative,
    Regression,
    Dr,
    Dm,
    MinSup,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::Ips,
        EstimatorKind::Conservative,
        EstimatorKind::Regression,
        EstimatorKind::Dr,
        EstimatorKind::Dm,
        EstimatorKind::MinSup,
    ];
}

fn all_methods() -> Vec<Method> {
    Method::ALL.to_vec()
}
fn all_estimators() -> Vec<EstimatorKind> {
    EstimatorKind::ALL.to_vec()
}
fn all_selectors() -> Vec<Selector> {
    Selector::ALL.to_vec()
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub gen: GenConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub regression: RegressionConfig,
    #[serde(default = "all_estimators")]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default = "all_selectors")]
    pub selectors: Vec<Selector>,
    #[serde(default = "all_methods")]
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Target unsupported fractions, each reached by calibrating the logging
    /// temperature. When empty, `gen.temperature` is used as is.
    #[serde(default)]
    pub deficiency_levels: Vec<f64>,
    /// Shift grid for policy restriction; defaults to 21 points over the
    /// reward range.
    #[serde(default)]
    pub grid: Option<Vec<f64>>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(CliError::Config("seeds must be nonempty".into()));
        }
        if self.methods.is_empty() {
            return Err(CliError::Config("methods must be nonempty".into()));
        }
        if self.methods.contains(&Method::PolicyRestriction) && self.selectors.is_empty() {
            return Err(CliError::Config("policy restriction needs at least one selector".into()));
        }
        if let Some(level) = self.deficiency_levels.iter().find(|l| !(**l >= 0.0 && **l < 1.0)) {
            return Err(CliError::Config(format!("deficiency level {level} not in [0, 1)")));
        }
        if matches!(&self.grid, Some(g) if g.is_empty()) {
            return Err(CliError::Config("grid must be nonempty".into()));
        }
        self.gen.validate()?;
        self.train.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_fills_defaults() {
        let text = r#"{
            "gen": {"scheme": "multiclass", "n_contexts": 5, "context_dim": 3,
                    "n_actions": 4, "seed": 0, "temperature": 2.0},
            "seeds": [1, 2]
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.gen.clip_threshold, 0.01);
        assert_eq!(cfg.methods.len(), 6);
        assert_eq!(cfg.output_dir, PathBuf::from("out"));
    }

    #[test]
    fn empty_seeds_are_rejected() {
        let text = r#"{
            "gen": {"scheme": "multiclass", "n_contexts": 5, "context_dim": 3,
                    "n_actions": 4, "seed": 0, "temperature": 2.0},
            "seeds": []
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(text).unwrap();
        assert!(matches!(cfg.validate(), Err(CliError::Config(_))));
    }
}

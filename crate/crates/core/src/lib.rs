//! Off-policy contextual-bandit learning when the logging policy has
//! deficient support.
//!
//! The crate is organised around a finite, fully enumerated problem
//! ([`SyntheticProblem`]) so that every estimator can be checked against an
//! exact expectation computed by [`oracle`]. The main pieces are:
//!
//! * [`policy`] and [`support`]: softmax and tabular policies, propensity
//!   clipping, unsupported action sets and the action-restriction transform.
//! * [`dataset`]: logged `(context, action, reward, propensity)` tuples and
//!   their JSON Lines encoding.
//! * [`estimators`]: IPS, augmented IPS, DR, DM and the MinSup estimator.
//! * [`learning`]: reward regression, data augmentation and ERM training of
//!   softmax policies under the naive, action-restricted, augmented and
//!   shifted objectives.
//! * [`selection`]: grid search over the reward shift with pluggable
//!   validation selectors, and the concentration check for the support
//!   constraint.
//! * [`datagen`]: synthetic problems, logging policies and interaction logs.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod dataset;
pub mod error;
pub mod estimators;
pub mod fixture;
pub mod learning;
pub mod oracle;
pub mod policy;
pub mod problem;
pub mod reward_model;
pub mod selection;
pub mod stats;
pub mod support;

pub use dataset::{LoggedDataset, LoggedRecord};
pub use error::{Error, Result};
pub use estimators::{EstimatorReport, MinSupPolicy};
pub use policy::{Policy, RestrictedPolicy, SoftmaxPolicy, TabularPolicy};
pub use problem::{RewardBounds, RewardNoise, SyntheticProblem};
pub use reward_model::RewardModel;
pub use support::SupportSet;

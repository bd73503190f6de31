//! Unsupported action sets `U(x, pi_0) = { y : pi_0(y|x) = 0 }`.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::policy::Policy;
use crate::problem::SyntheticProblem;

/// Indices with probability exactly zero.
pub fn unsupported_actions(probs: &[f64]) -> Vec<usize> {
    probs
        .iter()
        .enumerate()
        .filter(|&(_, &p)| p == 0.0)
        .map(|(y, _)| y)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportSet {
    pub n_actions: usize,
    /// Sorted unsupported actions per context.
    pub unsupported: Vec<Vec<usize>>,
}

impl SupportSet {
    pub fn from_contexts(logging: &dyn Policy, contexts: &[Vec<f64>]) -> Result<Self> {
        let unsupported = contexts
            .iter()
            .enumerate()
            .map(|(c, x)| logging.probs(c, x).map(|p| unsupported_actions(&p)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n_actions: logging.n_actions(),
            unsupported,
        })
    }

    pub fn get(&self, context: usize) -> &[usize] {
        &self.unsupported[context]
    }

    pub fn is_unsupported(&self, context: usize, action: usize) -> bool {
        self.unsupported[context].binary_search(&action).is_ok()
    }

    /// `supported[context][action]`.
    pub fn supported_mask(&self) -> Vec<Vec<bool>> {
        self.unsupported
            .iter()
            .map(|u| {
                let mut row = vec![true; self.n_actions];
                for &y in u {
                    row[y] = false;
                }
                row
            })
            .collect()
    }

    /// Fraction of `(context, action)` pairs without support, unweighted.
    pub fn unsupported_fraction(&self) -> f64 {
        let total: usize = self.unsupported.iter().map(Vec::len).sum();
        total as f64 / (self.unsupported.len() * self.n_actions) as f64
    }

    pub fn is_full(&self) -> bool {
        self.unsupported.iter().all(Vec::is_empty)
    }
}

/// `U(x, pi_0)` for every context of `problem`.
pub fn unsupported_set(logging: &dyn Policy, problem: &SyntheticProblem) -> Result<SupportSet> {
    SupportSet::from_contexts(logging, &problem.contexts)
}

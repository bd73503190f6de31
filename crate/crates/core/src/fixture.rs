//! A two-context, three-action instance small enough to check by hand.
//!
//! Logging covers actions 0 and 1 at the first context and only action 0 at
//! the second, so `U = {2}` and `U = {1, 2}`.

use crate::policy::TabularPolicy;
use crate::problem::{RewardBounds, SyntheticProblem};

#[derive(Debug, Clone)]
pub struct Fixture {
    pub problem: SyntheticProblem,
    pub logging: TabularPolicy,
    pub target: TabularPolicy,
}

pub fn reference() -> Fixture {
    let problem = SyntheticProblem::uniform(
        vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        vec![vec![1.0, 0.0, 0.5], vec![0.2, 0.8, 0.4]],
        RewardBounds::new(0.0, 1.0).expect("valid bounds"),
    )
    .expect("valid fixture");
    let logging = TabularPolicy::new(vec![vec![0.5, 0.5, 0.0], vec![1.0, 0.0, 0.0]])
        .expect("valid logging");
    let target = TabularPolicy::new(vec![vec![0.2, 0.3, 0.5], vec![0.6, 0.3, 0.1]])
        .expect("valid target");
    Fixture {
        problem,
        logging,
        target,
    }
}

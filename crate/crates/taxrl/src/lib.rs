//! Decision engine for the tax-evasion strategy of a risk-averse firm.
//!
//! A firm evolves year by year through a Markov tax environment with random
//! audits, penalties, and occasional tax amnesties ("closure" offers). The
//! crate computes the firm's optimal behavior two ways:
//!
//! * [`exact_dp`] — exact value iteration on the reduced discrete state
//!   space, valid for the risk-neutral firm (the ground-truth oracle);
//! * [`dqn`] — a from-scratch double deep-Q-learning solver built on the
//!   [`neuralnet`] engine, which handles the general risk-averse case.
//!
//! [`tax_env`] defines the environment itself (state dynamics, rewards, CRRA
//! utility) and [`analysis`] post-processes trained policies: risk-aversion
//! sweeps and calibration, constant-policy comparisons, decision histograms,
//! and shallow regression-tree summaries.

pub mod analysis;
pub mod dqn;
pub mod exact_dp;
pub mod neuralnet;
pub mod rng;
pub mod tax_env;

pub use tax_env::{
    ClosureScenario, EnvError, FirmAction, FirmState, TaxEnv, TaxParams, TaxStatus,
    TransitionModel,
};

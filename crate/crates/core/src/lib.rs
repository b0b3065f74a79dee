//! Tabular laboratory for reward-mixing MDPs (RMMDPs).
//!
//! An RMMDP is an episodic MDP whose reward model is drawn once per episode
//! from `M` latent candidates that all share the transition kernel. This crate
//! provides:
//!
//! * [`model`]: the model itself, exact moments, beliefs and trajectory
//!   probabilities;
//! * [`env`]: episodic sampling and the state augmentation used to collect
//!   joint reward samples;
//! * [`explore`]: optimistic pure exploration of higher-order reward moments;
//! * [`fit`]: moment matching of a latent mixture against empirical moments;
//! * [`plan`]: exact belief-state planning and policy evaluation;
//! * [`analyze`]: exact enumeration tools (reach probabilities, level sets,
//!   moment mismatch, eventwise total variation, KL information identity);
//! * [`hardgen`]: parity-chain instances whose low-order moments mimic fair coins;
//! * [`pipeline`]: the end-to-end explore / fit / plan loop.

// `!(x >= 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analyze;
pub mod enumerate;
pub mod env;
pub mod error;
pub mod explore;
pub mod fit;
pub mod generate;
pub mod hardgen;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod plan;
pub mod policy;
pub mod rng;

pub use error::{Error, Result};
pub use model::{
    belief_update, canonicalize, moment_value, trajectory_probability, validate_model, Belief,
    MomentKey, Pair, RewardSupport, Rmmdp, Step, Trajectory, Violation,
};
pub use policy::Policy;

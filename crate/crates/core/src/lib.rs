//! Mean field control for scheduler-to-queue assignment.
//!
//! A large population of schedulers routes packets to a small set of bounded
//! queues. Each scheduler only sees the queues it has access to; the shared
//! environment state is the vector of buffer fillings. In the infinite-agent
//! limit the per-step population behaviour collapses to a joint state-action
//! distribution, and the control problem becomes a single-agent MDP over the
//! environment state whose actions are decision rules. This crate provides:
//!
//! * [`prob`]: finite distributions with a canonical support order and
//!   reproducible, counter-indexed random streams;
//! * [`model`]: the mean field vocabulary (spaces, decision rules, joint
//!   distributions, stationary policies, policy tuples);
//! * [`queue`]: the queueing environment (routing, truncated Poisson
//!   kernels, transition and reward);
//! * [`solver`]: exact value iteration over a gridded rule space, policy
//!   evaluation by fixed-point iteration and by direct linear solve;
//! * [`baselines`]: join-the-shortest-queue and uniform reference policies;
//! * [`sim`]: the finite-population simulator and concentration experiments;
//! * [`policy_io`]: a versioned text format for solved policies.

pub mod baselines;
pub mod error;
pub mod model;
pub mod policy_io;
pub mod prob;
pub mod queue;
pub mod sim;
pub mod solver;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

//! Broadcast-rate admission control for randomized EV charging on a
//! capacity-limited circuit.
//!
//! A controller samples the number of charging vehicles `n` at the start of
//! each broadcast interval and announces one connection rate `λ(n)` that holds
//! until the next announcement. Vehicles connect as a Poisson process at that
//! rate and finish charging independently at rate `μ`, so within an interval
//! the load evolves as an M/M/∞ queue.
//!
//! The crate is organized bottom-up:
//!
//! * [`special_math`]: log-space Poisson and binomial primitives.
//! * [`kernel`]: the one-interval transition kernel and its overload tail,
//!   plus a uniformization oracle.
//! * [`synthesis`]: per-state rate synthesis, shape-preserving continuation,
//!   the fixed-point utilization bound and the constant-rate optimum.
//! * [`chain`]: exact propagation and stationary analysis of the controlled
//!   chain on a truncated state space.
//! * [`sim`]: seeded discrete-event Monte Carlo of the physical process.
//!
//! All rates are dimensionless: `λτ` is the expected number of connections
//! per interval and `μτ` the interval length in units of the mean charge
//! time. A state `n ≥ N` counts as overloaded.

pub mod chain;
pub mod error;
mod exec;
pub mod kernel;
pub mod sim;
pub mod special_math;
pub mod synthesis;

pub use chain::{ChainModel, ChainState};
pub use error::{Error, Result};
pub use kernel::{CircuitCapacity, CountDistribution, KernelParams};
pub use sim::{SimConfig, SimReport};
pub use special_math::LogProb;
pub use synthesis::{RatePolicy, RateTable, SynthesisSpec};

/// Version string written into artifact metadata.
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

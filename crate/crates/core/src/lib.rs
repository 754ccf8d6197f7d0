//! Core library for discovering and exercising pairwise interaction force
//! laws that command collective patterns in self-propelled particle swarms.
//!
//! The pipeline has three legs:
//!
//! * [`trainer`] — physics-informed training that fits a small network of
//!   agent trajectories together with the polynomial force-law parameters,
//!   returning an [`forcemodel::InteractionModel`].
//! * [`dynamics`] — forward simulation of the swarm ODE under a learned
//!   model (RK4, optional periodic domain, optional Gaussian noise).
//! * [`metrics`] — order parameters, geometric descriptors, pattern
//!   classification, and repeated-trial statistics.
//!
//! [`autodiff`], [`network`], and [`optim`] supply the differentiation
//! engine, the trajectory network, and the optimizers used by the trainer.

pub mod autodiff;
pub mod dynamics;
pub mod forcemodel;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod trainer;
pub mod vec2;

pub use forcemodel::{GroupAssignment, InteractionModel, PolySeries, TransitionSchedule};
pub use dynamics::{AgentState, DomainSpec, IntegratorConfig, NoiseSpec, SwarmState, Trajectory};
pub use metrics::{MetricSeries, TrialReport};
pub use trainer::{LossWeights, PatternKind, PatternSpec, TrainingConfig, TrainingReport};
pub use vec2::Vec2;

/// Distances are clamped to this floor before exponentiation and unit-vector
/// construction; real exponents may be negative.
pub const R_FLOOR: f64 = 1e-6;

/// Below this speed a direction is considered undefined: the aligning force
/// and the propulsion term both return zero.
pub const V_FLOOR: f64 = 1e-8;

/// Derive an independent RNG stream seed from a master seed and a stream
/// index (trial number, segment, ...). SplitMix64 finalizer.
pub fn stream_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9e37_79b9_7f4a_7c15_u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

//! Multi-lane convoy simulation with LLM-style high-level decisions,
//! interlaced formation control and a task-partitioned experience pool.
//!
//! The numeric core (`world`, `formation`) is generic over [`Scalar`]
//! (`f32` or `f64`); scenario running, I/O and decision backends use `f64`.

// Validation uses `!(x > 0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backend;
pub mod formation;
pub mod memory;
pub mod reasoning;
pub mod scalar;
pub mod scenario;
pub mod trace;
pub mod world;

pub use scalar::Scalar;

pub type Vehicle = world::VehicleState<f64>;
pub type World = world::WorldState<f64>;
pub type Highway = world::HighwayConfig<f64>;
pub type Weights = formation::ControlWeights<f64>;
pub type Command = formation::VelocityCommand<f64>;
pub type Neighbors = formation::NeighborSet<f64>;
pub type Targets = reasoning::ActionTargets<f64>;
pub type Sensed = world::Perception<f64>;

//! Bias-aware remapping of 3-axis control interfaces.
//!
//! A user's reachable control space is estimated from sampled interface
//! signals ([`bias_profile`]), compiled into a stack of per-twist-bin
//! stretch maps onto the full control space ([`map_compiler`]), and applied
//! sample by sample with optional tremor-adaptive smoothing ([`deployment`]).
//! [`task`] runs the 3D center-out reaching bench against synthetic or
//! recorded users, [`metrics`] scores paired sessions and [`session_store`]
//! persists and replays them.

pub mod bias_profile;
pub mod config;
pub mod deployment;
pub mod error;
pub mod geometry;
pub mod map_compiler;
pub mod metrics;
pub mod session_store;
pub mod task;

pub use bias_profile::{build_profile, BiasProfile, ControlSample, Xi};
pub use config::Config;
pub use deployment::{Condition, DeploymentState};
pub use geometry::{convex_hull, ConvexHull, Point2};
pub use map_compiler::{compile_stack, RemapStack};

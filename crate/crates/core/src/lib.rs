//! Dual ascent for separable quadratic programs under bounded, randomly
//! distributed communication delays.
//!
//! A problem is a set of blocks `min ½x'Qx + c'x` coupled by `Σ A_i x_i = b`.
//! Each block contributes a dual curvature term `Φ_i = -α_i A_i Q_i⁻¹ A_i'`
//! and the coordinator iterates on the multiplier `y`. With delays, block `i`
//! reports a gradient computed from a multiplier `d_i` steps old; the
//! [`async_engine`] models this with a history buffer and an optional gate
//! that skips steps whose delay pattern cannot be certified contracting.

pub mod async_engine;
pub mod delay;
pub mod error;
pub mod harness;
pub mod problem;
pub mod stability;
pub mod sync_engine;
pub mod trajectory;

pub use async_engine::{run_async, AsyncOptions, HoldPolicy};
pub use delay::{DelayDistribution, DelaySample, DelaySampler};
pub use error::{Error, Result};
pub use problem::{generate_random_problem, sync_fixed_point, Block, GeneratorSpec, PhiSet, SeparableQpProblem};
pub use stability::{PNorm, StabilityReport};
pub use sync_engine::{run_sync, SyncOptions};
pub use trajectory::{TerminalStatus, Trajectory};

//! Multi-mode trajectory planning with a conditional diffusion denoiser,
//! Hungarian-matched multi-reference imitation, and group-relative policy
//! optimization under diversity and safety rewards.

pub mod checkpoint;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod matching;
pub mod metrics;
pub mod plot;
pub mod rewards;
pub mod rng;
pub mod scene;
pub mod train;
pub mod trajectory;

pub use error::{Error, Result};
pub use trajectory::{Trajectory, TrajectorySet, Waypoint};

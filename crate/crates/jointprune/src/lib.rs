//! Joint multi-dimension network pruning: per-layer channel widths, input
//! resolution and depth are folded into one normalized pruning vector and
//! optimized numerically with Gaussian-smoothed stochastic gradient estimates
//! under a resource constraint, while a weight-shared tiny network supplies
//! the task loss.

pub mod artifacts;
pub mod cost;
pub mod error;
pub mod estimator;
pub mod net;
pub mod optimizer;
pub mod presets;
pub mod report;
pub mod rng;
pub mod runconfig;
pub mod space;

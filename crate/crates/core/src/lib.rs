//! Vehicle trajectory prediction that fuses lane-following knowledge-driven
//! predictors with a learned, confined residual correction.
//!
//! The pipeline for one scenario is:
//!
//! 1. a knowledge-driven predictor ([`predictors`]) produces a Gaussian
//!    trajectory that follows the lane centerlines,
//! 2. the residual network ([`residual`]) predicts a Gaussian correction whose
//!    mean is bounded by the scene confinement parameter `C`,
//! 3. the two are merged by inverse-variance weighting ([`fusion`]),
//! 4. optionally, a bicycle-model MPC ([`mpc`]) projects the merged means onto
//!    a kinematically feasible trajectory.
//!
//! [`train`] and [`metrics`] hold the losses, training loop and the
//! ADE/FDE/RV/CT metric suite; [`experiment`] wires everything together into
//! the dataset → train → evaluate workflow used by the command-line tool.

pub mod error;
pub mod experiment;
pub mod fusion;
pub mod geometry;
pub mod metrics;
pub mod model;
pub mod mpc;
pub mod nn;
pub mod predictors;
pub mod residual;
pub mod scene;
pub mod train;
pub mod trajectory;

pub use error::{Error, Result};
pub use geometry::Vec2;
pub use trajectory::GaussianTrajectory;

/// Number of observed frames per agent history.
pub const OBS_LEN: usize = 5;
/// Number of predicted frames.
pub const PRED_LEN: usize = 10;
/// Frame interval in seconds.
pub const FRAME_DT: f64 = 0.5;
/// Lower clamp for every variance produced by the toolkit, in m².
pub const VAR_FLOOR: f64 = 1e-4;
/// Upper clamp for network-predicted variances, in m².
pub const VAR_CEIL: f64 = 1e4;

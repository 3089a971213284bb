//! Geodesic travel-time toolkit.
//!
//! Trains a neural Eikonal-equation solver with temporal-difference metric
//! learning, validates it against a built-in Fast Marching Method oracle, and
//! plans collision-free paths with a sampling-based MPC controller.
//!
//! The crate is organized around the data flow of a single experiment:
//!
//! 1. [`grid`] / [`env`] build an environment (occupancy grid or planar arm)
//!    with an obstacle clearance function and the ground-truth speed field.
//! 2. [`fmm`] solves the Eikonal equation on grids as the reference oracle.
//! 3. [`autodiff`] provides the differentiation engine: forward-mode tangents
//!    for exact input gradients of the network, recorded on a tape so that a
//!    reverse sweep yields parameter gradients of gradient-dependent losses.
//! 4. [`model`] defines the travel-time model: residual MLP encoder plus a
//!    metric head (sum-over-rows of max-over-columns of absolute latent
//!    differences) and baseline heads.
//! 5. [`train`] implements the combined loss (Eikonal + TD + normal alignment,
//!    causality weighted) and the training loop.
//! 6. [`plan`] runs path inference: sampling-based MPC and a gradient
//!    follower, with collision validation.
//! 7. [`eval`] holds the benchmark harness shared by the CLI.

pub mod autodiff;
pub mod env;
pub mod eval;
pub mod fmm;
pub mod grid;
pub mod model;
pub mod plan;
pub mod train;

mod error;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

//! Outlier-robust Wasserstein distributionally robust optimization.
//!
//! The crate is organized bottom-up:
//!
//! - [`measures`]: discrete probability measures, ground costs with pinned
//!   (non-transported) coordinates, and the CSV dataset format.
//! - [`robust_ot`]: exact Wasserstein and outlier-robust Wasserstein distances
//!   computed as (partial) optimal transport linear programs, resilience
//!   bounds and 1-D quantile trimming.
//! - [`losses`]: piecewise max-affine loss families whose coefficients are
//!   affine in the model parameters.
//! - [`conic`]: a cone-native program representation (nonnegative, second
//!   order, rotated second order, PSD) and its interior-point solve contract.
//! - [`reformulate`]: dual and primal conic programs for the inner worst-case
//!   expectation, joint minimization over parameters, worst-case distribution
//!   extraction, closed-form oracles and excess-risk bounds.
//! - [`robust_stats`]: trimmed mean, iterative filtering and σ tuning.
//! - [`simulate`]: corruption models for generated data.
//! - [`experiments`]: the excess-risk experiment harness.
//!
//! Data-parallel loops (trials, Monte Carlo seeds, per-coordinate trimming)
//! go through [`par`], which uses rayon when the `parallel` feature is on and
//! runs sequentially otherwise.

// Links the system OpenBLAS used by the SDP path of the solver backend.
use openblas_src as _;

pub mod conic;
pub mod error;
pub mod experiments;
pub mod losses;
pub mod measures;
pub mod par;
pub mod reformulate;
pub mod robust_ot;
pub mod robust_stats;
pub mod simulate;

pub use error::{Error, Result};
pub use measures::{DiscreteMeasure, GroundCost, Point, TransportMask};

//! Spatial blind source separation (SBSS) with signal-dimension testing.
//!
//! The observed p-variate field is modelled as `x(s) = Ω z(s)` where the
//! latent components of `z` are uncorrelated and the trailing `p - q` of them
//! are white noise. This crate estimates the unmixing matrix by whitening and
//! orthogonal joint diagonalization of kernel-weighted local covariance
//! matrices, and tests / estimates the number `q` of spatially correlated
//! components:
//!
//! * [`geometry`]: location sets, neighbor pairs, grid detection.
//! * [`kernels`]: ring, ball and grid-lag kernels plus their normalization constants.
//! * [`scatter`]: local covariance matrices (generic and regular-grid fast path).
//! * [`diag`]: whitening, joint diagonalization and the fitted [`diag::SbssSolution`].
//! * [`dimtest`]: the test statistic with chi-square and weighted chi-square p-values.
//! * [`bootstrap`]: noise and spatial block bootstrap tests.
//! * [`estimate`]: divide-and-conquer, forward and threshold dimension estimators.
//! * [`simulate`]: Matérn Gaussian random fields, coordinate patterns, variograms.

pub mod bootstrap;
pub mod diag;
pub mod dimtest;
pub mod error;
pub mod estimate;
pub mod geometry;
pub mod kernels;
pub mod scatter;
pub mod simulate;
pub mod special;

mod summation;

pub use error::{Result, SbssError};
pub use geometry::{LocationSet, SpatialSample};
pub use kernels::{Kernel, KernelSet};

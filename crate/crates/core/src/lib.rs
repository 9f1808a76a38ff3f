//! Feature learning for additive single-index models.
//!
//! The crate covers the whole pipeline for targets of the form
//! `f(x) = M^{-1/2} sum_m f_m(<v_m, x>)` over Gaussian inputs:
//!
//! - [`hermite`]: Hermite series, Gauss–Hermite quadrature, closed-form
//!   expansions of shifted ReLUs, superorthogonality residuals.
//! - [`model`]: index-direction sets, additive targets and labeled samples.
//! - [`network`]: the two-layer student network and its activations.
//! - [`trainer`]: spherical online SGD on the correlation loss, the
//!   second-layer convex fit, and the lazy (NTK-scaled) baseline.
//! - [`diagnostics`]: alignment traces, localization and population error.
//! - [`sq`]: statistical-query oracles and hard-instance constructions.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod hermite;
pub mod model;
pub mod network;
pub mod rng;
pub mod sq;
pub mod trainer;

pub use error::{LabError, Result};

//! Semiparametric estimation of marginal treatment effects.
//!
//! The pipeline is: fit a kernel propensity score ([`propensity`]), estimate
//! the MTE regression parameters by plug-in OLS or the efficient closed form
//! ([`estimators`]), then form target estimands and MTE curves ([`targets`]).
//! [`simulation`] holds the Monte Carlo harness and [`io`] the CLI plumbing.

// Negated comparisons double as NaN rejection; index loops walk parallel arrays.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod basis;
pub mod data;
pub mod error;
pub mod estimators;
pub mod io;
pub mod numerics;
pub mod par;
pub mod propensity;
pub mod simulation;
pub mod targets;

pub use basis::MteModelSpec;
pub use data::{CovariateKind, Dataset};
pub use error::{MteError, Result};
pub use estimators::{EstimatorKind, GammaEstimate};
pub use propensity::{KernelConfig, PropensityFit};
pub use targets::{Estimand, MteCurve, TargetEstimate};

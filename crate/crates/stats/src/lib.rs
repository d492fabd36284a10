//! Linear mixed models with crossed random intercepts.
//!
//! Models have the form `y = Xβ + Σ_k Z_k u_k + ε` with `u_k ~ N(0, σ²_k I)`
//! and `ε ~ N(0, σ² I)`. Variance components are estimated by REML, profiling
//! out β and σ² and searching over the log variance ratios `σ²_k / σ²`.
//! Fixed effects are then tested with Wald z statistics.

mod error;
mod lmm;
mod simplex;
mod wald;

pub use error::{Error, Result};
pub use lmm::{
    fit_at_log_ratios, fit_at_ratios, fit_lmm, restricted_deviance, FitOptions, FixedDesign,
    GroupingFactor, MixedFit, MixedModelSpec, VarianceComponent,
};
pub use simplex::{nelder_mead, SimplexOptions, SimplexResult};
pub use wald::{stars_for, wald_test, WaldTest};

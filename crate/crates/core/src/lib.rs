//! Voxel encoders over token sequences, and the tooling to explain them:
//! integrated-gradients token attribution, logit-lens decoding of critical
//! tokens, and counterfactual validation by exact feature-set edits, all
//! checked against a synthetic world of planted signal detectors.

pub mod attribution;
pub mod counterfactual;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod io;
pub mod lens;
pub mod seed;
pub mod train;
pub mod world;

pub use error::{Error, Result};

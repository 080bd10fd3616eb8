//! Sharp worst-case and best-case bounds for distortion risk metrics over
//! mean-variance sets intersected with 2-Wasserstein balls, with optional
//! unimodality, and the induced robust portfolio problem.

pub mod cli;
pub mod distortion;
pub mod envelope;
pub mod error;
pub mod numerics;
pub mod portfolio;
pub mod reference;
pub mod unimodal;
pub mod worstcase;

pub use error::{Error, Result};

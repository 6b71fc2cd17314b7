//! Deep hurdle network for zero-inflated multi-target regression.
//!
//! A multivariate probit head decides which targets are positive; a
//! multivariate log-normal (continuous data) or Poisson-log-normal (count
//! data) head models the positive magnitudes. Both heads share an encoder
//! and are coupled through an L1 penalty on the difference of their
//! covariance matrices.

pub mod abundance;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod mvp;
pub mod probcore;

pub use error::{DhnError, Result};

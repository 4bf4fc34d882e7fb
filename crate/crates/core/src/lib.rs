//! Production function estimation with firms' subjective expectations.
//!
//! The central estimator ([`npr`]) controls for unobserved productivity through a monotone
//! penalized spline of an expectation-based residual. Proxy-variable baselines, a Monte Carlo
//! data-generating process with forward-looking firms, survey belief fitting and TFP outcome
//! regressions complete the toolkit.

pub mod baselines;
pub mod beliefs;
pub mod datamodel;
pub mod error;
pub mod linalg;
pub mod mcsim;
pub mod npr;
pub mod optim;
pub mod scam;
pub mod splines;
pub mod tfp;

pub use error::{Error, Result};

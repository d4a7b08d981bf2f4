// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod eda;
pub mod error;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod mcmc;
pub mod metrics;
pub mod model;
pub mod predict;
pub mod simstudy;

pub use error::{Error, Result};

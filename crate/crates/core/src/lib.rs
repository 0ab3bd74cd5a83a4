//! Functional singular value decomposition of the mean of a bivariate
//! process observed on a product grid.

pub mod bspline;
pub mod commands;
pub mod error;
pub mod freeknot;
pub mod fsvd;
pub mod grid;
pub mod io;
pub mod linalg;
pub mod sim;
pub mod tps;

pub use error::{FsvdError, Result};

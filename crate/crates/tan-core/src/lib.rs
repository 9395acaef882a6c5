//! Topologic attention networks: sparse Gaussian belief propagation over
//! learned walk-summable precision matrices, trained through implicit
//! differentiation at the fixed point.

pub mod autodiff;
pub mod builders;
pub mod data;
pub mod error;
pub mod graph;
pub mod model;
pub mod solver;
pub mod train;
pub mod verify;

pub use error::{Result, TanError};

//! Best rank-constrained approximation of nonlinear maps by the method of
//! optimal injections, on finite sample ensembles.

pub mod cli;
pub mod decorrelate;
pub mod ensemble;
pub mod error;
pub mod estimator;
pub mod family;
pub mod injection_opt;
pub mod linalg;
pub mod oracle;

pub use error::{Error, Result};

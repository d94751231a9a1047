//! Imputation of missing entries in ordinal rating matrices.
//!
//! Rows are rated subjects, columns are rating providers. Two imputers are
//! provided: [`qp::impute_qp_as`] solves one global quadratic program, and
//! [`dqp::impute_dqp_svas`] imputes each missing cell independently.

pub mod consensus;
pub mod data;
pub mod dqp;
pub mod error;
pub mod evaluation;
pub mod estimatability;
pub mod multi;
pub mod qp;
pub mod synthetic;

pub use error::{Error, Result};

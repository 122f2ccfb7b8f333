//! Fine-tune frozen operator-network trunk bases into PDE solvers.
//!
//! A pre-trained trunk (or any other [`basis::BasisSet`]) supplies the
//! functions `t_i`; the solution `u = sum_i alpha_i t_i` is fitted to PDE,
//! boundary and interface residuals at collocation points by row-normalised
//! linear least squares, or by Newton-LLSQ for nonlinear problems.

pub mod adapt;
pub mod assemble;
pub mod basis;
pub mod error;
pub mod field_sampler;
pub mod harness;
pub mod linalg;
mod nn;
pub mod oracle;
pub mod pretrain;
pub mod problems;
pub mod weight_io;

pub use error::{Error, Result};

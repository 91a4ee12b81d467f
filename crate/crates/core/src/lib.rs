//! Distributionally robust chance-constrained covariance steering for
//! discrete-time linear systems, with iterative risk allocation and Monte
//! Carlo validation.

use openblas_src as _;

pub mod cone;
pub mod dynamics;
pub mod error;
pub mod ira;
pub mod montecarlo;
pub mod program;
pub mod risk;
pub mod steering;

pub use error::{Error, Result};

//! Multivariate shared-component small area estimation for complex survey
//! data: design-weighted direct estimation, scaled ICAR/BYM2 spatial
//! structures, MCMC fitting of area- and unit-level candidate models,
//! leave-one-out LogScore comparison, and scenario simulators.

// Indexed loops over region/outcome arrays mirror the estimator formulas.
#![allow(clippy::needless_range_loop)]
// Negated comparisons like !(w > 0.0) intentionally reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod direct;
pub mod error;
pub mod evaluation;
pub mod mcmc;
pub mod model;
pub mod rng;
pub mod simulate;
pub mod spatial;
pub mod survey;

pub use error::{Result, SaeError};

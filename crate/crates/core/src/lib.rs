//! Monte Carlo and quadrature laboratory for occupation-time fluctuations of
//! the site-dependent `(1, α, σ(x))` branching particle system and their
//! Gaussian limits.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod quad;
pub mod stable;
pub mod testfn;

pub use error::{Error, Result};
pub use testfn::{Bump, TestFunction};
pub mod branching;
pub mod parallel;
pub mod rng;
pub mod gaussian;
pub mod occupation;
pub mod oracle;
pub mod stats;
pub mod harness;
pub mod selfcheck;

//! Dense linear algebra, replayable random streams and derivative checks.

mod calculus;
mod linalg;
mod matrix;
mod rng;

pub(crate) use calculus::softmax_unchecked;
pub use calculus::{central_diff, entropy, log_softmax, softmax};
pub use linalg::{cholesky, solve_spd, svd, sym_eigen, SvdResult, SymEigen};
pub use matrix::{dot, Matrix};
pub use rng::{standard_normal, RngStream};

/// `|a - b| <= atol + rtol * max(|a|, |b|)`.
pub fn close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= atol + rtol * a.abs().max(b.abs())
}

//! Iterative projection-pursuit density factorization.
//!
//! Starting from an i.i.d. sample of an unknown density `f` and an elliptical
//! instrumental density `g` with matching first and second moments, the
//! algorithm searches the unit sphere for directions `a` along which the
//! one-dimensional marginal of `f` differs most from that of `g`, then absorbs
//! the discrepancy into a multiplicative update
//! `g^(k) = g^(k-1) · f_{a_k} / g^(k-1)_{a_k}`. A normal-approximation test on
//! the relative-entropy criterion decides when the residual divergence is
//! statistically zero, at which point the recovered directions span the
//! subspace on which `f` deviates from ellipticity.
//!
//! The crate is `no_std` + `alloc`; all transcendental math goes through
//! [`libm`] so results are bit-identical across platforms given a seed. IO,
//! configuration, and parallel execution live in the companion `ppfactor`
//! crate.
//!
//! Module map:
//! - [`distributions`]: elliptical family, Gumbel, product densities, sampling;
//! - [`kde`]: Gaussian-product kernel estimators and sample truncation;
//! - [`divergence`]: the convex integrand, analytic KL, and the empirical
//!   direction criteria for both iteration schemes;
//! - [`optimizer`]: simulated annealing with polish on the unit sphere;
//! - [`pursuit`]: transformed densities, the stopping test, and the full loop.

#![no_std]
#![deny(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

use alloc::string::String;
use core::fmt;

pub mod distributions;
pub mod divergence;
pub mod kde;
pub mod linalg;
pub mod math;
pub mod optimizer;
pub mod pursuit;
pub mod rng;

/// Errors surfaced by construction and evaluation routines.
///
/// Numerical preconditions are checked at construction time wherever possible
/// so that hot evaluation paths stay infallible.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A scale matrix failed the Cholesky factorization (not symmetric
    /// positive-definite).
    NotPositiveDefinite,
    /// A general square matrix was singular to working precision.
    SingularMatrix,
    /// An argument violated a documented precondition.
    InvalidArgument(String),
    /// Sample truncation left fewer than `d + 2` usable points.
    TruncationTooAggressive {
        /// Points surviving the floor on the smaller side.
        survivors: usize,
        /// Required minimum, `d + 2`.
        required: usize,
    },
    /// A non-finite value appeared where a finite one was required.
    NonFinite {
        /// Description of the offending quantity, with location if known.
        what: String,
    },
    /// The optimizer saw non-finite objective values on most proposals.
    ObjectiveMostlyNonFinite {
        /// Count of non-finite evaluations.
        bad: usize,
        /// Total evaluations attempted.
        total: usize,
    },
    /// Rejection sampling acceptance fell below the workable floor.
    AcceptanceTooLow {
        /// Observed acceptance rate.
        rate: f64,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::NotPositiveDefinite => {
                write!(f, "scale matrix is not symmetric positive-definite")
            }
            Error::SingularMatrix => write!(f, "matrix is singular to working precision"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::TruncationTooAggressive { survivors, required } => write!(
                f,
                "truncation too aggressive: {survivors} survivors, need at least {required}"
            ),
            Error::NonFinite { what } => write!(f, "non-finite value: {what}"),
            Error::ObjectiveMostlyNonFinite { bad, total } => write!(
                f,
                "objective returned non-finite values on {bad} of {total} evaluations"
            ),
            Error::AcceptanceTooLow { rate } => write!(
                f,
                "rejection-sampling acceptance rate {rate:.2e} below 1e-3; \
                 the proposal envelope no longer covers the target"
            ),
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = core::result::Result<T, Error>;

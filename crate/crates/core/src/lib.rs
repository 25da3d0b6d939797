//! Quantized Markov chain couplings.
//!
//! A coupling of an ergodic chain `P` is turned into a linear map on
//! density matrices whose fixed point is the qsample `|√π⟩⟨√π|`. This crate
//! builds the chains, couplings and maps, and checks the structural facts
//! that make the construction work: trace preservation, complete
//! positivity (for independent and grand couplings), the fixed point, and
//! the bound tying quantum convergence to classical coalescence.
//!
//! Modules follow the pipeline:
//!
//! * [`chain`]: transition matrices, stationary distributions, mixing.
//! * [`coupling`]: coupling matrices, random mapping representations,
//!   coalescence tails (exact and Monte Carlo).
//! * [`quantize`]: the superoperators `C*`, `T*`, `T`, Kraus sets, Choi
//!   matrices.
//! * [`evolve`]: density-matrix evolution and convergence checks.
//! * [`models`]: hypercube, biased cycle, colorings, hardcore.
//! * [`dilation`]: statevector simulation of Kraus channels through
//!   block-encodings and oblivious amplitude amplification.
//!
//! The crate is `no_std` and only needs `alloc`. File formats, the
//! parallel Monte Carlo driver and the command-line tool live in the
//! `qcoupling` crate.

#![cfg_attr(not(test), no_std)]
// `!(x >= 0.0)` tests reject NaN; index loops mirror the matrix formulas.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;

pub mod chain;
pub mod check;
pub mod coupling;
pub mod dilation;
mod error;
pub mod evolve;
pub mod linalg;
pub(crate) mod math;
pub mod models;
pub mod quantize;
pub mod rng;

pub use check::CheckResult;
pub use error::{Error, Result};
pub use linalg::Matrix;

/// Absolute tolerance applied to structural checks on inputs.
pub const INPUT_TOL: f64 = 1e-12;

/// Absolute tolerance applied to computed quantities.
pub const COMPUTED_TOL: f64 = 1e-10;

/// Size limits for the dense and exact code paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Guards {
    /// Largest `N` for exact coalescence tails (pair space has `N²` states).
    pub exact_states: usize,
    /// Largest `N` for dense `N² × N²` superoperators and Choi matrices.
    pub superop_states: usize,
    /// Largest `N` for a dense `N × N` transition matrix.
    pub dense_states: usize,
    /// Largest total dimension `κ·2d` of a simulated dilation.
    pub dilation_dim: usize,
    /// Largest number of raw configurations a model may enumerate.
    pub enumeration: usize,
}

impl Default for Guards {
    fn default() -> Self {
        Self {
            exact_states: 64,
            superop_states: 32,
            dense_states: 1024,
            dilation_dim: 4096,
            enumeration: 1 << 24,
        }
    }
}

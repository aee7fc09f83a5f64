//! Discrete-time laboratory for mean-field BSDE systems and McKean-Vlasov BSDEs.
//!
//! The crate builds finite-support martingale drivers, computes their
//! deterministic characteristics, solves the backward equations by Picard
//! iteration on exact scenario trees or regression Monte Carlo ensembles,
//! and measures contraction, propagation-of-chaos and stability behaviour.
//!
//! Module map:
//!
//! - [`drivers`]: increment laws, grids, characteristics, trees and ensembles.
//! - [`calculus`]: weight process, stochastic exponential, Γ, norms, the
//!   contraction constant and the assumption validator.
//! - [`engine`]: martingale decomposition and the Picard solvers.
//! - [`measures`]: Wasserstein distances and the dyadic sample-size bound.
//! - [`stability_lab`]: data sequences and the `(k, N)` sweeps.
//! - [`cli`]: config format and the command-line front end.

pub mod calculus;
pub mod cli;
pub mod drivers;
pub mod engine;
pub mod error;
pub mod measures;
mod numeric;
pub mod stability_lab;

pub use error::{Error, Result};

//! A numerical laboratory for the topological conjugacy between a
//! contracting non-autonomous linear ODE `x' = A(t) x` and its Lipschitz
//! perturbation `x' = A(t) x + f(t, x)`.
//!
//! The crate constructs the conjugating homeomorphism H by a truncated
//! Green integral along the backward nonlinear flow, its inverse G by
//! Picard iteration on the fixed-point integral equation, and then
//! measures the sharp regularity of the pair empirically: H comes out
//! exactly Lipschitz (continuous but with mismatched one-sided
//! derivatives), G Hölder continuous with diverging difference quotients.
//! Closed-form counterexample maps serve as ground truth throughout.

pub mod assumptions;
pub mod cli;
pub mod conjugacy;
pub mod dynamics;
pub mod error;
pub mod numerics;
pub mod oracles;
pub mod regularity;

pub use error::{Error, Result};

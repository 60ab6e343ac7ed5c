//! Numerical tools for deciding, at desk scale, whether a spray (or a
//! projective class of sprays) is the geodesic class of a Finsler function.
//!
//! The crate verifies the Helmholtz-like multiplier conditions, reconstructs
//! candidate Finsler functions from admissible multipliers, classifies them
//! (positivity, strong convexity), covers the special two-dimensional theory,
//! and integrates geodesics with a geodesic-convexity estimate. All
//! derivatives come from truncated Taylor arithmetic ([`jet`]); finite
//! differences appear only in test oracles.

pub mod catalog;
pub mod error;
pub mod expr;
pub mod field;
pub mod finsler;
pub mod geodesics;
pub mod geometry;
pub mod jet;
pub mod multiplier;
pub mod ode;
pub mod phase;
pub mod planar;
pub mod reconstruct;
pub mod report;
pub mod sampling;

pub use error::{Error, Result};
pub use phase::PhasePoint;
pub use report::{CheckRecord, DiagnosticReport};

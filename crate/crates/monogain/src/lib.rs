//! Analysis toolkit for monotone input/output systems under negative
//! feedback.
//!
//! The library builds models of the form `dx/dt = f(x, u)`, `y = h(x)` from a
//! small text format, checks order-related structure (quasi-monotonicity,
//! input/output monotonicity with respect to orthant orders), computes
//! input/output characteristics and their fixed points, and runs the
//! small-gain analysis that decides global convergence of the negative
//! feedback closed loop. A doubled cascade construction turns the
//! anti-monotone loop into a monotone one; delay experiments show the same
//! fixed-point data predicting oscillation-like transients under transport
//! delay.

// Integration errors carry the partial trajectory computed before the
// failure so callers can inspect or persist it; the large Err variants are
// the point, not an accident.
#![allow(clippy::result_large_err)]

pub mod characteristic;
pub mod delay;
pub mod expr;
pub mod extended;
pub mod integrate;
pub mod linear;
pub mod model;
pub mod order;

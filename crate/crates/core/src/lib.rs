//! Safety and stability for impulsively actuated systems with a minimum dwell
//! time between impulses.
//!
//! The crate provides an impulsive hybrid-system simulator, bounding functions
//! that certify barrier and Lyapunov behavior over coasting intervals, the
//! invariance and stability conditions built from them, an optimization-based
//! impulse controller, and a planar two-body docking benchmark with a sweep
//! harness.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bounding;
pub mod controller;
pub mod docking;
pub mod error;
pub mod harness;
pub mod hybrid;
pub mod linalg;
pub mod nelder_mead;
pub mod parallel;
pub mod safety;
pub mod stability;
pub mod stabilizer;
pub mod trajectory;

pub use error::{Error, Result};

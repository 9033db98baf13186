//! Fault localization and repair for deep-learning models damaged during
//! conversion between frameworks.
//!
//! A *source* model is trusted; a *target* model is its converted counterpart.
//! [`localize`] diffs the two and ranks suspicious layers, [`repair`] rewrites
//! the target, and [`engine`] runs the iterative repair loop until target
//! labels agree with the source on a dataset.

pub mod engine;
pub mod inject;
pub mod interp;
pub mod ir;
pub mod localize;
pub mod repair;
pub mod stats;

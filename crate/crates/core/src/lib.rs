//! Functional mixture discriminant analysis with hidden logistic process
//! regression.
//!
//! Each class of curves is modeled as a mixture of sub-classes; each
//! sub-class is a piecewise polynomial regression whose regime switches are
//! governed by a logistic process over time. New curves are assigned by
//! maximum a posteriori over class-conditional densities.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod basis;
pub mod curves;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod fmda;
pub mod logistic;
pub mod mixrhlp;
pub mod numeric;
pub mod seed;
pub mod selection;

pub use error::{Error, Result};

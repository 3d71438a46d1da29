//! Multiresolution random-walker segmentation on graphs of volume samples.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod constrained;
pub mod error;
pub mod hcrf;
pub mod hyperopt;
pub mod mesh;
pub mod par;
pub mod phantom;
pub mod pipeline;
pub mod pyramid;
pub mod robust;
pub mod samples;
pub mod sir;
pub mod solver;
pub mod sparse;
pub mod volume;

pub use error::{Error, Result};

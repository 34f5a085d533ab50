//! Robot kinematic self-calibration.
//!
//! Kinematic chains are closed four ways (self-contact, contact with a
//! plane, self-observation by a camera and external 3D metrology), all
//! closures are stacked into one weighted least-squares problem, and the
//! identification Jacobian is analysed for observability.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimator;
pub mod kinecore;
pub mod measurements;
pub mod observability;
pub mod sensemodel;
pub mod simlab;

pub use error::{Error, Result};

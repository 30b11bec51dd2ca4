#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod collision;
pub mod config;
pub mod convergence;
pub mod diagnostics;
pub mod ensemble;
pub mod error;
pub mod fields;
pub mod io;
pub mod oracle;
pub mod rng;
pub mod sde;
pub mod summation;
pub mod verify;

pub use error::{Error, Result};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

//! Fluorescence-lifetime estimation laboratory.

pub mod attention;
pub mod container;
pub mod error;
pub mod eval;
pub mod fit;
pub mod model;
pub mod rng;
pub mod sim;
pub mod suite;
pub mod svg;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

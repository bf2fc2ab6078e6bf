//! Certified, patch-based unlearning for ReLU classifiers.

pub mod bounds;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod geometry;
pub mod linprog;
pub mod model_file;
pub mod net;
pub mod par;
pub mod patching;
pub mod unlearning;

pub use error::{Error, Result};

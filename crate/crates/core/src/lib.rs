//! Joint modelling of lab trajectories, measurement patterns and survival
//! from sparse in-hospital records.

pub mod autodiff;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod heads;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};

//! Masked attribute description embedding for cloth-changing person
//! re-identification.

pub mod analyzer;
pub mod attribute_schema;
pub mod benchmark;
pub mod checkpoint;
pub mod config;
pub mod dem;
pub mod error;
pub mod evalproto;
pub mod losses;
pub mod model;
pub mod registry;
pub mod rng;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};

//! Reference-guided object segmentation on synthetic moving-shapes data:
//! one network segments a target object in images or videos given a
//! language reference, a mask reference, or both.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod detector;
pub mod encoders;
pub mod error;
pub mod evaluate;
pub mod geometry;
pub mod losses;
pub mod inference;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod posenc;
pub mod scene;
pub mod tasks;
pub mod trainer;
pub mod unifusion;
pub mod vocab;

pub use error::{CoreError, Result};

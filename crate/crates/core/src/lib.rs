//! Multi-task atrous-pyramid segmentation engine.

pub mod data;
pub mod error;
pub mod gradcam;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod rf;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

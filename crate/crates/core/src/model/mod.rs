//! Shared bottleneck encoder with one ASPP decoder per task.

pub mod checkpoint;
mod layers;
mod net;
pub mod spec;

pub use checkpoint::{BlobEntry, BlobKind, Manifest};
pub use net::{DecoderOutput, ModelState, MultiTaskNet, TaskLogits};
pub use spec::{AsppRates, ModelSpec, Task, INPUT_MULTIPLE, OUTPUT_STRIDE};

#[cfg(test)]
mod tests;

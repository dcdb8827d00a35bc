//! File formats: tensor containers, detection records, configs and manifests.

pub mod config;
pub mod container;
pub mod layout;
pub mod records;

pub use config::{Config, RunManifest};
pub use container::{Dtype, Tensor, TensorContainer, TensorData};
pub use records::DetectionRecord;

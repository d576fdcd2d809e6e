//! On-disk formats (single tensors, named-tensor containers, dataset
//! manifests), in-memory datasets and the synthetic dataset generator.

mod container;
mod dataset;
mod manifest;
mod synth;
mod tensorfile;

pub use container::{Container, CONTAINER_MAGIC};
pub use dataset::{Dataset, FeatureSource};
pub use manifest::{load_manifest, Manifest};
pub use synth::{class_name, gen_synthetic, synthesize, SynthConfig, SynthDataset};
pub use tensorfile::{decode_tensor, encode_tensor, read_tensor, write_tensor, MAX_RANK, TENSOR_MAGIC};

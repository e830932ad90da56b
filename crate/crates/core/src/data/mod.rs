//! Dataset manifests, tensor files, preprocessing recipes, and synthetic data.

pub mod manifest;
pub mod raster;
pub mod recipes;
pub mod store;
pub mod subset;
pub mod synth;
pub mod tensor_file;

pub use manifest::{DatasetManifest, SampleRecord, Split};
pub use subset::subset_manifest;
pub use synth::{generate_synthetic, SynthConfig};

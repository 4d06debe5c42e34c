//! Tensor files, dataset manifests and synthetic data.

pub mod manifest;
pub mod npy;
pub mod synth;

pub use manifest::{load_manifest, save_manifest, Manifest, ManifestHeader, Sample, SampleRecord};
pub use npy::{read_npy, write_npy, Dtype, NpyArray};
pub use synth::{gen_synthetic, load_truth, FamilySpec, SynthConfig, SynthOutput, TruthRecord};

//! File formats and ingestion: tensor files, manifests, layouts, latent banks.

pub mod bank;
pub mod layout;
pub mod manifest;
pub mod tensor;

pub use bank::{load_latent_bank, save_latent_bank, LatentBank, TrainStats};
pub use layout::{read_layout, write_layout, SensorLayout};
pub use manifest::{
    manifest_to_string, parse_manifest, read_manifest, write_manifest, Manifest,
    PresentationRecord, SplitTag,
};
pub use tensor::{read_header, read_tensor, read_tensor_f64, write_tensor, write_tensor_f64, TensorHeader};

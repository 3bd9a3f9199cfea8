//! Image files, dataset manifests, and the synthetic expert generator.

mod image;
mod manifest;
pub mod synth;

pub use image::{load_image, quantize, resize_to_lowres, save_image};
pub use manifest::{combine_experts, load_manifest, write_manifest, Dataset, ImagePair};

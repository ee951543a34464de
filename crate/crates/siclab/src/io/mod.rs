//! File formats and run metadata.

pub mod manifest;
pub mod ppm;

#[cfg(feature = "png")]
pub mod png_in;

pub use manifest::RunManifest;
pub use ppm::{load_image, read_ppm, rgb8_to_tensor, save_image, tensor_to_rgb8, write_ppm};

//! Codec model: configuration, parameter store, and the transform networks.

pub mod config;
pub mod params;
pub mod pipeline;
pub mod transforms;

pub use config::CodecConfig;
pub use params::{layer_table, LayerSpec, ModelParams, ParamVars};
pub use pipeline::{decode_image, encode_image, DecodedImage, EncodedImage};
pub use transforms::{
    analysis, context_features, context_mask, crop_image, entropy_params, hyper_analysis,
    hyper_synthesis, masked_context_kernel, pad_image, synthesis,
};

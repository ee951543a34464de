//! Exact entropy coding and the differentiable rate model.
//!
//! A 64-bit range coder writes symbols under quantized Gaussian CDF tables;
//! the same tables drive the ideal-self-information accounting that the rate
//! tests compare against. Training never touches the coder — it uses the
//! continuous likelihood in [`rate`].

pub mod bitstream;
pub mod cdf;
pub mod hyper;
pub mod latent;
pub mod range;
pub mod rate;

pub use bitstream::{Bitstream, StreamHeader, StreamKind};
pub use cdf::{build_cdf, CdfTable, CDF_TOTAL};
pub use hyper::{channel_tables, decode_hyper, encode_hyper, ChannelPrior};
pub use latent::{decode_latents, encode_latents, hyper_priors, LatentCode, SerialMuSigma};
pub use range::{RangeDecoder, RangeEncoder};
pub use rate::{rate_bits_var, rate_estimate, LIKELIHOOD_FLOOR};

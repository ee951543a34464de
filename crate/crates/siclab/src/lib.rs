//! Desk-scale laboratory for successive image compression (SIC) with learned
//! transform codecs.
//!
//! The library trains small convolutional transform codecs end-to-end, runs
//! real range-coded bitstreams through repeated decompress–recompress cycles,
//! and measures how reconstruction quality drifts across generations under
//! different quantization strategies (corrected vs. straight), training
//! relaxations (uniform noise vs. straight-through estimation), reversibility
//! constraints, and latent channel budgets.

pub mod codec;
pub mod coder;
pub mod error;
pub mod harness;
pub mod inn;
pub mod io;
pub mod quant;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::SicError;

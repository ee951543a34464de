//! Full hyperparameter record for one codec model.
//!
//! The config serializes to a canonical JSON byte string (fixed field order,
//! plain JSON numbers); its 64-bit FNV-1a hash goes into every bitstream and
//! checkpoint so decoders can refuse mismatched models.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SicError};
use crate::quant::{QuantMode, TrainRelax};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// mid-layer channel count
    pub n: usize,
    /// latent channel count — the channel-relaxation knob
    pub m: usize,
    /// RD trade-off weight
    pub lambda: f64,
    /// reversibility-loss weight (0 disables the term)
    pub alpha: f64,
    pub quant_mode: QuantMode,
    pub train_relax: TrainRelax,
    pub context_enabled: bool,
    pub seed: u64,
    pub sigma_floor: f64,
    pub latent_clip: i32,
}

impl CodecConfig {
    /// Toy-scale baseline: N=64, corrected quantization with noise
    /// relaxation and the context model on.
    pub fn toy(m: usize, lambda: f64, seed: u64) -> CodecConfig {
        CodecConfig {
            n: 64,
            m,
            lambda,
            alpha: 0.0,
            quant_mode: QuantMode::Corrected,
            train_relax: TrainRelax::Noise,
            context_enabled: true,
            seed,
            sigma_floor: 0.04,
            latent_clip: 255,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 8 || self.m < 8 {
            return Err(SicError::config(format!(
                "channel counts too small: n={} m={} (both must be ≥ 8)",
                self.n, self.m
            )));
        }
        if !(self.lambda > 0.0) {
            return Err(SicError::config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.alpha >= 0.0) {
            return Err(SicError::config(format!("alpha must be ≥ 0, got {}", self.alpha)));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(SicError::config(format!(
                "sigma_floor must be > 0, got {}",
                self.sigma_floor
            )));
        }
        if self.latent_clip < 1 || self.latent_clip > 4096 {
            return Err(SicError::config(format!(
                "latent_clip {} outside [1, 4096]",
                self.latent_clip
            )));
        }
        Ok(())
    }

    /// Hyper-latent channel count: max(8, M/4).
    pub fn hyper_channels(&self) -> usize {
        (self.m / 4).max(8)
    }

    /// Canonical serialized form (struct field order, compact separators).
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<CodecConfig> {
        let cfg: CodecConfig =
            serde_json::from_str(s).map_err(|e| SicError::config(format!("bad config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// FNV-1a 64 over the canonical JSON bytes.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.canonical_json().as_bytes())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

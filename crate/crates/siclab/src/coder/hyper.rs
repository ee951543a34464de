//! Side-information coding: hyper-latents under a learned per-channel prior.
//!
//! Each hyper channel owns a trainable (μ, σ) pair; its CDF table codes every
//! spatial position of that channel identically (an i.i.d. model, so the
//! coded size is invariant to where values sit inside a channel).

use super::cdf::{build_cdf, CdfTable};
use super::range::{RangeDecoder, RangeEncoder};
use crate::error::{Result, SicError};

/// Trainable static prior of one hyper channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelPrior {
    pub mu: f32,
    pub sigma: f32,
}

pub fn channel_tables(priors: &[ChannelPrior], clip: i32) -> Vec<CdfTable> {
    priors.iter().map(|p| build_cdf(p.mu, p.sigma, clip)).collect()
}

/// Encode `symbols` laid out channel-major (`channels` × `plane`).
pub fn encode_hyper(
    symbols: &[i32],
    channels: usize,
    plane: usize,
    priors: &[ChannelPrior],
    clip: i32,
) -> Result<Vec<u8>> {
    if symbols.len() != channels * plane || priors.len() != channels {
        return Err(SicError::config(format!(
            "encode_hyper: {} symbols, {} priors for {channels}x{plane}",
            symbols.len(),
            priors.len()
        )));
    }
    if symbols.is_empty() {
        return Ok(Vec::new());
    }
    let tables = channel_tables(priors, clip);
    let mut enc = RangeEncoder::new();
    for c in 0..channels {
        let table = &tables[c];
        for &s in &symbols[c * plane..(c + 1) * plane] {
            enc.encode_symbol(s, table);
        }
    }
    Ok(enc.finish())
}

/// Inverse of [`encode_hyper`]; the caller supplies the grid dimensions from
/// the model configuration.
pub fn decode_hyper(
    bytes: &[u8],
    channels: usize,
    plane: usize,
    priors: &[ChannelPrior],
    clip: i32,
) -> Result<Vec<i32>> {
    if priors.len() != channels {
        return Err(SicError::config(format!(
            "decode_hyper: {} priors for {channels} channels",
            priors.len()
        )));
    }
    let count = channels * plane;
    if count == 0 {
        return Ok(Vec::new());
    }
    let tables = channel_tables(priors, clip);
    let mut dec = RangeDecoder::new(bytes);
    let mut out = Vec::with_capacity(count);
    for c in 0..channels {
        let table = &tables[c];
        for i in 0..plane {
            let sym = dec.decode_symbol(table).ok_or(SicError::Decode {
                position: c * plane + i,
                msg: "hyper segment exhausted or corrupt".into(),
            })?;
            out.push(sym);
        }
    }
    Ok(out)
}

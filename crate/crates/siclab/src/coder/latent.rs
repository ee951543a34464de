//! Serial latent coding: the raster-order encode/decode loops that tie the
//! context model, the parameter head, and the range coder together.
//!
//! The decoder must regenerate the encoder's (μ, σ) tables bit-for-bit from
//! partially decoded latents. Both sides therefore evaluate the networks with
//! the same accumulation chains: [`crate::tensor::kernels::conv2d_at`] for
//! every convolution tap and the shared scalar nonlinearities from the tape.

use super::cdf::{build_cdf, CdfTable};
use super::hyper::ChannelPrior;
use super::range::{RangeDecoder, RangeEncoder};
use crate::codec::transforms::{masked_context_kernel, LEAKY_SLOPE};
use crate::codec::{CodecConfig, ModelParams};
use crate::error::{Result, SicError};
use crate::quant::{corrected_quantize, straight_quantize, QuantMode};
use crate::tensor::kernels::conv2d_at;
use crate::tensor::tape::{leaky_relu_scalar, softplus_stable};
use crate::tensor::Tensor;

/// Per-channel static priors for the hyper latents: μ taken directly from the
/// learned table, σ floored the same way as the conditional σ head.
pub fn hyper_priors(cfg: &CodecConfig, params: &ModelParams) -> Result<Vec<ChannelPrior>> {
    let mu = params.get("hyper_prior.mu")?;
    let raw = params.get("hyper_prior.sigma_raw")?;
    let floor = cfg.sigma_floor as f32;
    Ok(mu
        .data()
        .iter()
        .zip(raw.data())
        .map(|(&m, &r)| ChannelPrior {
            mu: m,
            sigma: softplus_stable(r) + floor,
        })
        .collect())
}

/// Per-position evaluator for (μ, σ) on the latent grid. Holds the fused
/// feature buffer ([hyper ‖ context] channels) and the g_ep weights; context
/// features are recomputed from ŷ at each call, so interleaving calls with
/// symbol decoding reproduces full-image evaluation bit-for-bit.
pub struct SerialMuSigma<'a> {
    m: usize,
    n: usize,
    fused_c: usize,
    lh: usize,
    lw: usize,
    ctx: Option<(Tensor<f32>, &'a [f32])>, // (masked 5×5 kernel, bias)
    w0: &'a [f32],
    b0: &'a [f32],
    w1: &'a [f32],
    b1: &'a [f32],
    sigma_floor: f32,
    fused: Vec<f32>,
    hidden: Vec<f32>,
}

impl<'a> SerialMuSigma<'a> {
    pub fn new(
        cfg: &CodecConfig,
        params: &'a ModelParams,
        hyper_feature: &Tensor<f32>,
    ) -> Result<SerialMuSigma<'a>> {
        let hs = hyper_feature.shape();
        if hs.len() != 4 || hs[0] != 1 || hs[1] != cfg.n {
            return Err(SicError::config(format!(
                "hyper feature shape {:?} does not match n={}",
                hs, cfg.n
            )));
        }
        let (lh, lw) = (hs[2], hs[3]);
        let fused_c = if cfg.context_enabled { 2 * cfg.n } else { cfg.n };
        let mut fused = vec![0.0f32; fused_c * lh * lw];
        fused[..cfg.n * lh * lw].copy_from_slice(hyper_feature.data());
        let ctx = if cfg.context_enabled {
            Some((
                masked_context_kernel(params.get("g_cm.w")?),
                params.get("g_cm.b")?.data(),
            ))
        } else {
            None
        };
        Ok(SerialMuSigma {
            m: cfg.m,
            n: cfg.n,
            fused_c,
            lh,
            lw,
            ctx,
            fused,
            w0: params.get("g_ep.0.w")?.data(),
            b0: params.get("g_ep.0.b")?.data(),
            w1: params.get("g_ep.1.w")?.data(),
            b1: params.get("g_ep.1.b")?.data(),
            sigma_floor: cfg.sigma_floor as f32,
            hidden: vec![0.0f32; cfg.n * lh * lw],
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.lh, self.lw)
    }

    /// Evaluate μ and σ for every latent channel at one grid position, given
    /// the (partially filled) reconstruction ŷ. Only strictly-past raster
    /// positions of ŷ influence the result.
    pub fn eval_at(
        &mut self,
        yhat: &[f32],
        oy: usize,
        ox: usize,
        mu: &mut [f32],
        sigma: &mut [f32],
    ) {
        debug_assert_eq!(yhat.len(), self.m * self.lh * self.lw);
        debug_assert_eq!(mu.len(), self.m);
        debug_assert_eq!(sigma.len(), self.m);
        let plane = self.lh * self.lw;
        let pos = oy * self.lw + ox;
        if let Some((wm, cb)) = &self.ctx {
            for o in 0..self.n {
                let v = conv2d_at(yhat, self.m, self.lh, self.lw, wm.data(), o, 5, 1, 2, oy, ox)
                    + cb[o];
                self.fused[(self.n + o) * plane + pos] = v;
            }
        }
        for o in 0..self.n {
            let v = conv2d_at(
                &self.fused,
                self.fused_c,
                self.lh,
                self.lw,
                self.w0,
                o,
                1,
                1,
                0,
                oy,
                ox,
            ) + self.b0[o];
            self.hidden[o * plane + pos] = leaky_relu_scalar(v, LEAKY_SLOPE);
        }
        for o in 0..2 * self.m {
            let v = conv2d_at(
                &self.hidden,
                self.n,
                self.lh,
                self.lw,
                self.w1,
                o,
                1,
                1,
                0,
                oy,
                ox,
            ) + self.b1[o];
            if o < self.m {
                mu[o] = v;
            } else {
                sigma[o - self.m] = softplus_stable(v) + self.sigma_floor;
            }
        }
    }
}

/// Result of coding one latent tensor.
pub struct LatentCode {
    pub bytes: Vec<u8>,
    /// Reconstruction the decoder will also produce, bit-for-bit.
    pub yhat: Tensor<f32>,
    pub clip_events: u64,
    /// Σ self-information of the coded symbols under their quantized tables.
    pub info_bits: f64,
}

fn latent_table(mode: QuantMode, mu: f32, sigma: f32, clip: i32) -> CdfTable {
    match mode {
        // residual r = y − μ is coded around zero
        QuantMode::Corrected => build_cdf(0.0, sigma, clip),
        // the rounded latent is coded under the μ-shifted model
        QuantMode::Straight => build_cdf(mu, sigma, clip),
    }
}

/// Encode a latent tensor in raster order, all channels per position.
pub fn encode_latents(
    cfg: &CodecConfig,
    params: &ModelParams,
    hyper_feature: &Tensor<f32>,
    y: &Tensor<f32>,
    mode: QuantMode,
) -> Result<LatentCode> {
    let mut ev = SerialMuSigma::new(cfg, params, hyper_feature)?;
    let (lh, lw) = ev.grid();
    if y.shape() != [1, cfg.m, lh, lw] {
        return Err(SicError::config(format!(
            "latent shape {:?} does not match [1,{},{lh},{lw}]",
            y.shape(),
            cfg.m
        )));
    }
    let plane = lh * lw;
    let clip = cfg.latent_clip;
    let mut yhat = vec![0.0f32; cfg.m * plane];
    let mut clip_events = 0u64;
    let mut info_bits = 0.0f64;
    let mut enc = RangeEncoder::new();
    let (mut mu, mut sigma) = (vec![0.0f32; cfg.m], vec![0.0f32; cfg.m]);
    if plane > 0 {
        for oy in 0..lh {
            for ox in 0..lw {
                ev.eval_at(&yhat, oy, ox, &mut mu, &mut sigma);
                for i in 0..cfg.m {
                    let idx = i * plane + oy * lw + ox;
                    let (q, sym) = match mode {
                        QuantMode::Corrected => {
                            corrected_quantize(y.data()[idx], mu[i], clip, &mut clip_events)
                        }
                        QuantMode::Straight => {
                            straight_quantize(y.data()[idx], clip, &mut clip_events)
                        }
                    };
                    let table = latent_table(mode, mu[i], sigma[i], clip);
                    info_bits += table.self_info_bits(sym);
                    enc.encode_symbol(sym, &table);
                    yhat[idx] = q;
                }
            }
        }
    }
    let bytes = if plane == 0 { Vec::new() } else { enc.finish() };
    Ok(LatentCode {
        bytes,
        yhat: Tensor::new(vec![1, cfg.m, lh, lw], yhat).expect("latent shape"),
        clip_events,
        info_bits,
    })
}

/// Decode a latent tensor; the exact inverse of [`encode_latents`].
pub fn decode_latents(
    cfg: &CodecConfig,
    params: &ModelParams,
    hyper_feature: &Tensor<f32>,
    mode: QuantMode,
    bytes: &[u8],
) -> Result<Tensor<f32>> {
    let mut ev = SerialMuSigma::new(cfg, params, hyper_feature)?;
    let (lh, lw) = ev.grid();
    let plane = lh * lw;
    let clip = cfg.latent_clip;
    let mut yhat = vec![0.0f32; cfg.m * plane];
    if plane == 0 {
        return Ok(Tensor::new(vec![1, cfg.m, lh, lw], yhat).expect("latent shape"));
    }
    let mut dec = RangeDecoder::new(bytes);
    let (mut mu, mut sigma) = (vec![0.0f32; cfg.m], vec![0.0f32; cfg.m]);
    for oy in 0..lh {
        for ox in 0..lw {
            ev.eval_at(&yhat, oy, ox, &mut mu, &mut sigma);
            for i in 0..cfg.m {
                let table = latent_table(mode, mu[i], sigma[i], clip);
                let sym = dec.decode_symbol(&table).ok_or_else(|| {
                    SicError::decode(
                        (oy * lw + ox) * cfg.m + i,
                        format!("corrupt latent stream at grid ({oy},{ox}) channel {i}"),
                    )
                })?;
                yhat[i * plane + oy * lw + ox] = match mode {
                    QuantMode::Corrected => sym as f32 + mu[i],
                    QuantMode::Straight => sym as f32,
                };
            }
        }
    }
    Ok(Tensor::new(vec![1, cfg.m, lh, lw], yhat).expect("latent shape"))
}

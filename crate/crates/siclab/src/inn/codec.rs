//! Encode/decode for the coupling codec. All arithmetic on the coding path
//! runs at 64-bit so the encoder and decoder reproduce each other's entropy
//! parameters bit-for-bit, and the latent stream is a pure function of the
//! quantized latents: the hyper side information is computed from ŷ, not
//! from the unrounded transform output. That choice makes a no-RC recode of
//! a decoded image emit the identical bitstream, which is what the
//! fixed-point experiments measure.

use super::net::{inn_entropy_params_var, inn_forward, inn_hyper_analysis_var, inn_inverse};
use super::{InnConfig, InnModel};
use crate::codec::pipeline::hyper_grid;
use crate::codec::transforms::{crop_image, pad_image};
use crate::coder::bitstream::{OFF_GEOMETRY, OFF_HASH, OFF_KIND, OFF_M};
use crate::coder::{
    build_cdf, channel_tables, decode_hyper, encode_hyper, Bitstream, ChannelPrior, RangeDecoder,
    RangeEncoder, StreamHeader, StreamKind,
};
use crate::error::{Result, SicError};
use crate::quant::straight_quantize_tensor;
use crate::tensor::tape::{softplus_stable, Tape};
use crate::tensor::Tensor;

/// Latent grid for a padded image: one position per 2^stages × 2^stages tile.
pub fn inn_latent_grid(cfg: &InnConfig, pad_h: usize, pad_w: usize) -> (usize, usize) {
    let m = cfg.spatial_multiple();
    (pad_h / m, pad_w / m)
}

/// Per-channel hyper-latent priors from the learned factorized parameters.
pub fn inn_hyper_priors(model: &InnModel) -> Result<Vec<ChannelPrior>> {
    let mu = model.get("hyper_prior.mu")?;
    let raw = model.get("hyper_prior.sigma_raw")?;
    let floor = model.cfg().sigma_floor as f32;
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

/// (μ, σ) tensors on the latent grid, rebuilt from quantized hyper latents.
/// Deterministic 64-bit evaluation: encoder and decoder call this with the
/// same ẑ and get the same tables.
fn entropy_params(
    model: &InnModel,
    zhat: Tensor<f64>,
    lh: usize,
    lw: usize,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let mut tape = Tape::<f64>::new();
    let vars = model.vars(&mut tape, false);
    let zv = tape.constant(zhat);
    let (mu, sigma) = inn_entropy_params_var(&mut tape, &vars, model.cfg(), zv, lh, lw)?;
    Ok((tape.value(mu).clone(), tape.value(sigma).clone()))
}

#[derive(Debug)]
pub struct InnEncoded {
    pub bytes: Vec<u8>,
    /// Integer-valued quantized latents, identical to what the decoder sees.
    pub yhat: Tensor<f64>,
    pub bpp: f64,
    pub clip_events: u64,
    pub latent_info_bits: f64,
    pub hyper_info_bits: f64,
    pub latent_len: usize,
    pub hyper_len: usize,
}

/// Encode one [1,3,H,W] image in [0,1]. Unaligned sizes are edge-padded to
/// the stage multiple; the decoder crops back.
pub fn inn_encode(model: &InnModel, x: &Tensor<f64>) -> Result<InnEncoded> {
    let cfg = model.cfg();
    let s = x.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(SicError::usage(format!("inn_encode: want [1,3,H,W], got {s:?}")));
    }
    if s[2] > u16::MAX as usize || s[3] > u16::MAX as usize {
        return Err(SicError::usage("inn_encode: image dimension exceeds u16"));
    }
    if !x.all_finite() {
        return Err(SicError::numeric("inn_encode: non-finite pixels"));
    }
    let (xp, (orig_h, orig_w)) = pad_image(x, cfg.spatial_multiple());
    let (pad_h, pad_w) = (xp.shape()[2], xp.shape()[3]);
    let (lh, lw) = inn_latent_grid(cfg, pad_h, pad_w);

    let y_val = inn_forward(model, &xp)?;
    if !y_val.all_finite() {
        return Err(SicError::numeric("inn_encode: transform produced non-finite values"));
    }
    let (yhat, ysyms, clip_events) = straight_quantize_tensor(&y_val, cfg.latent_clip);

    // hyper latents from the *quantized* y, so the stream depends on ŷ only
    let z_val = {
        let mut tape = Tape::<f64>::new();
        let vars = model.vars(&mut tape, false);
        let yv = tape.constant(yhat.clone());
        let z = inn_hyper_analysis_var(&mut tape, &vars, yv)?;
        tape.value(z).clone()
    };
    let (zhat, zsyms, z_clips) = straight_quantize_tensor(&z_val, cfg.latent_clip);
    let zc = z_val.shape()[1];
    let zplane = z_val.shape()[2] * z_val.shape()[3];
    let priors = inn_hyper_priors(model)?;
    let hyper_bytes = encode_hyper(&zsyms, zc, zplane, &priors, cfg.latent_clip)?;
    let tables = channel_tables(&priors, cfg.latent_clip);
    let mut hyper_info_bits = 0.0f64;
    for c in 0..zc {
        for &sym in &zsyms[c * zplane..(c + 1) * zplane] {
            hyper_info_bits += tables[c].self_info_bits(sym);
        }
    }

    let (mu, sigma) = entropy_params(model, zhat, lh, lw)?;
    let plane = lh * lw;
    let channels = cfg.latent_channels();
    let mut enc = RangeEncoder::new();
    let mut latent_info_bits = 0.0f64;
    for oy in 0..lh {
        for ox in 0..lw {
            for i in 0..channels {
                let idx = i * plane + oy * lw + ox;
                let table = build_cdf(
                    mu.data()[idx] as f32,
                    sigma.data()[idx] as f32,
                    cfg.latent_clip,
                );
                enc.encode_symbol(ysyms[idx], &table);
                latent_info_bits += table.self_info_bits(ysyms[idx]);
            }
        }
    }
    let latent_bytes = enc.finish();

    let stream = Bitstream {
        header: StreamHeader {
            config_hash: cfg.hash(),
            kind: StreamKind::InnStraight,
            orig_h: orig_h as u16,
            orig_w: orig_w as u16,
            pad_h: pad_h as u16,
            pad_w: pad_w as u16,
            m: channels as u16,
        },
        hyper: hyper_bytes,
        latent: latent_bytes,
    };
    let bpp = stream.bpp();
    let (hyper_len, latent_len) = (stream.hyper.len(), stream.latent.len());
    Ok(InnEncoded {
        bytes: stream.to_bytes()?,
        yhat,
        bpp,
        clip_events: clip_events + z_clips,
        latent_info_bits,
        hyper_info_bits,
        latent_len,
        hyper_len,
    })
}

#[derive(Debug)]
pub struct InnDecoded {
    /// Inverse-transformed image, cropped to original size. Real-valued;
    /// pixel-domain rounding/clipping is a separate explicit step.
    pub x: Tensor<f64>,
    pub yhat: Tensor<f64>,
    pub header: StreamHeader,
    pub bpp: f64,
}

/// Decode a bitstream produced by [`inn_encode`] with the same model.
pub fn inn_decode(model: &InnModel, bytes: &[u8]) -> Result<InnDecoded> {
    let cfg = model.cfg();
    let stream = Bitstream::from_bytes(bytes)?;
    let h = stream.header.clone();
    if h.config_hash != cfg.hash() {
        return Err(SicError::decode(
            OFF_HASH,
            format!(
                "stream was coded under config {:016x}, this model is {:016x}",
                h.config_hash,
                cfg.hash()
            ),
        ));
    }
    if h.kind != StreamKind::InnStraight {
        return Err(SicError::decode(
            OFF_KIND,
            "stream was written by the dense codec; decode it with that pipeline",
        ));
    }
    let channels = cfg.latent_channels();
    if h.m as usize != channels {
        return Err(SicError::decode(
            OFF_M,
            format!("stream codes {} latent channels, model has {channels}", h.m),
        ));
    }
    let mult = cfg.spatial_multiple() as u16;
    if h.pad_h % mult != 0 || h.pad_w % mult != 0 || h.pad_h < h.orig_h || h.pad_w < h.orig_w {
        return Err(SicError::decode(
            OFF_GEOMETRY,
            format!(
                "implausible geometry: orig {}x{}, padded {}x{}",
                h.orig_h, h.orig_w, h.pad_h, h.pad_w
            ),
        ));
    }
    let (lh, lw) = inn_latent_grid(cfg, h.pad_h as usize, h.pad_w as usize);
    let (zh, zw) = hyper_grid(lh, lw);
    let zc = cfg.hyper_channels();

    let priors = inn_hyper_priors(model)?;
    let zsyms = decode_hyper(&stream.hyper, zc, zh * zw, &priors, cfg.latent_clip)?;
    let zhat = Tensor::new(
        vec![1, zc, zh, zw],
        zsyms.iter().map(|&s| s as f64).collect(),
    )
    .expect("hyper grid shape");

    let (mu, sigma) = entropy_params(model, zhat, lh, lw)?;
    let plane = lh * lw;
    let mut dec = RangeDecoder::new(&stream.latent);
    let mut ydata = vec![0.0f64; channels * plane];
    for oy in 0..lh {
        for ox in 0..lw {
            for i in 0..channels {
                let idx = i * plane + oy * lw + ox;
                let table = build_cdf(
                    mu.data()[idx] as f32,
                    sigma.data()[idx] as f32,
                    cfg.latent_clip,
                );
                let sym = dec.decode_symbol(&table).ok_or_else(|| {
                    SicError::decode(
                        (oy * lw + ox) * channels + i,
                        format!("corrupt latent stream at grid ({oy},{ox}) channel {i}"),
                    )
                })?;
                ydata[idx] = sym as f64;
            }
        }
    }
    let yhat = Tensor::new(vec![1, channels, lh, lw], ydata).expect("latent grid shape");

    let x_full = inn_inverse(model, &yhat)?;
    let x = crop_image(&x_full, h.orig_h as usize, h.orig_w as usize);
    if !x.all_finite() {
        return Err(SicError::numeric("inn_decode: inverse produced non-finite values"));
    }
    Ok(InnDecoded {
        x,
        yhat,
        bpp: stream.bpp(),
        header: h,
    })
}

#[derive(Debug)]
pub struct InnCycle {
    pub enc: InnEncoded,
    pub dec: InnDecoded,
}

/// Encode then decode one image against the same model.
pub fn inn_cycle(model: &InnModel, x: &Tensor<f64>) -> Result<InnCycle> {
    let enc = inn_encode(model, x)?;
    let dec = inn_decode(model, &enc.bytes)?;
    Ok(InnCycle { enc, dec })
}

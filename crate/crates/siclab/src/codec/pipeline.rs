//! Whole-image encode/decode: transforms → quantization → entropy coding →
//! self-describing bitstream, and the exact inverse.
//!
//! The decoder recomputes every quantity the encoder used from decoded data
//! only, so a successful round trip guarantees the reconstruction ŷ (and
//! everything downstream of it) is bit-identical on both sides.

use super::config::CodecConfig;
use super::params::ModelParams;
use super::transforms::{analysis, hyper_analysis, hyper_synthesis, pad_image, synthesis};
use crate::coder::hyper::channel_tables;
use crate::coder::{
    decode_hyper, decode_latents, encode_hyper, encode_latents, hyper_priors, Bitstream,
    StreamHeader, StreamKind,
};
use crate::error::{Result, SicError};
use crate::quant::{straight_quantize_tensor, QuantMode};
use crate::tensor::kernels::conv_out_extent;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Latent grid dimensions for a padded image.
pub fn latent_grid(pad_h: usize, pad_w: usize) -> (usize, usize) {
    (pad_h / 16, pad_w / 16)
}

/// Hyper grid dimensions for a latent grid (k3 s1 then two k5 s2 stages).
pub fn hyper_grid(lh: usize, lw: usize) -> (usize, usize) {
    let f = |v| conv_out_extent(conv_out_extent(conv_out_extent(v, 3, 1, 1), 5, 2, 2), 5, 2, 2);
    (f(lh), f(lw))
}

fn kind_for(mode: QuantMode) -> StreamKind {
    match mode {
        QuantMode::Corrected => StreamKind::Corrected,
        QuantMode::Straight => StreamKind::Straight,
    }
}

use crate::coder::bitstream::{OFF_GEOMETRY, OFF_HASH, OFF_KIND, OFF_M};

fn mode_for(kind: StreamKind) -> Result<QuantMode> {
    match kind {
        StreamKind::Corrected => Ok(QuantMode::Corrected),
        StreamKind::Straight => Ok(QuantMode::Straight),
        StreamKind::InnStraight => Err(SicError::decode(
            OFF_KIND,
            "stream was written by the coupling codec; decode it with that pipeline",
        )),
    }
}

/// Hyper feature map synthesized from quantized hyper latents — on a fresh
/// tape with constant parameters, exactly as the decoder will rebuild it.
fn hyper_feature_from(
    params: &ModelParams,
    zhat: Tensor<f32>,
    lh: usize,
    lw: usize,
) -> Result<Tensor<f32>> {
    let mut tape = Tape::new();
    let pv = params.vars(&mut tape, false);
    let zv = tape.constant(zhat);
    let hf = hyper_synthesis(&mut tape, &pv, zv, lh, lw)?;
    Ok(tape.value(hf).clone())
}

#[derive(Debug)]
pub struct EncodedImage {
    pub bytes: Vec<u8>,
    /// Decoder-identical latent reconstruction.
    pub yhat: Tensor<f32>,
    pub bpp: f64,
    pub clip_events: u64,
    /// Σ self-information of latent symbols under their coding tables.
    pub latent_info_bits: f64,
    /// Σ self-information of hyper symbols under the channel priors.
    pub hyper_info_bits: f64,
    pub latent_len: usize,
    pub hyper_len: usize,
}

/// Encode one [1,3,H,W] image in [0,1]. `mode` selects the latent
/// quantization rule; the hyper path is always straight-rounded.
pub fn encode_image(
    cfg: &CodecConfig,
    params: &ModelParams,
    x: &Tensor<f32>,
    mode: QuantMode,
) -> Result<EncodedImage> {
    let s = x.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(SicError::usage(format!("encode_image: want [1,3,H,W], got {s:?}")));
    }
    if s[2] > u16::MAX as usize || s[3] > u16::MAX as usize {
        return Err(SicError::usage("encode_image: image dimension exceeds u16"));
    }
    if !x.all_finite() {
        return Err(SicError::numeric("encode_image: non-finite pixels"));
    }
    let (xp, (orig_h, orig_w)) = pad_image(x, 16);
    let (pad_h, pad_w) = (xp.shape()[2], xp.shape()[3]);
    let (lh, lw) = latent_grid(pad_h, pad_w);

    // analysis + hyper analysis (values only; no gradients recorded)
    let (y_val, z_val) = {
        let mut tape = Tape::new();
        let pv = params.vars(&mut tape, false);
        let xv = tape.constant(xp);
        let y = analysis(&mut tape, &pv, xv)?;
        let z = hyper_analysis(&mut tape, &pv, y)?;
        (tape.value(y).clone(), tape.value(z).clone())
    };
    if !y_val.all_finite() || !z_val.all_finite() {
        return Err(SicError::numeric("encode_image: transform produced non-finite values"));
    }

    // hyper latents: straight rounding under the learned channel priors
    let (zhat, zsyms, z_clips) = straight_quantize_tensor(&z_val, cfg.latent_clip);
    let zc = z_val.shape()[1];
    let zplane = z_val.shape()[2] * z_val.shape()[3];
    let priors = hyper_priors(cfg, params)?;
    let hyper_bytes = encode_hyper(&zsyms, zc, zplane, &priors, cfg.latent_clip)?;
    let tables = channel_tables(&priors, cfg.latent_clip);
    let mut hyper_info_bits = 0.0f64;
    for c in 0..zc {
        for &s in &zsyms[c * zplane..(c + 1) * zplane] {
            hyper_info_bits += tables[c].self_info_bits(s);
        }
    }

    let hf = hyper_feature_from(params, zhat, lh, lw)?;
    let latent = encode_latents(cfg, params, &hf, &y_val, mode)?;

    let stream = Bitstream {
        header: StreamHeader {
            config_hash: cfg.hash(),
            kind: kind_for(mode),
            orig_h: orig_h as u16,
            orig_w: orig_w as u16,
            pad_h: pad_h as u16,
            pad_w: pad_w as u16,
            m: cfg.m as u16,
        },
        hyper: hyper_bytes,
        latent: latent.bytes,
    };
    let bpp = stream.bpp();
    let (hyper_len, latent_len) = (stream.hyper.len(), stream.latent.len());
    Ok(EncodedImage {
        bytes: stream.to_bytes()?,
        yhat: latent.yhat,
        bpp,
        clip_events: latent.clip_events + z_clips,
        latent_info_bits: latent.info_bits,
        hyper_info_bits,
        latent_len,
        hyper_len,
    })
}

#[derive(Debug)]
pub struct DecodedImage {
    /// Synthesized image, cropped to original size. Real-valued — image-domain
    /// rounding/clipping is a separate, explicit step.
    pub x: Tensor<f32>,
    pub yhat: Tensor<f32>,
    pub header: StreamHeader,
    pub bpp: f64,
}

/// Decode a bitstream produced by [`encode_image`] with the same config and
/// parameters.
pub fn decode_image(cfg: &CodecConfig, params: &ModelParams, bytes: &[u8]) -> Result<DecodedImage> {
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
    let mode = mode_for(h.kind)?;
    if h.m as usize != cfg.m {
        return Err(SicError::decode(
            OFF_M,
            format!("stream codes {} latent channels, model has {}", h.m, cfg.m),
        ));
    }
    if h.pad_h % 16 != 0 || h.pad_w % 16 != 0 || h.pad_h < h.orig_h || h.pad_w < h.orig_w {
        return Err(SicError::decode(
            OFF_GEOMETRY,
            format!(
                "implausible geometry: orig {}x{}, padded {}x{}",
                h.orig_h, h.orig_w, h.pad_h, h.pad_w
            ),
        ));
    }
    let (lh, lw) = latent_grid(h.pad_h as usize, h.pad_w as usize);
    let (zh, zw) = hyper_grid(lh, lw);
    let zc = cfg.hyper_channels();

    let priors = hyper_priors(cfg, params)?;
    let zsyms = decode_hyper(&stream.hyper, zc, zh * zw, &priors, cfg.latent_clip)?;
    let zhat = Tensor::new(
        vec![1, zc, zh, zw],
        zsyms.iter().map(|&s| s as f32).collect(),
    )
    .expect("hyper grid shape");

    let hf = hyper_feature_from(params, zhat, lh, lw)?;
    let yhat = decode_latents(cfg, params, &hf, mode, &stream.latent)?;

    let x_full = {
        let mut tape = Tape::new();
        let pv = params.vars(&mut tape, false);
        let yv = tape.constant(yhat.clone());
        let xv = synthesis(&mut tape, &pv, yv)?;
        tape.value(xv).clone()
    };
    let x = super::transforms::crop_image(&x_full, h.orig_h as usize, h.orig_w as usize);
    if !x.all_finite() {
        return Err(SicError::numeric("decode_image: synthesis produced non-finite values"));
    }
    Ok(DecodedImage {
        x,
        yhat,
        bpp: stream.bpp(),
        header: h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> CodecConfig {
        let mut cfg = CodecConfig::toy(16, 0.01, 3);
        cfg.n = 8;
        cfg
    }

    fn rand_img(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f32> {
        let data = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(vec![1, 3, h, w], data).unwrap()
    }

    #[test]
    fn round_trip_with_padding_is_bit_exact_on_latents() {
        let cfg = toy_cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = rand_img(&mut rng, 65, 64);
        for mode in [QuantMode::Corrected, QuantMode::Straight] {
            let enc = encode_image(&cfg, &params, &x, mode).unwrap();
            let dec = decode_image(&cfg, &params, &enc.bytes).unwrap();
            assert_eq!(dec.header.pad_h, 80);
            assert_eq!(dec.header.pad_w, 64);
            assert_eq!(dec.x.shape(), &[1, 3, 65, 64]);
            assert_eq!(dec.yhat.shape(), enc.yhat.shape());
            for (a, b) in dec.yhat.data().iter().zip(enc.yhat.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
            assert!((dec.bpp - enc.bpp).abs() < 1e-12);
            assert!(enc.bpp > 0.0);
        }
    }

    #[test]
    fn encode_is_byte_deterministic() {
        let cfg = toy_cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let x = rand_img(&mut rng, 64, 64);
        let a = encode_image(&cfg, &params, &x, QuantMode::Corrected).unwrap();
        let b = encode_image(&cfg, &params, &x, QuantMode::Corrected).unwrap();
        assert_eq!(a.bytes, b.bytes);
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let cfg = toy_cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let x = rand_img(&mut rng, 32, 32);
        let enc = encode_image(&cfg, &params, &x, QuantMode::Straight).unwrap();
        let mut other = cfg.clone();
        other.lambda = 0.0032;
        let err = decode_image(&other, &params, &enc.bytes).unwrap_err();
        assert!(
            matches!(err, SicError::Decode { position: 6, .. }),
            "got {err:?}"
        );
    }

    #[test]
    fn coupling_streams_are_refused_by_this_pipeline() {
        let cfg = toy_cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let x = rand_img(&mut rng, 32, 32);
        let mut bytes = encode_image(&cfg, &params, &x, QuantMode::Straight)
            .unwrap()
            .bytes;
        bytes[14] = 2; // flip kind byte to the coupling codec
        let err = decode_image(&cfg, &params, &bytes).unwrap_err();
        assert!(
            matches!(err, SicError::Decode { position: 14, .. }),
            "got {err:?}"
        );
    }

    #[test]
    fn stream_length_accounts_header_and_segments() {
        let cfg = toy_cfg();
        let params = ModelParams::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let x = rand_img(&mut rng, 48, 80);
        let enc = encode_image(&cfg, &params, &x, QuantMode::Corrected).unwrap();
        assert_eq!(enc.bytes.len(), 33 + enc.hyper_len + enc.latent_len);
        let bits = (enc.latent_len * 8) as f64;
        assert!(bits >= enc.latent_info_bits * 0.98);
        assert!(bits <= enc.latent_info_bits + 512.0);
    }

    #[test]
    fn grid_helpers_match_network_shapes() {
        assert_eq!(latent_grid(80, 64), (5, 4));
        assert_eq!(hyper_grid(5, 4), (2, 1));
        assert_eq!(hyper_grid(4, 4), (1, 1));
        assert_eq!(hyper_grid(16, 16), (4, 4));
    }
}

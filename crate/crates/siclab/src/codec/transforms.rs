//! The codec networks: analysis/synthesis transforms, hyper transforms,
//! masked context model, and the parameter-fusion head.
//!
//! Everything runs on the autodiff tape — inference uses the same code with
//! parameters recorded as constants, which is what makes training-time and
//! coding-time forward passes bit-identical.

use super::config::CodecConfig;
use super::params::ParamVars;
use crate::error::{Result, SicError};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;

fn conv_block(
    tape: &mut Tape<f32>,
    pv: &ParamVars,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
    act: bool,
) -> Result<Var> {
    let w = pv.get(&format!("{name}.w"))?;
    let b = pv.get(&format!("{name}.b"))?;
    let y = tape.conv2d(x, w, stride, pad)?;
    let yb = tape.bias_add(y, b)?;
    Ok(if act { tape.leaky_relu(yb, LEAKY_SLOPE) } else { yb })
}

fn convt_block(
    tape: &mut Tape<f32>,
    pv: &ParamVars,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
    act: bool,
) -> Result<Var> {
    let w = pv.get(&format!("{name}.w"))?;
    let b = pv.get(&format!("{name}.b"))?;
    let y = tape.conv2d_transpose(x, w, stride, pad)?;
    let yb = tape.bias_add(y, b)?;
    Ok(if act { tape.leaky_relu(yb, LEAKY_SLOPE) } else { yb })
}

/// y = g_a(x): four stride-2 5×5 convs, 16× downsampling.
/// `x` is [B,3,H,W] in [0,1] with H, W multiples of 16.
pub fn analysis(tape: &mut Tape<f32>, pv: &ParamVars, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(SicError::usage(format!("analysis: want [B,3,H,W], got {:?}", s)));
    }
    if s[2] % 16 != 0 || s[3] % 16 != 0 {
        return Err(SicError::usage(format!(
            "analysis: spatial dims {}x{} not multiples of 16 (pad first)",
            s[2], s[3]
        )));
    }
    let a = conv_block(tape, pv, "g_a.0", x, 2, 2, true)?;
    let b = conv_block(tape, pv, "g_a.1", a, 2, 2, true)?;
    let c = conv_block(tape, pv, "g_a.2", b, 2, 2, true)?;
    conv_block(tape, pv, "g_a.3", c, 2, 2, false)
}

/// x̂ = g_s(ŷ): four stride-2 transpose convs, 16× upsampling. Output is not
/// clipped — image-domain rounding and clipping happens in the SIC harness.
pub fn synthesis(tape: &mut Tape<f32>, pv: &ParamVars, yhat: Var) -> Result<Var> {
    let s = tape.shape(yhat).to_vec();
    if s.len() != 4 {
        return Err(SicError::usage(format!("synthesis: want [B,M,h,w], got {:?}", s)));
    }
    let a = convt_block(tape, pv, "g_s.0", yhat, 2, 2, true)?;
    let b = convt_block(tape, pv, "g_s.1", a, 2, 2, true)?;
    let c = convt_block(tape, pv, "g_s.2", b, 2, 2, true)?;
    convt_block(tape, pv, "g_s.3", c, 2, 2, false)
}

/// z = h_a(|y|): k3 s1, k5 s2, k5 s2 — hyper grid is the latent grid /4
/// (ceil division per stage).
pub fn hyper_analysis(tape: &mut Tape<f32>, pv: &ParamVars, y: Var) -> Result<Var> {
    let a = tape.abs(y);
    let b = conv_block(tape, pv, "h_a.0", a, 1, 1, true)?;
    let c = conv_block(tape, pv, "h_a.1", b, 2, 2, true)?;
    conv_block(tape, pv, "h_a.2", c, 2, 2, false)
}

/// hyper_feature = h_s(ẑ), upsampled back to the latent grid
/// (`latent_h` × `latent_w`) and refined by a 3×3 conv.
pub fn hyper_synthesis(
    tape: &mut Tape<f32>,
    pv: &ParamVars,
    zhat: Var,
    latent_h: usize,
    latent_w: usize,
) -> Result<Var> {
    let a = convt_block(tape, pv, "h_s.0", zhat, 2, 2, true)?;
    let b = convt_block(tape, pv, "h_s.1", a, 2, 2, true)?;
    let c = tape.crop_hw(b, latent_h, latent_w)?;
    conv_block(tape, pv, "h_s.2", c, 1, 1, false)
}

/// 0/1 mask of the 5×5 context kernel: strictly-past spatial positions in
/// raster order (all rows above center, plus the left half of the center
/// row), every channel visible at past positions.
pub fn context_mask<T: Scalar>(out_c: usize, in_c: usize) -> Tensor<T> {
    let k = 5usize;
    let center = k / 2;
    let mut data = Vec::with_capacity(out_c * in_c * k * k);
    for _ in 0..out_c * in_c {
        for ky in 0..k {
            for kx in 0..k {
                let past = ky < center || (ky == center && kx < center);
                data.push(if past { T::ONE } else { T::ZERO });
            }
        }
    }
    Tensor::new(vec![out_c, in_c, k, k], data).expect("mask shape")
}

/// Masked kernel values for the serial (per-position) decode path — the same
/// elementwise product the tape applies, so both paths share bit patterns.
pub fn masked_context_kernel(w: &Tensor<f32>) -> Tensor<f32> {
    let mask = context_mask::<f32>(w.shape()[0], w.shape()[1]);
    let data = w
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&a, &b)| a * b)
        .collect();
    Tensor::new(w.shape().to_vec(), data).expect("shape preserved")
}

/// ctx = g_cm(ŷ): one masked 5×5 conv over the full latent grid. At any
/// position the output depends only on strictly-past positions, so the
/// full-image evaluation equals the serial decode evaluation bit-for-bit.
pub fn context_features(tape: &mut Tape<f32>, pv: &ParamVars, yhat: Var) -> Result<Var> {
    let w = pv.get("g_cm.w")?;
    let b = pv.get("g_cm.b")?;
    let ws = tape.shape(w).to_vec();
    let mask = tape.constant(context_mask::<f32>(ws[0], ws[1]));
    let wm = tape.mul(w, mask)?;
    let y = tape.conv2d(yhat, wm, 1, 2)?;
    tape.bias_add(y, b)
}

/// (μ, σ) = g_ep(hyper_feature ⊕ ctx_feature): two 1×1 convs; σ is floored
/// by `sigma_floor + softplus`.
pub fn entropy_params(
    tape: &mut Tape<f32>,
    pv: &ParamVars,
    cfg: &CodecConfig,
    hyper_feature: Var,
    ctx_feature: Option<Var>,
) -> Result<(Var, Var)> {
    let fused = match ctx_feature {
        Some(c) => tape.concat_channels(hyper_feature, c)?,
        None => hyper_feature,
    };
    let h = conv_block(tape, pv, "g_ep.0", fused, 1, 0, true)?;
    let out = conv_block(tape, pv, "g_ep.1", h, 1, 0, false)?;
    let ch = tape.shape(out)[1];
    let m = ch / 2;
    let mu = tape.slice_channels(out, 0, m)?;
    let raw = tape.slice_channels(out, m, ch)?;
    let sp = tape.softplus(raw);
    let sigma = tape.add_scalar(sp, cfg.sigma_floor);
    Ok((mu, sigma))
}

/// Replicate-pad right/bottom to the next multiple of `multiple`. Returns
/// the padded tensor and the original (H, W).
pub fn pad_image<T: Scalar>(x: &Tensor<T>, multiple: usize) -> (Tensor<T>, (usize, usize)) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "pad_image wants [B,C,H,W]");
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if ph == h && pw == w {
        return (x.clone(), (h, w));
    }
    let d = x.data();
    let mut out = Vec::with_capacity(b * c * ph * pw);
    for bc in 0..b * c {
        for y in 0..ph {
            let sy = y.min(h - 1);
            let row = (bc * h + sy) * w;
            for xx in 0..pw {
                out.push(d[row + xx.min(w - 1)]);
            }
        }
    }
    (
        Tensor::new(vec![b, c, ph, pw], out).expect("pad shape"),
        (h, w),
    )
}

/// Top-left crop back to `h` × `w` (inverse of [`pad_image`]).
pub fn crop_image<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = x.shape();
    assert_eq!(s.len(), 4, "crop_image wants [B,C,H,W]");
    assert!(h <= s[2] && w <= s[3]);
    let (b, c) = (s[0], s[1]);
    let d = x.data();
    let mut out = Vec::with_capacity(b * c * h * w);
    for bc in 0..b * c {
        for y in 0..h {
            let row = (bc * s[2] + y) * s[3];
            out.extend_from_slice(&d[row..row + w]);
        }
    }
    Tensor::new(vec![b, c, h, w], out).expect("crop shape")
}

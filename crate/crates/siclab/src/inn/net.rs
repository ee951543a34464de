//! The coupling transform and its hyper networks, built generically over the
//! tape scalar type: training runs at 32-bit, the bijective coding path at
//! 64-bit — same code, same graph.
//!
//! Each coupling block splits the channels in half, leaves one half
//! untouched, and adds a small conv subnet of the untouched half to the
//! other. Blocks alternate which half conditions, so after two blocks every
//! channel has been transformed once. The inverse subtracts the identical
//! subnet output, so a forward/inverse round trip cancels to within one
//! floating-point rounding of the addition — far below the 0.5 quantization
//! margin at 64-bit, which is what makes quantized latents reproduce
//! themselves exactly.

use super::{InnConfig, InnModel, InnVars};
use crate::codec::transforms::LEAKY_SLOPE;
use crate::error::{Result, SicError};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

fn conv<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &InnVars,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
    act: bool,
) -> Result<Var> {
    let w = vars.get(&format!("{name}.w"))?;
    let b = vars.get(&format!("{name}.b"))?;
    let y = tape.conv2d(x, w, stride, pad)?;
    let yb = tape.bias_add(y, b)?;
    Ok(if act { tape.leaky_relu(yb, LEAKY_SLOPE) } else { yb })
}

fn convt<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &InnVars,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
    act: bool,
) -> Result<Var> {
    let w = vars.get(&format!("{name}.w"))?;
    let b = vars.get(&format!("{name}.b"))?;
    let y = tape.conv2d_transpose(x, w, stride, pad)?;
    let yb = tape.bias_add(y, b)?;
    Ok(if act { tape.leaky_relu(yb, LEAKY_SLOPE) } else { yb })
}

/// The additive term t(a): two 3×3 convs with a leaky-ReLU between.
fn subnet<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &InnVars,
    s: usize,
    b: usize,
    a: Var,
) -> Result<Var> {
    let h = conv(tape, vars, &format!("couple.{s}.{b}.0"), a, 1, 1, true)?;
    conv(tape, vars, &format!("couple.{s}.{b}.1"), h, 1, 1, false)
}

/// One additive coupling block. Even blocks condition on the first half and
/// shift the second; odd blocks the other way around. Channel order is
/// preserved, so the inverse is the same routing with a subtraction.
pub(crate) fn couple_block<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &InnVars,
    s: usize,
    b: usize,
    x: Var,
    inverse: bool,
) -> Result<Var> {
    let c = tape.shape(x)[1];
    let half = c / 2;
    let (keep, shift, keep_first) = if b % 2 == 0 {
        (
            tape.slice_channels(x, 0, half)?,
            tape.slice_channels(x, half, c)?,
            true,
        )
    } else {
        (
            tape.slice_channels(x, half, c)?,
            tape.slice_channels(x, 0, half)?,
            false,
        )
    };
    let t = subnet(tape, vars, s, b, keep)?;
    let moved = if inverse {
        tape.sub(shift, t)?
    } else {
        tape.add(shift, t)?
    };
    if keep_first {
        tape.concat_channels(keep, moved)
    } else {
        tape.concat_channels(moved, keep)
    }
}

/// y = f(x): alternating reshuffles and coupling blocks. `x` is [B,3,H,W]
/// with H, W multiples of 2^stages.
pub fn inn_forward_var<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &InnVars,
    cfg: &InnConfig,
    x: Var,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(SicError::usage(format!(
            "coupling forward: want [B,3,H,W], got {s:?}"
        )));
    }
    let mult = cfg.spatial_multiple();
    if s[2] % mult != 0 || s[3] % mult != 0 {
        return Err(SicError::usage(format!(
            "coupling forward: spatial dims {}x{} not multiples of {mult} (pad first)",
            s[2], s[3]
        )));
    }
    let mut cur = x;
    for stage in 0..cfg.stages {
        cur = tape.space_to_depth(cur, 2)?;
        for block in 0..cfg.blocks_per_stage {
            cur = couple_block(tape, vars, stage, block, cur, false)?;
        }
    }
    Ok(cur)
}

/// x = f⁻¹(y): blocks undone in reverse order, then the reshuffle.
pub fn inn_inverse_var<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &InnVars,
    cfg: &InnConfig,
    y: Var,
) -> Result<Var> {
    let s = tape.shape(y).to_vec();
    if s.len() != 4 || s[1] != cfg.latent_channels() {
        return Err(SicError::usage(format!(
            "coupling inverse: want [B,{},h,w], got {s:?}",
            cfg.latent_channels()
        )));
    }
    let mut cur = y;
    for stage in (0..cfg.stages).rev() {
        for block in (0..cfg.blocks_per_stage).rev() {
            cur = couple_block(tape, vars, stage, block, cur, true)?;
        }
        cur = tape.depth_to_space(cur, 2)?;
    }
    Ok(cur)
}

/// z = h_a(|y|): k3 s1, k5 s2, k5 s2 — hyper grid is the latent grid /4.
pub fn inn_hyper_analysis_var<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &InnVars,
    y: Var,
) -> Result<Var> {
    let a = tape.abs(y);
    let b = conv(tape, vars, "h_a.0", a, 1, 1, true)?;
    let c = conv(tape, vars, "h_a.1", b, 2, 2, true)?;
    conv(tape, vars, "h_a.2", c, 2, 2, false)
}

/// (μ, σ) per latent element from the hyper latents, σ floored. No context
/// model: the conditional distribution depends on the side information only,
/// which isolates rounding/clipping error effects from quantization drift.
pub fn inn_entropy_params_var<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &InnVars,
    cfg: &InnConfig,
    z: Var,
    latent_h: usize,
    latent_w: usize,
) -> Result<(Var, Var)> {
    let a = convt(tape, vars, "h_s.0", z, 2, 2, true)?;
    let b = convt(tape, vars, "h_s.1", a, 2, 2, true)?;
    let c = tape.crop_hw(b, latent_h, latent_w)?;
    let f = conv(tape, vars, "h_s.2", c, 1, 1, false)?;
    let h = conv(tape, vars, "h_ep.0", f, 1, 0, true)?;
    let ms = conv(tape, vars, "h_ep.1", h, 1, 0, false)?;
    let cl = cfg.latent_channels();
    let mu = tape.slice_channels(ms, 0, cl)?;
    let raw = tape.slice_channels(ms, cl, 2 * cl)?;
    let sp = tape.softplus(raw);
    let sigma = tape.add_scalar(sp, cfg.sigma_floor);
    Ok((mu, sigma))
}

/// Plain 64-bit evaluation of the forward transform.
pub fn inn_forward(model: &InnModel, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::<f64>::new();
    let vars = model.vars(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = inn_forward_var(&mut tape, &vars, model.cfg(), xv)?;
    Ok(tape.value(y).clone())
}

/// Plain 64-bit evaluation of the inverse transform.
pub fn inn_inverse(model: &InnModel, y: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut tape = Tape::<f64>::new();
    let vars = model.vars(&mut tape, false);
    let yv = tape.constant(y.clone());
    let x = inn_inverse_var(&mut tape, &vars, model.cfg(), yv)?;
    Ok(tape.value(x).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inn::test_util::{perturbed_model, small_cfg};
    use crate::inn::InnModel;
    use crate::tensor::kernels;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_img(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::new(vec![1, 3, h, w], data).unwrap()
    }

    #[test]
    fn zero_subnets_make_forward_a_pure_reshuffle() {
        let cfg = small_cfg(1);
        let model = InnModel::init(&cfg).unwrap();
        let x = rand_img(2, 8, 12);
        let y = inn_forward(&model, &x).unwrap();
        assert_eq!(y.shape(), &[1, 48, 2, 3]);
        let r1 = kernels::space_to_depth(x.data(), 1, 3, 8, 12, 2);
        let expect = kernels::space_to_depth(&r1, 1, 12, 4, 6, 2);
        for (a, b) in y.data().iter().zip(&expect) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // and the inverse restores the input bit-exactly
        let back = inn_inverse(&model, &y).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn random_weight_round_trip_stays_below_1e9() {
        let cfg = small_cfg(4);
        let model = perturbed_model(&cfg, 0.2);
        for seed in 0..3u64 {
            let x = rand_img(10 + seed, 16, 8);
            let y = inn_forward(&model, &x).unwrap();
            let back = inn_inverse(&model, &y).unwrap();
            let mut worst = 0.0f64;
            for (a, b) in back.data().iter().zip(x.data()) {
                worst = worst.max((a - b).abs());
            }
            assert!(worst < 1e-9, "round-trip error {worst}");
            // the transform did something: y differs from the pure reshuffle
            let r1 = kernels::space_to_depth(x.data(), 1, 3, 16, 8, 2);
            let r = kernels::space_to_depth(&r1, 1, 12, 8, 4, 2);
            assert!(y.data().iter().zip(&r).any(|(a, b)| (a - b).abs() > 1e-3));
        }
    }

    #[test]
    fn coupling_preserves_the_untouched_half_exactly() {
        let cfg = small_cfg(6);
        let model = perturbed_model(&cfg, 0.3);
        let mut tape = Tape::<f64>::new();
        let vars = model.vars(&mut tape, false);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = cfg.stage_channels(0);
        let x = Tensor::new(
            vec![1, c, 4, 4],
            (0..c * 16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let xv = tape.constant(x.clone());
        // even block: first half conditions and must pass through untouched
        let out = couple_block(&mut tape, &vars, 0, 0, xv, false).unwrap();
        let ov = tape.value(out);
        let half = c / 2 * 16;
        for i in 0..half {
            assert_eq!(ov.data()[i].to_bits(), x.data()[i].to_bits());
        }
        assert!((half..c * 16).any(|i| ov.data()[i] != x.data()[i]));
    }

    #[test]
    fn misaligned_input_is_a_usage_error() {
        let cfg = small_cfg(3);
        let model = InnModel::init(&cfg).unwrap();
        let x = rand_img(1, 6, 8); // 6 is not a multiple of 4
        match inn_forward(&model, &x) {
            Err(SicError::Usage(msg)) => assert!(msg.contains("multiple")),
            other => panic!("expected usage error, got {other:?}"),
        }
    }

    #[test]
    fn training_precision_graph_matches_values_closely() {
        // the f32 training graph and the f64 coding graph agree to f32 accuracy
        let cfg = small_cfg(8);
        let model = perturbed_model(&cfg, 0.1);
        let x64 = rand_img(11, 8, 8);
        let y64 = inn_forward(&model, &x64).unwrap();
        let mut tape = Tape::<f32>::new();
        let vars = model.vars(&mut tape, false);
        let xv = tape.constant(x64.cast::<f32>());
        let y32 = inn_forward_var(&mut tape, &vars, &cfg, xv).unwrap();
        for (a, b) in tape.value(y32).data().iter().zip(y64.data()) {
            assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}

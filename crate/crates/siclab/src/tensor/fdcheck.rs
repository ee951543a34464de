//! Gradient verification against central finite differences.
//!
//! All checks run at 64-bit; 32-bit round-off makes the numeric quotient
//! unreliable. Hard-rounding nodes are excluded by design: their true
//! derivative is zero almost everywhere, so a finite-difference probe says
//! nothing about the pass-through gradient they deliberately report.

use super::tape::{Tape, Var};
use super::Tensor;
use crate::error::{Result, SicError};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Builds a scalar loss on `tape` from leaf vars created from `params`.
pub type GraphBuilder = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Max over all parameter elements of
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`,
/// with the numeric side a central difference of half-width `eps`.
pub fn finite_diff_check(params: &[Tensor<f64>], eps: f64, build: &GraphBuilder) -> Result<f64> {
    if !(1e-5..=1e-2).contains(&eps) {
        return Err(SicError::usage(format!(
            "finite_diff_check: eps {eps} outside [1e-5, 1e-2]"
        )));
    }
    let eval = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.leaf(p.clone(), false)).collect();
        let loss = build(&mut tape, &vars)?;
        if tape.value(loss).numel() != 1 {
            return Err(SicError::usage("finite_diff_check: loss must be scalar"));
        }
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(SicError::numeric("finite_diff_check: non-finite loss"));
        }
        Ok(v)
    };

    // analytic pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()))
        })
        .collect();

    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut max_rel = 0.0f64;
    for (pi, grad) in analytic.iter().enumerate() {
        for ei in 0..grad.numel() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let lp = eval(&work)?;
            work[pi].data_mut()[ei] = orig - eps;
            let lm = eval(&work)?;
            work[pi].data_mut()[ei] = orig;
            let numeric = (lp - lm) / (2.0 * eps);
            let a = grad.data()[ei];
            if !numeric.is_finite() {
                return Err(SicError::numeric("finite_diff_check: non-finite difference"));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Differentiable op kinds covered by randomized gradient checks.
/// Hard rounding is deliberately absent (zero true derivative a.e.).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale,
    AddScalar,
    BiasAdd,
    Conv2d,
    ConvT2d,
    LeakyRelu,
    Abs,
    Softplus,
    NormalCdf,
    Ln,
    Sqrt,
    ClampMin,
    ConcatSlice,
    CropHW,
    SpaceDepth,
    SumAll,
    MeanAll,
}

pub const ALL_CHECKED_OPS: &[OpKind] = &[
    OpKind::Add,
    OpKind::Sub,
    OpKind::Mul,
    OpKind::Div,
    OpKind::Neg,
    OpKind::Scale,
    OpKind::AddScalar,
    OpKind::BiasAdd,
    OpKind::Conv2d,
    OpKind::ConvT2d,
    OpKind::LeakyRelu,
    OpKind::Abs,
    OpKind::Softplus,
    OpKind::NormalCdf,
    OpKind::Ln,
    OpKind::Sqrt,
    OpKind::ClampMin,
    OpKind::ConcatSlice,
    OpKind::CropHW,
    OpKind::SpaceDepth,
    OpKind::SumAll,
    OpKind::MeanAll,
];

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("rand_tensor shape")
}

/// Values bounded away from zero (for kinked or singular ops).
fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>, margin: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(margin..2.0);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape, data).expect("rand_tensor shape")
}

/// One randomized finite-difference check of a single op kind, composed with
/// an elementwise square so every op sees a non-uniform upstream gradient.
pub fn check_op(kind: OpKind, seed: u64, eps: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.gen_range(1..3usize);
    let c = rng.gen_range(1..4usize);
    let h = rng.gen_range(4..8usize);
    let w = rng.gen_range(4..8usize);
    let sq = |t: &mut Tape<f64>, v: Var| -> Result<Var> {
        let m = t.mul(v, v)?;
        Ok(t.mean_all(m))
    };
    match kind {
        OpKind::Add => {
            let p = vec![
                rand_tensor(&mut rng, vec![b, c, h, w], -2.0, 2.0),
                rand_tensor(&mut rng, vec![b, c, h, w], -2.0, 2.0),
            ];
            finite_diff_check(&p, eps, &move |t, vs| {
                let y = t.add(vs[0], vs[1])?;
                sq(t, y)
            })
        }
        OpKind::Sub => {
            let p = vec![
                rand_tensor(&mut rng, vec![b, c, h, w], -2.0, 2.0),
                rand_tensor(&mut rng, vec![b, c, h, w], -2.0, 2.0),
            ];
            finite_diff_check(&p, eps, &move |t, vs| {
                let y = t.sub(vs[0], vs[1])?;
                sq(t, y)
            })
        }
        OpKind::Mul => {
            let p = vec![
                rand_tensor(&mut rng, vec![b, c, h, w], -2.0, 2.0),
                rand_tensor(&mut rng, vec![b, c, h, w], -2.0, 2.0),
            ];
            finite_diff_check(&p, eps, &move |t, vs| {
                let y = t.mul(vs[0], vs[1])?;
                sq(t, y)
            })
        }
        OpKind::Div => {
            let p = vec![
                rand_tensor(&mut rng, vec![b, c, h, w], -2.0, 2.0),
                rand_tensor_off_zero(&mut rng, vec![b, c, h, w], 0.5),
            ];
            finite_diff_check(&p, eps, &move |t, vs| {
                let y = t.div(vs[0], vs[1])?;
                sq(t, y)
            })
        }
        OpKind::Neg => {
            let p = vec![rand_tensor(&mut rng, vec![b, c, h, w], -2.0, 2.0)];
            finite_diff_check(&p, eps, &move |t, vs| {
                let y = t.neg(vs[0]);
                sq(t, y)
            })
        }
        OpKind::Scale => {
            let k = rng.gen_range(-3.0..3.0);
            let p = vec![rand_tensor(&mut rng, vec![b, c, h, w], -2.0, 2.0)];
            finite_diff_check(&p, eps, &move |t, vs| {
                let y = t.scale(vs[0], k);
                sq(t, y)
            })
        }
        OpKind::AddScalar => {
            let k = rng.gen_range(-3.0..3.0);
            let p = vec![rand_tensor(&mut rng, vec![b, c, h, w], -2.0, 2.0)];
            finite_diff_check(&p, eps, &move |t, vs| {
                let y = t.add_scalar(vs[0], k);
                sq(t, y)
            })
        }
        OpKind::BiasAdd => {
            let p = vec![
                rand_tensor(&mut rng, vec![b, c, h, w], -2.0, 2.0),
                rand_tensor(&mut rng, vec![c], -1.0, 1.0),
            ];
            finite_diff_check(&p, eps, &move |t, vs| {
                let y = t.bias_add(vs[0], vs[1])?;
                sq(t, y)
            })
        }
        OpKind::Conv2d => {
            let o = rng.gen_range(1..4usize);
            let k = *[1usize, 3, 5].get(rng.gen_range(0..3)).unwrap();
            let stride = if rng.gen_bool(0.5) { 1 } else { 2 };
            let hh = h.max(k);
            let ww = w.max(k);
            let p = vec![
                rand_tensor(&mut rng, vec![b, c, hh, ww], -1.0, 1.0),
                rand_tensor(&mut rng, vec![o, c, k, k], -1.0, 1.0),
            ];
            finite_diff_check(&p, eps, &move |t, vs| {
                let y = t.conv2d(vs[0], vs[1], stride, k / 2)?;
                sq(t, y)
            })
        }
        OpKind::ConvT2d => {
            let o = rng.gen_range(1..4usize);
            let stride = if rng.gen_bool(0.5) { 1 } else { 2 };
            let k = if stride == 1 { 3 } else { 5 };
            let hs = rng.gen_range(2..5usize);
            let ws = rng.gen_range(2..5usize);
            let p = vec![
                rand_tensor(&mut rng, vec![b, o, hs, ws], -1.0, 1.0),
                rand_tensor(&mut rng, vec![o, c, k, k], -1.0, 1.0),
            ];
            finite_diff_check(&p, eps, &move |t, vs| {
                let y = t.conv2d_transpose(vs[0], vs[1], stride, k / 2)?;
                sq(t, y)
            })
        }
        OpKind::LeakyRelu => {
            let p = vec![rand_tensor_off_zero(&mut rng, vec![b, c, h, w], 0.05)];
            finite_diff_check(&p, eps, &move |t, vs| {
                let y = t.leaky_relu(vs[0], 0.01);
                sq(t, y)
            })
        }
        OpKind::Abs => {
            let p = vec![rand_tensor_off_zero(&mut rng, vec![b, c, h, w], 0.1)];
            finite_diff_check(&p, eps, &move |t, vs| {
                let y = t.abs(vs[0]);
                sq(t, y)
            })
        }
        OpKind::Softplus => {
            let p = vec![rand_tensor(&mut rng, vec![b, c, h, w], -3.0, 3.0)];
            finite_diff_check(&p, eps, &move |t, vs| {
                let y = t.softplus(vs[0]);
                sq(t, y)
            })
        }
        OpKind::NormalCdf => {
            let p = vec![rand_tensor(&mut rng, vec![b, c, h, w], -3.0, 3.0)];
            finite_diff_check(&p, eps, &move |t, vs| {
                let y = t.normal_cdf(vs[0]);
                sq(t, y)
            })
        }
        OpKind::Ln => {
            let p = vec![rand_tensor(&mut rng, vec![b, c, h, w], 0.2, 3.0)];
            finite_diff_check(&p, eps, &move |t, vs| {
                let y = t.ln(vs[0]);
                sq(t, y)
            })
        }
        OpKind::Sqrt => {
            let p = vec![rand_tensor(&mut rng, vec![b, c, h, w], 0.3, 4.0)];
            finite_diff_check(&p, eps, &move |t, vs| {
                let y = t.sqrt(vs[0]);
                sq(t, y)
            })
        }
        OpKind::ClampMin => {
            // keep samples clear of the hinge at the floor
            let floor = 0.3;
            let n = b * c * h * w;
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.gen_bool(0.5) {
                        rng.gen_range(floor + 0.05..2.0)
                    } else {
                        rng.gen_range(-2.0..floor - 0.05)
                    }
                })
                .collect();
            let p = vec![Tensor::new(vec![b, c, h, w], data)?];
            finite_diff_check(&p, eps, &move |t, vs| {
                let y = t.clamp_min(vs[0], floor);
                sq(t, y)
            })
        }
        OpKind::ConcatSlice => {
            let c2 = rng.gen_range(1..4usize);
            let from = rng.gen_range(0..c + c2);
            let to = rng.gen_range(from + 1..=c + c2);
            let p = vec![
                rand_tensor(&mut rng, vec![b, c, h, w], -2.0, 2.0),
                rand_tensor(&mut rng, vec![b, c2, h, w], -2.0, 2.0),
            ];
            finite_diff_check(&p, eps, &move |t, vs| {
                let cat = t.concat_channels(vs[0], vs[1])?;
                let y = t.slice_channels(cat, from, to)?;
                sq(t, y)
            })
        }
        OpKind::CropHW => {
            let ch = rng.gen_range(1..=h);
            let cw = rng.gen_range(1..=w);
            let p = vec![rand_tensor(&mut rng, vec![b, c, h, w], -2.0, 2.0)];
            finite_diff_check(&p, eps, &move |t, vs| {
                let y = t.crop_hw(vs[0], ch, cw)?;
                sq(t, y)
            })
        }
        OpKind::SpaceDepth => {
            let r = 2;
            let p = vec![rand_tensor(&mut rng, vec![b, c, 4, 4], -2.0, 2.0)];
            finite_diff_check(&p, eps, &move |t, vs| {
                let d = t.space_to_depth(vs[0], r)?;
                let u = t.depth_to_space(d, r)?;
                let m = t.mul(d, d)?;
                let s1 = t.sum_all(m);
                let m2 = t.mul(u, u)?;
                let s2 = t.mean_all(m2);
                t.add(s1, s2)
            })
        }
        OpKind::SumAll => {
            let p = vec![rand_tensor(&mut rng, vec![b, c, h, w], -2.0, 2.0)];
            finite_diff_check(&p, eps, &move |t, vs| {
                let m = t.mul(vs[0], vs[0])?;
                Ok(t.sum_all(m))
            })
        }
        OpKind::MeanAll => {
            let p = vec![rand_tensor(&mut rng, vec![b, c, h, w], -2.0, 2.0)];
            finite_diff_check(&p, eps, &move |t, vs| {
                let m = t.mul(vs[0], vs[0])?;
                Ok(t.mean_all(m))
            })
        }
    }
}

//! Quantization variants and the image-domain rounding-and-clipping operator.
//!
//! Two test-time modes exist. Corrected quantization rounds the residual
//! against the predicted mean and adds the mean back, so the reconstruction
//! bin depends on μ — the coupling that seeds multi-generation drift.
//! Straight quantization rounds the latent directly; bin membership depends
//! on nothing but the latent value itself.
//!
//! All rounding in the crate is half-away-from-zero (`round_half_away`), and
//! the training relaxations are additive uniform noise and the
//! straight-through estimator.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

/// Test-time quantization rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// ŷᵢ = round(yᵢ − μᵢ) + μᵢ
    Corrected,
    /// ŷᵢ = round(yᵢ)
    Straight,
}

impl std::fmt::Display for QuantMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            QuantMode::Corrected => write!(f, "corrected"),
            QuantMode::Straight => write!(f, "straight"),
        }
    }
}

impl std::str::FromStr for QuantMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "corrected" => Ok(QuantMode::Corrected),
            "straight" => Ok(QuantMode::Straight),
            other => Err(format!("unknown quantization mode '{other}'")),
        }
    }
}

/// Training-time stand-in for hard rounding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainRelax {
    /// additive U(−0.5, 0.5) noise
    Noise,
    /// hard rounding forward, identity gradient
    Ste,
}

impl std::fmt::Display for TrainRelax {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainRelax::Noise => write!(f, "noise"),
            TrainRelax::Ste => write!(f, "ste"),
        }
    }
}

impl std::str::FromStr for TrainRelax {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "noise" => Ok(TrainRelax::Noise),
            "ste" => Ok(TrainRelax::Ste),
            other => Err(format!("unknown training relaxation '{other}'")),
        }
    }
}

/// Half-away-from-zero rounding: 0.5 → 1, −0.5 → −1.
pub fn round_half_away<T: Scalar>(v: T) -> T {
    v.round_ties_away()
}

fn clip_symbol<T: Scalar>(rounded: T, clip: i32, clip_events: &mut u64) -> i32 {
    let lo = -(clip as f64);
    let hi = clip as f64;
    let r = rounded.to_f64();
    if r < lo {
        *clip_events += 1;
        -clip
    } else if r > hi {
        *clip_events += 1;
        clip
    } else {
        r as i32
    }
}

/// Mean-corrected quantization. Returns the reconstruction ŷᵢ and the integer
/// symbol (the clipped rounded residual) sent to the coder.
pub fn corrected_quantize<T: Scalar>(
    y: T,
    mu: T,
    clip: i32,
    clip_events: &mut u64,
) -> (T, i32) {
    let sym = clip_symbol(round_half_away(y - mu), clip, clip_events);
    (T::from_f64(sym as f64) + mu, sym)
}

/// Direct rounding. Returns the reconstruction ŷᵢ (an integer-valued real)
/// and the same value as the coder symbol.
pub fn straight_quantize<T: Scalar>(y: T, clip: i32, clip_events: &mut u64) -> (T, i32) {
    let sym = clip_symbol(round_half_away(y), clip, clip_events);
    (T::from_f64(sym as f64), sym)
}

/// Straight quantization over a whole tensor.
pub fn straight_quantize_tensor<T: Scalar>(
    y: &Tensor<T>,
    clip: i32,
) -> (Tensor<T>, Vec<i32>, u64) {
    let mut events = 0u64;
    let mut symbols = Vec::with_capacity(y.numel());
    let mut data = Vec::with_capacity(y.numel());
    for &v in y.data() {
        let (q, s) = straight_quantize(v, clip, &mut events);
        data.push(q);
        symbols.push(s);
    }
    (
        Tensor::new(y.shape().to_vec(), data).expect("shape preserved"),
        symbols,
        events,
    )
}

/// One draw from U(−0.5, 0.5), strictly inside the open interval after
/// casting to `T`.
pub fn uniform_noise_sample<T: Scalar, R: Rng>(rng: &mut R) -> T {
    loop {
        let v = T::from_f64(rng.gen_range(-0.5f64..0.5));
        if v.abs().to_f64() < 0.5 {
            return v;
        }
    }
}

/// Noise tensor with the same shape as `y`; add it to relax quantization.
pub fn noise_tensor<T: Scalar, R: Rng>(shape: Vec<usize>, rng: &mut R) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| uniform_noise_sample::<T, R>(rng)).collect();
    Tensor::new(shape, data).expect("noise shape")
}

/// ỹ = y + U(−0.5, 0.5), i.i.d. per element.
pub fn noise_relax<T: Scalar, R: Rng>(y: &Tensor<T>, rng: &mut R) -> Tensor<T> {
    let noise = noise_tensor::<T, R>(y.shape().to_vec(), rng);
    let data = y
        .data()
        .iter()
        .zip(noise.data())
        .map(|(&a, &b)| a + b)
        .collect();
    Tensor::new(y.shape().to_vec(), data).expect("shape preserved")
}

/// Plain-tensor forward of the straight-through estimator: round every
/// element, no clipping. (On a tape, use `ste_round`, whose gradient is
/// identity.)
pub fn ste_forward<T: Scalar>(y: &Tensor<T>) -> Tensor<T> {
    y.map(round_half_away)
}

/// 8-bit image produced by rounding and clipping, in both integer and
/// real-valued (v/255) forms.
#[derive(Debug, Clone)]
pub struct RcOutput<T> {
    pub bytes: Vec<u8>,
    pub real: Tensor<T>,
}

/// Rounding and clipping to the 8-bit image domain:
/// clamp(round(x·255), 0, 255).
pub fn rc<T: Scalar>(x: &Tensor<T>) -> RcOutput<T> {
    let scale = T::from_f64(255.0);
    let mut bytes = Vec::with_capacity(x.numel());
    let mut real = Vec::with_capacity(x.numel());
    for &v in x.data() {
        let r = round_half_away(v * scale).to_f64();
        let b = if r < 0.0 {
            0u8
        } else if r > 255.0 {
            255u8
        } else {
            r as u8
        };
        bytes.push(b);
        real.push(T::from_f64(b as f64) / scale);
    }
    RcOutput {
        bytes,
        real: Tensor::new(x.shape().to_vec(), real).expect("shape preserved"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const CLIP: i32 = 255;

    #[test]
    fn corrected_examples() {
        let mut ev = 0u64;
        let (q, s) = corrected_quantize(1.3f64, 1.0, CLIP, &mut ev);
        assert_eq!((q, s), (1.0, 0));
        let (q, _) = corrected_quantize(1.49f64, 0.0, CLIP, &mut ev);
        assert_eq!(q, 1.0);
        // a sub-unit shift in μ flips the reconstruction by ~1: the drift seed
        let (q, _) = corrected_quantize(1.49f64, 0.98, CLIP, &mut ev);
        assert!((q - 1.98).abs() < 1e-12);
        let (q, s) = corrected_quantize(0.73f64, 0.73, CLIP, &mut ev);
        assert_eq!((q, s), (0.73, 0));
        assert_eq!(ev, 0);
    }

    #[test]
    fn corrected_coupling_exists_below_unit_mu_change() {
        let mut ev = 0u64;
        let (a, _) = corrected_quantize(1.49f64, 0.0, CLIP, &mut ev);
        let (b, _) = corrected_quantize(1.49f64, 0.98, CLIP, &mut ev);
        assert!((0.98f64 - 0.0).abs() < 1.0);
        assert!((a - b).abs() > 0.9);
    }

    #[test]
    fn straight_examples_and_tie_rule() {
        let mut ev = 0u64;
        assert_eq!(straight_quantize(1.3f64, CLIP, &mut ev).0, 1.0);
        assert_eq!(straight_quantize(1.6f64, CLIP, &mut ev).0, 2.0);
        assert_eq!(straight_quantize(-0.5f64, CLIP, &mut ev).0, -1.0);
        assert_eq!(straight_quantize(0.5f64, CLIP, &mut ev).0, 1.0);
        assert_eq!(ev, 0);
    }

    #[test]
    fn straight_clips_and_counts() {
        let mut ev = 0u64;
        let (q, s) = straight_quantize(300.2f32, CLIP, &mut ev);
        assert_eq!((q, s), (255.0, 255));
        let (q, s) = straight_quantize(-999.0f32, CLIP, &mut ev);
        assert_eq!((q, s), (-255.0, -255));
        assert_eq!(ev, 2);
    }

    #[test]
    fn straight_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y = Tensor::new(
            vec![1000],
            (0..1000).map(|_| rng.gen_range(-300.0f32..300.0)).collect(),
        )
        .unwrap();
        let (q1, s1, _) = straight_quantize_tensor(&y, CLIP);
        let (q2, s2, ev2) = straight_quantize_tensor(&q1, CLIP);
        assert_eq!(q1.data(), q2.data());
        assert_eq!(s1, s2);
        assert_eq!(ev2, 0);
    }

    #[test]
    fn straight_fixed_point_within_half_bin() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y0: Vec<f32> = (0..500).map(|_| rng.gen_range(-40.0f32..40.0)).collect();
        let y0 = Tensor::new(vec![500], y0).unwrap();
        let (q0, s0, _) = straight_quantize_tensor(&y0, CLIP);
        let y1: Vec<f32> = q0
            .data()
            .iter()
            .map(|&q| q + rng.gen_range(-0.49f32..0.49))
            .collect();
        let y1 = Tensor::new(vec![500], y1).unwrap();
        let (q1, s1, _) = straight_quantize_tensor(&y1, CLIP);
        assert_eq!(q0.data(), q1.data());
        assert_eq!(s0, s1);
    }

    #[test]
    fn noise_support_and_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 1_000_000usize;
        let mut sum = 0.0f64;
        for _ in 0..n {
            let v: f64 = uniform_noise_sample(&mut rng);
            assert!(v > -0.5 && v < 0.5);
            sum += v;
        }
        assert!((sum / n as f64).abs() < 0.01);
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let a = noise_relax(
            &Tensor::<f32>::zeros(vec![64]),
            &mut ChaCha8Rng::seed_from_u64(9),
        );
        let b = noise_relax(
            &Tensor::<f32>::zeros(vec![64]),
            &mut ChaCha8Rng::seed_from_u64(9),
        );
        assert_eq!(a.data(), b.data());
        for &v in a.data() {
            assert!(v > -0.5 && v < 0.5);
        }
    }

    #[test]
    fn ste_forward_matches_straight_quantize_without_clipping() {
        let y = Tensor::new(vec![4], vec![1.3f32, -0.5, 1.6, 999.7]).unwrap();
        let f = ste_forward(&y);
        assert_eq!(f.data(), &[1.0, -1.0, 2.0, 1000.0]);
        let mut ev = 0;
        for (&fv, &yv) in f.data().iter().zip(y.data()) {
            let (q, _) = straight_quantize(yv, 100_000, &mut ev);
            assert_eq!(fv, q);
        }
    }

    #[test]
    fn rc_clips_rounds_and_is_idempotent() {
        let x = Tensor::new(vec![4], vec![1.003f64, -0.01, 128.5 / 255.0, 0.2]).unwrap();
        let out = rc(&x);
        assert_eq!(out.bytes, vec![255, 0, 129, 51]);
        let again = rc(&out.real);
        assert_eq!(again.bytes, out.bytes);
        assert_eq!(again.real.data(), out.real.data());
    }

    #[test]
    fn rc_tie_rule_survives_f32() {
        let x = Tensor::new(vec![1], vec![128.5f32 / 255.0]).unwrap();
        assert_eq!(rc(&x).bytes, vec![129]);
    }
}

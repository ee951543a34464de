//! Deterministic synthetic image corpus: smooth low-frequency textures that
//! a small codec can learn quickly, with just enough structure and grain to
//! keep rates non-trivial. Every pixel is a pure function of (seed, index,
//! size), so corpora are reproducible across machines.

use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image_rng(seed: u64, index: u64) -> ChaCha8Rng {
    // distinct, decorrelated stream per image
    ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// One synthetic RGB image as [3,H,W] floats, snapped to the 8-bit grid
/// (every value is k/255). This is the same domain as decoded 8-bit files.
pub fn synth_image(seed: u64, index: u64, h: usize, w: usize) -> Tensor<f32> {
    let mut rng = image_rng(seed, index);
    let scale = h.max(w) as f64;

    let base: [f64; 3] = [
        rng.gen_range(0.25..0.75),
        rng.gen_range(0.25..0.75),
        rng.gen_range(0.25..0.75),
    ];

    struct Wave {
        fx: f64,
        fy: f64,
        phase: f64,
        amp: f64,
        cw: [f64; 3],
    }
    let waves: Vec<Wave> = (0..4)
        .map(|_| {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let freq = rng.gen_range(0.5..3.0) * std::f64::consts::TAU / scale;
            Wave {
                fx: freq * theta.cos(),
                fy: freq * theta.sin(),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                amp: rng.gen_range(0.05..0.18),
                cw: [
                    rng.gen_range(0.3..1.0),
                    rng.gen_range(0.3..1.0),
                    rng.gen_range(0.3..1.0),
                ],
            }
        })
        .collect();

    struct Blob {
        cx: f64,
        cy: f64,
        inv_r2: f64,
        amp: f64,
        cw: [f64; 3],
    }
    let blobs: Vec<Blob> = (0..3)
        .map(|_| {
            let r = rng.gen_range(0.12..0.4) * h.min(w) as f64;
            Blob {
                cx: rng.gen_range(0.0..w as f64),
                cy: rng.gen_range(0.0..h as f64),
                inv_r2: 1.0 / (2.0 * r * r),
                amp: rng.gen_range(0.08..0.25) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                cw: [
                    rng.gen_range(0.3..1.0),
                    rng.gen_range(0.3..1.0),
                    rng.gen_range(0.3..1.0),
                ],
            }
        })
        .collect();

    let grain = 0.008f64;
    let mut data = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let mut acc = [base[0], base[1], base[2]];
            for wv in &waves {
                let s = wv.amp * (wv.fx * xf + wv.fy * yf + wv.phase).sin();
                for (a, cw) in acc.iter_mut().zip(wv.cw) {
                    *a += s * cw;
                }
            }
            for bl in &blobs {
                let (dx, dy) = (xf - bl.cx, yf - bl.cy);
                let s = bl.amp * (-(dx * dx + dy * dy) * bl.inv_r2).exp();
                for (a, cw) in acc.iter_mut().zip(bl.cw) {
                    *a += s * cw;
                }
            }
            let g = rng.gen_range(-grain..grain);
            for (c, a) in acc.iter().enumerate() {
                let v = (a + g).clamp(0.0, 1.0);
                let snapped = (v * 255.0).round() / 255.0;
                data[(c * h + y) * w + x] = snapped as f32;
            }
        }
    }
    Tensor::new(vec![3, h, w], data).expect("image shape")
}

/// A whole corpus; image i uses the decorrelated stream (seed, i).
pub fn synth_corpus(seed: u64, count: usize, h: usize, w: usize) -> Vec<Tensor<f32>> {
    (0..count)
        .map(|i| synth_image(seed, i as u64, h, w))
        .collect()
}

/// Interleaved 8-bit RGB rows (the PPM body layout) of a snapped image.
pub fn to_rgb8(img: &Tensor<f32>) -> Vec<u8> {
    crate::io::ppm::tensor_to_rgb8(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed_and_index() {
        let a = synth_image(7, 3, 32, 48);
        let b = synth_image(7, 3, 32, 48);
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let c = synth_image(7, 4, 32, 48);
        assert_ne!(a.data(), c.data());
        let d = synth_image(8, 3, 32, 48);
        assert_ne!(a.data(), d.data());
    }

    #[test]
    fn values_snapped_to_8bit_grid_in_range() {
        let img = synth_image(1, 0, 40, 40);
        for &v in img.data() {
            assert!((0.0..=1.0).contains(&v));
            let k = (v as f64) * 255.0;
            assert!((k - k.round()).abs() < 1e-4, "not snapped: {v}");
        }
    }

    #[test]
    fn textures_are_smooth_but_not_constant() {
        let img = synth_image(2, 5, 64, 64);
        let d = img.data();
        let mut grad_sum = 0.0f64;
        let mut count = 0usize;
        for c in 0..3 {
            for y in 0..64 {
                for x in 0..63 {
                    let i = (c * 64 + y) * 64 + x;
                    grad_sum += (d[i + 1] - d[i]).abs() as f64;
                    count += 1;
                }
            }
        }
        let mean_grad = grad_sum / count as f64;
        assert!(mean_grad < 0.03, "too rough: {mean_grad}");
        let mean: f64 = d.iter().map(|&v| v as f64).sum::<f64>() / d.len() as f64;
        let var: f64 =
            d.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / d.len() as f64;
        assert!(var > 1e-4, "degenerate texture: var={var}");
    }

    #[test]
    fn rgb8_round_trips_snapped_floats() {
        let img = synth_image(3, 1, 16, 16);
        let rgb = to_rgb8(&img);
        assert_eq!(rgb.len(), 3 * 16 * 16);
        for y in 0..16 {
            for x in 0..16 {
                for c in 0..3 {
                    let f = img.data()[(c * 16 + y) * 16 + x];
                    let b = rgb[(y * 16 + x) * 3 + c];
                    assert_eq!(b as f32 / 255.0, f);
                }
            }
        }
    }

    #[test]
    fn corpus_has_requested_count() {
        let corpus = synth_corpus(9, 5, 24, 24);
        assert_eq!(corpus.len(), 5);
    }
}

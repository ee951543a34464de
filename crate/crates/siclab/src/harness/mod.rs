//! Successive-compression harness: repeated decompress–recompress cycles
//! through real bitstreams, with per-generation quality/rate/stability
//! records, plus the channel-sweep and strategy-comparison studies.

pub mod metrics;
pub mod sweep;
pub mod trace;

pub use metrics::{mse_real, mse_real_vs_u8, mse_u8, psnr_real, psnr_real_vs_u8, psnr_u8, PSNR_CAP_DB};
pub use sweep::{compare_strategies, sweep_channels, StrategyModel, StrategyReport, SweepRow};
pub use trace::{
    traces_from_csv, traces_to_csv, GenerationTrace, StabilityReport, TraceRow, TRACE_CSV_HEADER,
};

use crate::codec::{crop_image, decode_image, encode_image, pad_image};
use crate::codec::{analysis, synthesis, CodecConfig, ModelParams};
use crate::error::{Result, SicError};
use crate::quant::{rc, RcOutput};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// One full compression cycle: pad → analysis → quantize via a real entropy
/// encode/decode round trip → synthesis → crop → (no output rounding here —
/// the caller decides whether to apply it).
#[derive(Debug)]
pub struct CycleResult {
    /// 8-bit output image (planar [1,3,H,W] order) and its real form.
    pub rc: RcOutput<f32>,
    /// Cropped synthesis before the rounding/clipping step.
    pub pre_rc: Tensor<f32>,
    /// The complete bitstream of this generation.
    pub stream: Vec<u8>,
    /// Decoder-side latent reconstruction.
    pub yhat: Tensor<f32>,
    pub bpp: f64,
    pub clip_events: u64,
}

/// Run one cycle. The reconstruction carried out of this function comes from
/// decoding the actual bitstream; if the decoder's ŷ ever differs from the
/// encoder's, the coder invariant is broken and this is a hard error rather
/// than a silent quality change.
pub fn sic_cycle(cfg: &CodecConfig, params: &ModelParams, x: &Tensor<f32>) -> Result<CycleResult> {
    let enc = encode_image(cfg, params, x, cfg.quant_mode)?;
    let dec = decode_image(cfg, params, &enc.bytes)?;
    if enc.yhat.shape() != dec.yhat.shape()
        || enc
            .yhat
            .data()
            .iter()
            .zip(dec.yhat.data())
            .any(|(a, b)| a.to_bits() != b.to_bits())
    {
        return Err(SicError::data(
            "encoder and decoder disagree on the latent reconstruction — coder invariant broken",
        ));
    }
    Ok(CycleResult {
        rc: rc(&dec.x),
        pre_rc: dec.x,
        stream: enc.bytes,
        yhat: dec.yhat,
        bpp: enc.bpp,
        clip_events: enc.clip_events,
    })
}

/// Options for a generation run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// number of cycles (n ≥ 1); the trace gets n+1 rows
    pub n: usize,
    /// false → carry the real-valued reconstruction forward (ablation of the
    /// rounding/clipping step)
    pub rc_enabled: bool,
    pub image_id: String,
    pub strategy: String,
}

impl RunOptions {
    pub fn new(n: usize, image_id: &str, strategy: &str) -> RunOptions {
        RunOptions {
            n,
            rc_enabled: true,
            image_id: image_id.to_string(),
            strategy: strategy.to_string(),
        }
    }
}

/// d(x₀, x̄₀): MSE (0–255 scale) between the input and the synthesis of its
/// unquantized latent — the transform-reversibility measure.
pub fn reversibility_mse(cfg: &CodecConfig, params: &ModelParams, x0: &Tensor<f32>) -> Result<f64> {
    let x0_rc = rc(x0);
    let (xp, (h, w)) = pad_image(&x0_rc.real, 16);
    let mut tape = Tape::new();
    let pv = params.vars(&mut tape, false);
    let xv = tape.constant(xp);
    let y = analysis(&mut tape, &pv, xv)?;
    let xbar = synthesis(&mut tape, &pv, y)?;
    let xbar = crop_image(tape.value(xbar), h, w);
    if !xbar.all_finite() {
        return Err(SicError::numeric("reversibility: non-finite synthesis"));
    }
    let _ = cfg; // reversibility depends only on the transforms
    mse_real_vs_u8(&xbar, &x0_rc.bytes)
}

/// Iterate [`sic_cycle`] n times from x₀, recording one trace row per
/// generation plus the stability summary.
pub fn run_generations(
    cfg: &CodecConfig,
    params: &ModelParams,
    x0: &Tensor<f32>,
    opts: &RunOptions,
) -> Result<(GenerationTrace, StabilityReport)> {
    if opts.n < 1 {
        return Err(SicError::usage("run_generations: n must be ≥ 1"));
    }
    let x0_rc = rc(x0);
    let mut rows = vec![TraceRow::original()];
    let mut cur = x0_rc.real.clone();
    let mut prev_bytes = x0_rc.bytes.clone();
    let mut prev_real_bits: Vec<u32> = x0_rc.real.data().iter().map(|v| v.to_bits()).collect();
    let mut prev_yhat: Option<Tensor<f32>> = None;
    let mut fixed_point_gen = None;
    let mut mse1 = None;
    let mut mse2 = None;

    for gen in 1..=opts.n {
        let cyc = sic_cycle(cfg, params, &cur)?;

        let (psnr, mse, same_as_prev) = if opts.rc_enabled {
            let m = mse_u8(&cyc.rc.bytes, &x0_rc.bytes)?;
            (metrics::psnr_u8(&cyc.rc.bytes, &x0_rc.bytes)?, m, cyc.rc.bytes == prev_bytes)
        } else {
            let m = mse_real_vs_u8(&cyc.pre_rc, &x0_rc.bytes)?;
            let bits: Vec<u32> = cyc.pre_rc.data().iter().map(|v| v.to_bits()).collect();
            let same = bits == prev_real_bits;
            prev_real_bits = bits;
            (psnr_real_vs_u8(&cyc.pre_rc, &x0_rc.bytes)?, m, same)
        };
        if gen == 1 {
            mse1 = Some(mse);
        } else if gen == 2 {
            mse2 = Some(mse);
        }
        if fixed_point_gen.is_none() && same_as_prev {
            fixed_point_gen = Some(gen);
        }

        let latent_changed = prev_yhat.as_ref().map(|p| {
            p.data()
                .iter()
                .zip(cyc.yhat.data())
                .filter(|(a, b)| a.to_bits() != b.to_bits())
                .count() as u64
        });
        rows.push(TraceRow {
            n: gen,
            psnr_db: psnr,
            bpp: Some(cyc.bpp),
            latent_changed,
            clip_events: Some(cyc.clip_events),
        });

        prev_yhat = Some(cyc.yhat);
        prev_bytes = cyc.rc.bytes;
        cur = if opts.rc_enabled { cyc.rc.real } else { cyc.pre_rc };
    }

    let report = StabilityReport {
        first_gen_loss: match (mse1, mse2) {
            (Some(a), Some(b)) => Some(b - a),
            _ => None,
        },
        reversibility: reversibility_mse(cfg, params, x0)?,
        fixed_point_gen,
    };
    Ok((
        GenerationTrace {
            image_id: opts.image_id.clone(),
            strategy: opts.strategy.clone(),
            rows,
        },
        report,
    ))
}

/// Prepare an evaluation image: center-crop height and width down to
/// multiples of 16 (the default), or leave it untouched and let the codec
/// pad each cycle (`pad = true`).
pub fn prepare_eval_image(x: &Tensor<f32>, pad: bool) -> Result<Tensor<f32>> {
    let s = x.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(SicError::usage(format!(
            "prepare_eval_image: want [1,3,H,W], got {s:?}"
        )));
    }
    if pad {
        return Ok(x.clone());
    }
    let (h, w) = (s[2], s[3]);
    let (ch, cw) = (h - h % 16, w - w % 16);
    if ch == 0 || cw == 0 {
        return Err(SicError::data(format!(
            "image {w}x{h} is smaller than one 16x16 block"
        )));
    }
    if (ch, cw) == (h, w) {
        return Ok(x.clone());
    }
    let (oy, ox) = ((h - ch) / 2, (w - cw) / 2);
    let d = x.data();
    let mut out = Vec::with_capacity(3 * ch * cw);
    for c in 0..3 {
        for y in 0..ch {
            let row = (c * h + oy + y) * w + ox;
            out.extend_from_slice(&d[row..row + cw]);
        }
    }
    Tensor::new(vec![1, 3, ch, cw], out)
}

/// Run a set of images (optionally across threads — results keep input
/// order and are byte-identical regardless of `jobs`).
pub fn run_set(
    cfg: &CodecConfig,
    params: &ModelParams,
    images: &[(String, Tensor<f32>)],
    n: usize,
    rc_enabled: bool,
    strategy: &str,
    jobs: usize,
) -> Result<Vec<(GenerationTrace, StabilityReport)>> {
    let run_one = |(id, img): &(String, Tensor<f32>)| {
        let opts = RunOptions {
            n,
            rc_enabled,
            image_id: id.clone(),
            strategy: strategy.to_string(),
        };
        run_generations(cfg, params, img, &opts)
    };
    if jobs <= 1 || images.len() <= 1 {
        return images.iter().map(run_one).collect();
    }
    // strided workers; slot-indexed merge keeps input order exactly
    let workers = jobs.min(images.len());
    let run_one = &run_one;
    let mut merged: Vec<Option<Result<(GenerationTrace, StabilityReport)>>> =
        (0..images.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    let mut out = Vec::new();
                    let mut i = w;
                    while i < images.len() {
                        out.push((i, run_one(&images[i])));
                        i += workers;
                    }
                    out
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("harness worker") {
                merged[i] = Some(r);
            }
        }
    });
    merged.into_iter().map(|s| s.expect("all slots filled")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::QuantMode;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg(mode: QuantMode) -> CodecConfig {
        let mut cfg = CodecConfig::toy(16, 0.01, 5);
        cfg.n = 8;
        cfg.quant_mode = mode;
        cfg
    }

    fn rand_img(seed: u64, h: usize, w: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * h * w).map(|_| rng.gen_range(0.0f32..1.0)).collect();
        Tensor::new(vec![1, 3, h, w], data).unwrap()
    }

    #[test]
    fn cycle_preserves_dims_and_costs_bits() {
        let cfg = toy_cfg(QuantMode::Straight);
        let params = ModelParams::init(&cfg).unwrap();
        let x = rand_img(1, 48, 32);
        let cyc = sic_cycle(&cfg, &params, &x).unwrap();
        assert_eq!(cyc.rc.real.shape(), x.shape());
        assert_eq!(cyc.rc.bytes.len(), 3 * 48 * 32);
        assert!(cyc.bpp > 0.0);
        assert!(!cyc.stream.is_empty());
    }

    #[test]
    fn trace_shape_and_row0_sentinel() {
        let cfg = toy_cfg(QuantMode::Corrected);
        let params = ModelParams::init(&cfg).unwrap();
        let x = rand_img(2, 32, 32);
        let opts = RunOptions::new(3, "img", "corrected");
        let (trace, report) = run_generations(&cfg, &params, &x, &opts).unwrap();
        assert_eq!(trace.rows.len(), 4);
        assert!(trace.rows[0].psnr_db.is_infinite());
        assert!(trace.rows[0].bpp.is_none());
        assert!(trace.rows[1].latent_changed.is_none());
        assert!(trace.rows[2].latent_changed.is_some());
        for r in &trace.rows[1..] {
            assert!(r.psnr_db.is_finite());
            assert!(r.bpp.unwrap() > 0.0);
        }
        assert!(report.first_gen_loss.is_some());
        assert!(report.reversibility >= 0.0);
    }

    #[test]
    fn straight_mode_fixed_point_absorbs() {
        // Untrained model, straight mode: latents collapse to a fixed point
        // within a few generations; after that everything must repeat
        // bit-exactly (checked over 20 extra cycles).
        let cfg = toy_cfg(QuantMode::Straight);
        let params = ModelParams::init(&cfg).unwrap();
        let x = rand_img(3, 32, 32);
        let opts = RunOptions::new(28, "img", "straight");
        let (trace, report) = run_generations(&cfg, &params, &x, &opts).unwrap();
        let fp = report.fixed_point_gen.expect("toy model should absorb");
        assert!(fp + 20 <= 28, "fixed point too late ({fp}) for the check");
        let anchor = trace.psnr_at(fp).unwrap();
        for r in trace.rows.iter().filter(|r| r.n > fp) {
            assert_eq!(r.psnr_db, anchor, "gen {}", r.n);
            assert_eq!(r.latent_changed, Some(0), "gen {}", r.n);
        }
    }

    #[test]
    fn second_application_is_exact_once_latents_stop_changing() {
        let cfg = toy_cfg(QuantMode::Straight);
        let params = ModelParams::init(&cfg).unwrap();
        let x = rand_img(4, 32, 32);
        let c1 = sic_cycle(&cfg, &params, &x).unwrap();
        let c2 = sic_cycle(&cfg, &params, &c1.rc.real).unwrap();
        let changed = c1
            .yhat
            .data()
            .iter()
            .zip(c2.yhat.data())
            .filter(|(a, b)| a.to_bits() != b.to_bits())
            .count();
        if changed == 0 {
            let c3 = sic_cycle(&cfg, &params, &c2.rc.real).unwrap();
            assert_eq!(c2.rc.bytes, c3.rc.bytes);
            assert_eq!(c2.stream, c3.stream);
        }
    }

    #[test]
    fn rc_ablated_run_carries_real_values() {
        let cfg = toy_cfg(QuantMode::Straight);
        let params = ModelParams::init(&cfg).unwrap();
        let x = rand_img(5, 32, 32);
        let mut opts = RunOptions::new(3, "img", "straight-norc");
        opts.rc_enabled = false;
        let (trace, _) = run_generations(&cfg, &params, &x, &opts).unwrap();
        assert_eq!(trace.rows.len(), 4);
        for r in &trace.rows[1..] {
            assert!(r.psnr_db.is_finite());
        }
    }

    #[test]
    fn center_crop_takes_the_middle_window() {
        let (h, w) = (100usize, 70usize);
        let data: Vec<f32> = (0..3 * h * w).map(|i| (i % 509) as f32 / 509.0).collect();
        let x = Tensor::new(vec![1, 3, h, w], data.clone()).unwrap();
        let c = prepare_eval_image(&x, false).unwrap();
        assert_eq!(c.shape(), &[1, 3, 96, 64]);
        let (oy, ox) = (2usize, 3usize);
        for ch in 0..3 {
            for y in 0..96 {
                for xx in 0..64 {
                    let src = data[(ch * h + oy + y) * w + ox + xx];
                    let dst = c.data()[(ch * 96 + y) * 64 + xx];
                    assert_eq!(src.to_bits(), dst.to_bits());
                }
            }
        }
        // pad path: untouched
        let p = prepare_eval_image(&x, true).unwrap();
        assert_eq!(p.shape(), x.shape());
        // aligned image: untouched
        let a = rand_img(6, 32, 48);
        assert_eq!(prepare_eval_image(&a, false).unwrap().shape(), a.shape());
        // too small
        let tiny = rand_img(7, 8, 40);
        assert!(prepare_eval_image(&tiny, false).is_err());
    }

    #[test]
    fn run_set_is_order_stable_and_thread_invariant() {
        let cfg = toy_cfg(QuantMode::Straight);
        let params = ModelParams::init(&cfg).unwrap();
        let images = vec![
            ("a".to_string(), rand_img(8, 32, 32)),
            ("b".to_string(), rand_img(9, 32, 32)),
            ("c".to_string(), rand_img(10, 32, 32)),
        ];
        let serial = run_set(&cfg, &params, &images, 2, true, "straight", 1).unwrap();
        let threaded = run_set(&cfg, &params, &images, 2, true, "straight", 3).unwrap();
        assert_eq!(serial.len(), 3);
        for ((ts, rs), (tt, rt)) in serial.iter().zip(&threaded) {
            assert_eq!(ts, tt);
            assert_eq!(rs, rt);
        }
        assert_eq!(serial[0].0.image_id, "a");
        assert_eq!(serial[2].0.image_id, "c");
    }
}

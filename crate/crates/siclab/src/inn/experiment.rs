//! Repeated recompression through the coupling codec, with and without
//! pixel-domain rounding/clipping between generations. With the rounding
//! step ablated, the decoded image re-encodes to the identical stream every
//! generation — the transform is exactly invertible and quantized latents
//! reproduce themselves — so any drift observed with rounding enabled is
//! attributable to that single step.

use super::codec::inn_cycle;
use super::InnModel;
use crate::codec::config::fnv1a64;
use crate::error::{Result, SicError};
use crate::harness::{
    mse_real_vs_u8, mse_u8, psnr_real, psnr_real_vs_u8, psnr_u8, GenerationTrace,
    StabilityReport, TraceRow,
};
use crate::inn::net::{inn_forward, inn_inverse};
use crate::quant::rc;
use crate::tensor::Tensor;

/// Fingerprint of a tensor's exact bit pattern.
fn tensor_fpr(t: &Tensor<f64>) -> u64 {
    let mut bytes = Vec::with_capacity(t.numel() * 8);
    for v in t.data() {
        bytes.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fnv1a64(&bytes)
}

/// One full generation study on a single image.
#[derive(Debug)]
pub struct InnRun {
    /// Per-generation quality vs the original, plus rate and latent-diff
    /// columns — same row convention as the dense-codec harness.
    pub trace: GenerationTrace,
    pub report: StabilityReport,
    /// PSNR of each generation against generation 1 (index g−1 ↔ gen g);
    /// the first entry is the cap by definition.
    pub psnr_vs_gen1: Vec<f64>,
    /// Fingerprints of each generation's bitstream bytes.
    pub stream_fpr: Vec<u64>,
    /// Fingerprints of each generation's quantized-latent bit pattern.
    pub yhat_fpr: Vec<u64>,
    /// Fingerprints of the reconstruction carried into the next generation
    /// (8-bit bytes when rounding is on, the real-valued bits when ablated).
    pub recon_fpr: Vec<u64>,
    /// Final-generation reconstruction, real-valued, before any rounding.
    pub last_recon: Tensor<f64>,
}

/// Transform round-trip error d(x₀, f⁻¹(f(x₀))) on the 0–255 scale —
/// machine-precision small for the coupling transform, by construction.
pub fn inn_reversibility_mse(model: &InnModel, x0: &Tensor<f64>) -> Result<f64> {
    let x0_rc = rc(x0);
    let y = inn_forward(model, &x0_rc.real)?;
    let back = inn_inverse(model, &y)?;
    if !back.all_finite() {
        return Err(SicError::numeric("reversibility: non-finite inverse"));
    }
    mse_real_vs_u8(&back, &x0_rc.bytes)
}

/// Run `n` decode–re-encode generations from x₀. `rc_enabled` controls the
/// pixel-domain rounding/clipping between generations; the entropy coding
/// round trip itself is always real and always lossless. Input must be
/// [1,3,H,W] with both dims multiples of the stage factor, so padding never
/// perturbs the carried image.
pub fn inn_sic_experiment(
    model: &InnModel,
    x0: &Tensor<f64>,
    n: usize,
    rc_enabled: bool,
) -> Result<InnRun> {
    if n < 1 {
        return Err(SicError::usage("inn_sic_experiment: n must be ≥ 1"));
    }
    let s = x0.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(SicError::usage(format!(
            "inn_sic_experiment: want [1,3,H,W], got {s:?}"
        )));
    }
    let mult = model.cfg().spatial_multiple();
    if s[2] % mult != 0 || s[3] % mult != 0 {
        return Err(SicError::usage(format!(
            "inn_sic_experiment: {}x{} is not a multiple of {mult}; crop first — repeated \
             padding would re-perturb every generation",
            s[2], s[3]
        )));
    }

    let x0_rc = rc(x0);
    let mut rows = vec![TraceRow::original()];
    let mut cur = x0_rc.real.clone();
    let mut prev_bytes = x0_rc.bytes.clone();
    let mut prev_real_bits: Vec<u64> = x0_rc.real.data().iter().map(|v| v.to_bits()).collect();
    let mut prev_yhat: Option<Tensor<f64>> = None;
    let mut fixed_point_gen = None;
    let mut mse1 = None;
    let mut mse2 = None;
    let mut psnr_vs_gen1 = Vec::with_capacity(n);
    let mut stream_fpr = Vec::with_capacity(n);
    let mut yhat_fpr = Vec::with_capacity(n);
    let mut recon_fpr = Vec::with_capacity(n);
    let mut gen1_bytes: Option<Vec<u8>> = None;
    let mut gen1_real: Option<Tensor<f64>> = None;
    let mut last_recon = None;

    for gen in 1..=n {
        let cyc = inn_cycle(model, &cur)?;
        let out_rc = rc(&cyc.dec.x);

        let (psnr, mse, same_as_prev) = if rc_enabled {
            let m = mse_u8(&out_rc.bytes, &x0_rc.bytes)?;
            (
                psnr_u8(&out_rc.bytes, &x0_rc.bytes)?,
                m,
                out_rc.bytes == prev_bytes,
            )
        } else {
            let m = mse_real_vs_u8(&cyc.dec.x, &x0_rc.bytes)?;
            let bits: Vec<u64> = cyc.dec.x.data().iter().map(|v| v.to_bits()).collect();
            let same = bits == prev_real_bits;
            prev_real_bits = bits;
            (psnr_real_vs_u8(&cyc.dec.x, &x0_rc.bytes)?, m, same)
        };
        if gen == 1 {
            mse1 = Some(mse);
        } else if gen == 2 {
            mse2 = Some(mse);
        }
        if fixed_point_gen.is_none() && same_as_prev {
            fixed_point_gen = Some(gen);
        }

        psnr_vs_gen1.push(if rc_enabled {
            match &gen1_bytes {
                None => {
                    gen1_bytes = Some(out_rc.bytes.clone());
                    crate::harness::PSNR_CAP_DB
                }
                Some(b1) => psnr_u8(&out_rc.bytes, b1)?,
            }
        } else {
            match &gen1_real {
                None => {
                    gen1_real = Some(cyc.dec.x.clone());
                    crate::harness::PSNR_CAP_DB
                }
                Some(x1) => psnr_real(&cyc.dec.x, x1)?,
            }
        });
        stream_fpr.push(fnv1a64(&cyc.enc.bytes));
        yhat_fpr.push(tensor_fpr(&cyc.dec.yhat));
        recon_fpr.push(if rc_enabled {
            fnv1a64(&out_rc.bytes)
        } else {
            tensor_fpr(&cyc.dec.x)
        });

        let latent_changed = prev_yhat.as_ref().map(|p| {
            p.data()
                .iter()
                .zip(cyc.dec.yhat.data())
                .filter(|(a, b)| a.to_bits() != b.to_bits())
                .count() as u64
        });
        rows.push(TraceRow {
            n: gen,
            psnr_db: psnr,
            bpp: Some(cyc.enc.bpp),
            latent_changed,
            clip_events: Some(cyc.enc.clip_events),
        });

        prev_yhat = Some(cyc.dec.yhat);
        prev_bytes = out_rc.bytes;
        last_recon = Some(cyc.dec.x.clone());
        cur = if rc_enabled { out_rc.real } else { cyc.dec.x };
    }

    let report = StabilityReport {
        first_gen_loss: match (mse1, mse2) {
            (Some(a), Some(b)) => Some(b - a),
            _ => None,
        },
        reversibility: inn_reversibility_mse(model, x0)?,
        fixed_point_gen,
    };
    Ok(InnRun {
        trace: GenerationTrace {
            image_id: String::new(),
            strategy: if rc_enabled {
                "coupling".to_string()
            } else {
                "coupling-no-rc".to_string()
            },
            rows,
        },
        report,
        psnr_vs_gen1,
        stream_fpr,
        yhat_fpr,
        recon_fpr,
        last_recon: last_recon.expect("n ≥ 1"),
    })
}

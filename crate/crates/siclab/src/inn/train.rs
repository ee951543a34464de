//! Training for the coupling codec, and the fragility probe that tracks how
//! re-compression stability erodes as rate–distortion training proceeds.
//!
//! The objective is plain RD: estimated bits (latent + hyper, both under
//! additive-noise relaxation) plus λ × MSE of the *inverse* transform of the
//! noised latent. There is no quantization error inside the transform pair
//! itself — couplings invert exactly — so all distortion pressure lands on
//! how the learned directions scale the noise, which is precisely the
//! quantity the successive-compression experiments then measure.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::codec::inn_cycle;
use super::net::{
    inn_entropy_params_var, inn_forward_var, inn_hyper_analysis_var, inn_inverse_var,
};
use super::{InnConfig, InnModel, InnVars};
use crate::coder::rate_bits_var;
use crate::error::{Result, SicError};
use crate::harness::mse_u8;
use crate::quant::{noise_tensor, rc};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::training::loss::PIXEL_SCALE_SQ;
use crate::training::{Adam, Corpus, LossSet, TrainSchedule, LOG_FILE, SALT_DATA, SALT_NOISE};

/// Checkpoint file name inside a coupling-codec training directory.
pub const INN_MODEL_FILE: &str = "model.innw";

/// Header of the coupling-codec training log CSV.
pub const INN_LOG_HEADER: &str = "step,bpp_est,mse,total,lr";

/// Header of the fragility-probe CSV.
pub const PROBE_HEADER: &str = "step,rd_loss,first_gen_loss";

/// Loss terms for one batch, as plain numbers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnLossReport {
    pub total: f64,
    pub bpp: f64,
    pub mse: f64,
}

impl InnLossReport {
    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.bpp.is_finite() && self.mse.is_finite()
    }
}

struct InnLossVars {
    total: Var,
    bpp: Var,
    mse: Var,
}

impl InnLossVars {
    fn report(&self, tape: &Tape<f32>) -> InnLossReport {
        let read = |v: Var| tape.value(v).item() as f64;
        InnLossReport {
            total: read(self.total),
            bpp: read(self.bpp),
            mse: read(self.mse),
        }
    }
}

/// RD graph for one batch of [B,3,P,P] patches: noisy latents through the
/// rate model, their exact inverse through the distortion term.
fn build_inn_loss(
    tape: &mut Tape<f32>,
    vars: &InnVars,
    cfg: &InnConfig,
    x: Var,
    rng: &mut ChaCha8Rng,
) -> Result<InnLossVars> {
    let xs = tape.shape(x).to_vec();
    let npix = (xs[0] * xs[2] * xs[3]) as f64;

    let y = inn_forward_var(tape, vars, cfg, x)?;
    let yshape = tape.shape(y).to_vec();
    let (lh, lw) = (yshape[2], yshape[3]);
    let ny = tape.constant(noise_tensor::<f32, _>(yshape, rng));
    let yt = tape.add(y, ny)?;

    let z = inn_hyper_analysis_var(tape, vars, yt)?;
    let zshape = tape.shape(z).to_vec();
    let nz = tape.constant(noise_tensor::<f32, _>(zshape.clone(), rng));
    let zt = tape.add(z, nz)?;

    let (mu, sigma) = inn_entropy_params_var(tape, vars, cfg, zt, lh, lw)?;
    let bits_y = rate_bits_var(tape, yt, mu, sigma)?;

    let zero = tape.constant(Tensor::<f32>::zeros(zshape));
    let mu_z = tape.bias_add(zero, vars.get("hyper_prior.mu")?)?;
    let raw_z = tape.bias_add(zero, vars.get("hyper_prior.sigma_raw")?)?;
    let sp_z = tape.softplus(raw_z);
    let sigma_z = tape.add_scalar(sp_z, cfg.sigma_floor);
    let bits_z = rate_bits_var(tape, zt, mu_z, sigma_z)?;

    let bits = tape.add(bits_y, bits_z)?;
    let bpp = tape.scale(bits, 1.0 / npix);

    let xhat = inn_inverse_var(tape, vars, cfg, yt)?;
    let mse01 = tape.mse(x, xhat)?;
    let mse = tape.scale(mse01, PIXEL_SCALE_SQ);

    let lam = tape.scale(mse, cfg.lambda);
    let total = tape.add(bpp, lam)?;
    Ok(InnLossVars { total, bpp, mse })
}

#[derive(Debug)]
pub struct InnTrainOutput {
    pub model: InnModel,
    pub log_csv: String,
    pub last: Option<InnLossReport>,
    pub steps_run: u64,
    pub model_path: Option<PathBuf>,
}

fn fmt_num(v: f64) -> String {
    format!("{}", v as f32)
}

fn log_row(csv: &mut String, step: u64, r: &InnLossReport, lr: f64) {
    writeln!(
        csv,
        "{step},{},{},{},{lr}",
        fmt_num(r.bpp),
        fmt_num(r.mse),
        fmt_num(r.total)
    )
    .expect("string write");
}

fn validate_inn_schedule(cfg: &InnConfig, sched: &TrainSchedule) -> Result<()> {
    cfg.validate()?;
    sched.validate_for_multiple(cfg.spatial_multiple())?;
    if sched.loss_set != LossSet::Rd {
        return Err(SicError::config(format!(
            "coupling codec trains on the plain rd objective; {} is not supported",
            sched.loss_set
        )));
    }
    Ok(())
}

fn run_training(
    cfg: &InnConfig,
    sched: &TrainSchedule,
    corpus: &Corpus,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(u64, f64, &InnLossReport),
    mut probe: impl FnMut(u64, &InnModel) -> Result<()>,
    probe_every: u64,
) -> Result<InnTrainOutput> {
    validate_inn_schedule(cfg, sched)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let model_path = out_dir.map(|d| d.join(INN_MODEL_FILE));

    let mut model = InnModel::init(cfg)?;
    let mut opt = Adam::new();
    let mut data_rng = ChaCha8Rng::seed_from_u64(sched.seed ^ SALT_DATA);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(sched.seed ^ SALT_NOISE);

    let mut csv = String::new();
    csv.push_str(INN_LOG_HEADER);
    csv.push('\n');
    let mut last = None;

    let flush = |csv: &str, model: &InnModel| -> Result<()> {
        if let (Some(dir), Some(path)) = (out_dir, &model_path) {
            model.save(path)?;
            std::fs::write(dir.join(LOG_FILE), csv)?;
        }
        Ok(())
    };

    if probe_every > 0 {
        probe(0, &model)?;
    }

    for step in 1..=sched.steps {
        let lr = sched.lr_at(step);
        let batch = corpus.sample_batch(&mut data_rng, sched.batch, sched.patch)?;

        let mut tape = Tape::<f32>::new();
        let vars = model.vars(&mut tape, true);
        let x = tape.constant(batch);
        let lv = build_inn_loss(&mut tape, &vars, cfg, x, &mut noise_rng)?;
        let report = lv.report(&tape);
        if !report.is_finite() {
            flush(&csv, &model)?;
            return Err(SicError::numeric(format!(
                "training diverged at step {step}: {report:?}"
            )));
        }
        tape.backward(lv.total)?;

        let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for (name, var) in vars.iter() {
            if let Some(g) = tape.grad(var) {
                grads.insert(name.to_string(), g.clone());
            }
        }
        drop(tape);
        opt.step_arrays(lr, model.arrays_mut(), &grads)?;

        if step == 1 || step == sched.steps || step % sched.log_every == 0 {
            log_row(&mut csv, step, &report, lr);
            progress(step, lr, &report);
        }
        if step % sched.save_every == 0 && step != sched.steps {
            flush(&csv, &model)?;
        }
        if probe_every > 0 && (step % probe_every == 0 || step == sched.steps) {
            probe(step, &model)?;
        }
        last = Some(report);
    }

    flush(&csv, &model)?;
    Ok(InnTrainOutput {
        model,
        log_csv: csv,
        last,
        steps_run: sched.steps,
        model_path,
    })
}

/// Fit a coupling codec. Same contract as the dense codec's trainer: seeded,
/// bit-reproducible, checkpoint + log flushed to `out_dir` when given.
pub fn inn_train(
    cfg: &InnConfig,
    sched: &TrainSchedule,
    corpus: &Corpus,
    out_dir: Option<&Path>,
    progress: impl FnMut(u64, f64, &InnLossReport),
) -> Result<InnTrainOutput> {
    run_training(cfg, sched, corpus, out_dir, progress, |_, _| Ok(()), 0)
}

/// One probe-curve sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeRow {
    pub step: u64,
    /// real-cycle RD value at this checkpoint: bpp₁ + λ·mse₁
    pub rd_loss: f64,
    /// mse₂ − mse₁ across one rounded generation (0–255 scale)
    pub first_gen_loss: f64,
}

/// CSV form of a probe curve.
pub fn probe_csv(rows: &[ProbeRow]) -> String {
    let mut out = String::from(PROBE_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(out, "{},{},{}", r.step, r.rd_loss, r.first_gen_loss).expect("string write");
    }
    out
}

fn probe_point(model: &InnModel, x0: &Tensor<f64>) -> Result<(f64, f64)> {
    let x0_rc = rc(x0);
    let c1 = inn_cycle(model, &x0_rc.real)?;
    let r1 = rc(&c1.dec.x);
    let m1 = mse_u8(&r1.bytes, &x0_rc.bytes)?;
    let c2 = inn_cycle(model, &r1.real)?;
    let r2 = rc(&c2.dec.x);
    let m2 = mse_u8(&r2.bytes, &x0_rc.bytes)?;
    Ok((c1.enc.bpp + model.cfg().lambda * m1, m2 - m1))
}

/// Train while sampling the stability of the *current* weights: before the
/// first update and every `probe_every` steps (plus the last), run two real
/// rounded generations on `probe_image` and record (rd, mse₂ − mse₁). The
/// step-0 row measures the identity-coupling init, whose pixel-aligned
/// latents round to themselves — its first-generation loss is exactly zero.
pub fn training_fragility_probe(
    cfg: &InnConfig,
    sched: &TrainSchedule,
    corpus: &Corpus,
    probe_image: &Tensor<f64>,
    probe_every: u64,
    out_dir: Option<&Path>,
    progress: impl FnMut(u64, f64, &InnLossReport),
) -> Result<(InnTrainOutput, Vec<ProbeRow>)> {
    if probe_every == 0 {
        return Err(SicError::usage("probe interval must be ≥ 1"));
    }
    let s = probe_image.shape();
    let mult = cfg.spatial_multiple();
    if s.len() != 4 || s[1] != 3 || s[2] % mult != 0 || s[3] % mult != 0 {
        return Err(SicError::usage(format!(
            "probe image must be [1,3,H,W] with dims multiples of {mult}, got {s:?}"
        )));
    }
    let mut rows: Vec<ProbeRow> = Vec::new();
    let out = run_training(
        cfg,
        sched,
        corpus,
        out_dir,
        progress,
        |step, model| {
            if rows.last().map(|r| r.step) == Some(step) {
                return Ok(()); // final step coincided with the cadence
            }
            let (rd_loss, first_gen_loss) = probe_point(model, probe_image)?;
            rows.push(ProbeRow {
                step,
                rd_loss,
                first_gen_loss,
            });
            Ok(())
        },
        probe_every,
    )?;
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("probe.csv"), probe_csv(&rows))?;
    }
    Ok((out, rows))
}

//! Model fitting: schedule, losses, Adam, corpus sampling, and the training
//! loop itself. Every run is a pure function of (config, schedule, corpus):
//! data order, quantization noise, and updates all come from seeded ChaCha
//! streams, so reruns produce bit-identical checkpoints and logs.

pub mod adam;
pub mod data;
pub mod loss;
pub mod schedule;

pub use adam::Adam;
pub use data::Corpus;
pub use loss::{build_loss, LossReport, LossVars};
pub use schedule::{LossSet, TrainSchedule};

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{CodecConfig, ModelParams};
use crate::error::{Result, SicError};
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Header of the training log CSV. `fi` and `rl` stay empty for loss sets
/// that don't include them.
pub const LOG_HEADER: &str = "step,bpp_est,mse,fi,rl,total,lr";

/// Checkpoint file name inside a training output directory.
pub const MODEL_FILE: &str = "model.sicw";

/// Training log file name inside a training output directory.
pub const LOG_FILE: &str = "train_log.csv";

// Salts that split the schedule seed into independent streams.
pub(crate) const SALT_DATA: u64 = 0x7261_7720_7061_7463;
pub(crate) const SALT_NOISE: u64 = 0x6e6f_6973_6520_7374;

#[derive(Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub log_csv: String,
    pub last: Option<LossReport>,
    pub steps_run: u64,
    /// checkpoint path, when an output directory was given
    pub model_path: Option<PathBuf>,
}

fn fmt_num(v: f64) -> String {
    // losses are f32 reads; the shortest-roundtrip f32 form keeps logs stable
    format!("{}", v as f32)
}

fn log_row(csv: &mut String, step: u64, report: &LossReport, lr: f64) {
    let fi = report.fi.map(fmt_num).unwrap_or_default();
    let rl = report.rl.map(fmt_num).unwrap_or_default();
    writeln!(
        csv,
        "{step},{},{},{fi},{rl},{},{lr}",
        fmt_num(report.bpp),
        fmt_num(report.mse),
        fmt_num(report.total),
    )
    .expect("string write");
}

/// Fit a model. When `out_dir` is given, the checkpoint (plus config
/// sidecar) and the log CSV are (re)written there every `save_every` steps
/// and at the end, so an interrupted run keeps its latest state. `progress`
/// fires on every logged step with (step, lr, report).
pub fn train(
    cfg: &CodecConfig,
    sched: &TrainSchedule,
    corpus: &Corpus,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(u64, f64, &LossReport),
) -> Result<TrainOutput> {
    cfg.validate()?;
    sched.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let model_path = out_dir.map(|d| d.join(MODEL_FILE));

    let mut params = ModelParams::init(cfg)?;
    let mut opt = Adam::new();
    let mut data_rng = ChaCha8Rng::seed_from_u64(sched.seed ^ SALT_DATA);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(sched.seed ^ SALT_NOISE);

    let mut csv = String::new();
    csv.push_str(LOG_HEADER);
    csv.push('\n');
    let mut last = None;

    let flush = |csv: &str, params: &ModelParams| -> Result<()> {
        if let (Some(dir), Some(path)) = (out_dir, &model_path) {
            params.save(path, cfg)?;
            std::fs::write(dir.join(LOG_FILE), csv)?;
        }
        Ok(())
    };

    for step in 1..=sched.steps {
        let lr = sched.lr_at(step);
        let batch = corpus.sample_batch(&mut data_rng, sched.batch, sched.patch)?;

        let mut tape = Tape::<f32>::new();
        let pv = params.vars(&mut tape, true);
        let x = tape.constant(batch);
        let lv = build_loss(&mut tape, &pv, cfg, x, sched.loss_set, &mut noise_rng)?;
        let report = lv.report(&tape);
        if !report.is_finite() {
            flush(&csv, &params)?;
            return Err(SicError::numeric(format!(
                "training diverged at step {step}: {report:?}"
            )));
        }
        tape.backward(lv.total)?;

        let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for (name, var) in pv.iter() {
            if let Some(g) = tape.grad(var) {
                grads.insert(name.to_string(), g.clone());
            }
        }
        drop(tape);
        opt.step(lr, &mut params, &grads)?;

        if step == 1 || step == sched.steps || step % sched.log_every == 0 {
            log_row(&mut csv, step, &report, lr);
            progress(step, lr, &report);
        }
        if step % sched.save_every == 0 && step != sched.steps {
            flush(&csv, &params)?;
        }
        last = Some(report);
    }

    flush(&csv, &params)?;
    Ok(TrainOutput {
        params,
        log_csv: csv,
        last,
        steps_run: sched.steps,
        model_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::TrainRelax;

    fn tiny_setup() -> (CodecConfig, TrainSchedule, Corpus) {
        let mut cfg = CodecConfig::toy(8, 0.01, 33);
        cfg.n = 8;
        let sched = TrainSchedule {
            steps: 6,
            batch: 1,
            lr: 1e-4,
            lr_drop_step: 5,
            lr_final: 1e-5,
            patch: 32,
            loss_set: LossSet::Rd,
            seed: 77,
            save_every: 3,
            log_every: 2,
        };
        let corpus = Corpus::synthetic(5, 2, 48, 48);
        (cfg, sched, corpus)
    }

    #[test]
    fn reruns_are_bit_identical_including_artifacts() {
        let (cfg, sched, corpus) = tiny_setup();
        let run = |dir: &Path| {
            let out = train(&cfg, &sched, &corpus, Some(dir), |_, _, _| {}).unwrap();
            let ck = std::fs::read(dir.join(MODEL_FILE)).unwrap();
            let log = std::fs::read_to_string(dir.join(LOG_FILE)).unwrap();
            (out.log_csv, ck, log)
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let (csv1, ck1, log1) = run(d1.path());
        let (csv2, ck2, log2) = run(d2.path());
        assert_eq!(csv1, csv2);
        assert_eq!(ck1, ck2);
        assert_eq!(log1, log2);
        assert_eq!(csv1, log1);
        // log shape: header + steps 1,2,4,6
        let lines: Vec<_> = csv1.trim_end().lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("1,"));
        assert!(lines[4].starts_with("6,"));
        // lr column reflects the drop
        assert!(lines[3].ends_with("0.0001"));
        assert!(lines[4].ends_with("0.00001"));
    }

    #[test]
    fn saved_checkpoint_reloads_and_matches_memory() {
        let (cfg, sched, corpus) = tiny_setup();
        let dir = tempfile::tempdir().unwrap();
        let out = train(&cfg, &sched, &corpus, Some(dir.path()), |_, _, _| {}).unwrap();
        let (loaded, lcfg) =
            ModelParams::load(&dir.path().join(MODEL_FILE), Some(&cfg)).unwrap();
        assert_eq!(lcfg, cfg);
        for name in out.params.names() {
            assert_eq!(
                loaded.get(name).unwrap().data(),
                out.params.get(name).unwrap().data(),
                "{name}"
            );
        }
    }

    #[test]
    fn loss_descends_on_a_short_run() {
        let mut cfg = CodecConfig::toy(8, 0.01, 12);
        cfg.n = 8;
        let sched = TrainSchedule {
            steps: 60,
            batch: 1,
            lr: 3e-4,
            lr_drop_step: 60,
            lr_final: 3e-5,
            patch: 32,
            loss_set: LossSet::Rd,
            seed: 3,
            save_every: 1000,
            log_every: 1,
        };
        let corpus = Corpus::synthetic(9, 2, 48, 48);
        let mut totals = Vec::new();
        let out = train(&cfg, &sched, &corpus, None, |_, _, r| totals.push(r.total)).unwrap();
        assert_eq!(totals.len(), 60);
        assert!(out.model_path.is_none());
        let head: f64 = totals[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = totals[55..].iter().sum::<f64>() / 5.0;
        assert!(
            tail < 0.8 * head,
            "no descent: first {head:.3}, last {tail:.3}"
        );
    }

    #[test]
    fn divergence_aborts_with_numeric_error() {
        let (cfg, mut sched, corpus) = tiny_setup();
        sched.steps = 25;
        sched.lr = 1e5;
        sched.lr_drop_step = 25;
        sched.lr_final = 1e5;
        let err = train(&cfg, &sched, &corpus, None, |_, _, _| {}).unwrap_err();
        assert!(matches!(err, SicError::Numeric(_)), "{err}");
    }

    #[test]
    fn ste_schedule_trains_too() {
        let (mut cfg, mut sched, corpus) = tiny_setup();
        cfg.train_relax = TrainRelax::Ste;
        sched.steps = 4;
        sched.lr_drop_step = 4;
        let out = train(&cfg, &sched, &corpus, None, |_, _, _| {}).unwrap();
        assert!(out.last.unwrap().is_finite());
    }
}

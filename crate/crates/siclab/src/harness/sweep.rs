//! Channel-relaxation sweep and multi-strategy comparison.

use serde::Serialize;
use std::fmt::Write as _;

use crate::codec::{CodecConfig, ModelParams};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::training::{train, Corpus, TrainSchedule};

use super::trace::GenerationTrace;
use super::run_set;

/// One row of the channel sweep — means over the evaluation set, or an
/// error note when that M failed (the sweep never aborts early).
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub m: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reversibility: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_gen_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bpp1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psnr1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub const SWEEP_CSV_HEADER: &str = "m,reversibility,first_gen_loss,bpp1,psnr1,error";

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(SWEEP_CSV_HEADER);
    out.push('\n');
    let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.m,
            f(r.reversibility),
            f(r.first_gen_loss),
            f(r.bpp1),
            f(r.psnr1),
            r.error.clone().unwrap_or_default(),
        )
        .expect("string write");
    }
    out
}

fn mean(vals: &[f64]) -> f64 {
    vals.iter().sum::<f64>() / vals.len() as f64
}

/// Train one model per M (identical seed and schedule) and measure
/// reversibility, first-generation loss, and the first-generation operating
/// point on the evaluation set.
pub fn sweep_channels(
    cfg_base: &CodecConfig,
    m_list: &[usize],
    sched: &TrainSchedule,
    train_corpus: &Corpus,
    eval_set: &[(String, Tensor<f32>)],
    jobs: usize,
    mut progress: impl FnMut(usize, &SweepRow),
) -> Vec<SweepRow> {
    let mut rows = Vec::with_capacity(m_list.len());
    for &m in m_list {
        let mut cfg = cfg_base.clone();
        cfg.m = m;
        let row = match sweep_one(&cfg, sched, train_corpus, eval_set, jobs) {
            Ok(row) => row,
            Err(e) => SweepRow {
                m,
                reversibility: None,
                first_gen_loss: None,
                bpp1: None,
                psnr1: None,
                error: Some(e.to_string()),
            },
        };
        progress(m, &row);
        rows.push(row);
    }
    rows
}

fn sweep_one(
    cfg: &CodecConfig,
    sched: &TrainSchedule,
    train_corpus: &Corpus,
    eval_set: &[(String, Tensor<f32>)],
    jobs: usize,
) -> Result<SweepRow> {
    let trained = train(cfg, sched, train_corpus, None, |_, _, _| {})?;
    let results = run_set(
        cfg,
        &trained.params,
        eval_set,
        2,
        true,
        &format!("m{}", cfg.m),
        jobs,
    )?;
    let mut rev = Vec::new();
    let mut fgl = Vec::new();
    let mut bpp1 = Vec::new();
    let mut psnr1 = Vec::new();
    for (trace, report) in &results {
        rev.push(report.reversibility);
        fgl.push(report.first_gen_loss.expect("two generations ran"));
        bpp1.push(trace.rows[1].bpp.expect("generation row"));
        psnr1.push(trace.rows[1].psnr_db);
    }
    Ok(SweepRow {
        m: cfg.m,
        reversibility: Some(mean(&rev)),
        first_gen_loss: Some(mean(&fgl)),
        bpp1: Some(mean(&bpp1)),
        psnr1: Some(mean(&psnr1)),
        error: None,
    })
}

/// A labeled checkpoint entering the strategy comparison.
pub struct StrategyModel {
    pub label: String,
    pub cfg: CodecConfig,
    pub params: ModelParams,
}

#[derive(Debug, Clone, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

fn stat(vals: &[f64]) -> Stat {
    Stat {
        mean: mean(vals),
        min: vals.iter().cloned().fold(f64::INFINITY, f64::min),
        max: vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StrategySummary {
    pub strategy: String,
    /// mean PSNR per generation, index 0 ↔ generation 1
    pub mean_psnr_by_gen: Vec<f64>,
    /// mean bpp per generation, index 0 ↔ generation 1
    pub mean_bpp_by_gen: Vec<f64>,
    pub psnr_gen1: Stat,
    pub psnr_gen_last: Stat,
    pub mean_first_gen_loss: f64,
    pub mean_reversibility: f64,
    /// images that reached a bit-exact fixed point within n generations
    pub fixed_point_images: usize,
    /// mean final-generation PSNR minus the baseline strategy's
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_final_psnr_vs_baseline: Option<f64>,
}

#[derive(Serialize)]
pub struct StrategyReport {
    pub generations: usize,
    /// ordered by final-generation mean PSNR, best first
    pub summaries: Vec<StrategySummary>,
    pub warnings: Vec<String>,
    pub traces: Vec<GenerationTrace>,
}

/// Run every strategy in `model_table` over `x_set` for `n` generations.
/// The first table entry is the baseline for deltas. A strategy whose run
/// fails is skipped with a warning, not a hard error.
pub fn compare_strategies(
    x_set: &[(String, Tensor<f32>)],
    model_table: &[StrategyModel],
    n: usize,
    jobs: usize,
) -> StrategyReport {
    let mut summaries = Vec::new();
    let mut warnings = Vec::new();
    let mut traces = Vec::new();
    let mut baseline_final: Option<f64> = None;

    for entry in model_table {
        let results = match run_set(
            &entry.cfg,
            &entry.params,
            x_set,
            n,
            true,
            &entry.label,
            jobs,
        ) {
            Ok(r) => r,
            Err(e) => {
                warnings.push(format!("strategy '{}' skipped: {e}", entry.label));
                continue;
            }
        };
        let mut psnr_by_gen = vec![Vec::new(); n];
        let mut bpp_by_gen = vec![Vec::new(); n];
        let mut fgl = Vec::new();
        let mut rev = Vec::new();
        let mut fixed = 0usize;
        for (trace, report) in &results {
            for g in 1..=n {
                psnr_by_gen[g - 1].push(trace.rows[g].psnr_db);
                bpp_by_gen[g - 1].push(trace.rows[g].bpp.expect("generation row"));
            }
            if let Some(v) = report.first_gen_loss {
                fgl.push(v);
            }
            rev.push(report.reversibility);
            if report.fixed_point_gen.is_some() {
                fixed += 1;
            }
        }
        let mean_psnr_by_gen: Vec<f64> = psnr_by_gen.iter().map(|v| mean(v)).collect();
        let mean_bpp_by_gen: Vec<f64> = bpp_by_gen.iter().map(|v| mean(v)).collect();
        let final_mean = *mean_psnr_by_gen.last().expect("n ≥ 1");
        if baseline_final.is_none() {
            baseline_final = Some(final_mean);
        }
        summaries.push(StrategySummary {
            strategy: entry.label.clone(),
            psnr_gen1: stat(&psnr_by_gen[0]),
            psnr_gen_last: stat(&psnr_by_gen[n - 1]),
            mean_psnr_by_gen,
            mean_bpp_by_gen,
            mean_first_gen_loss: if fgl.is_empty() { f64::NAN } else { mean(&fgl) },
            mean_reversibility: mean(&rev),
            fixed_point_images: fixed,
            delta_final_psnr_vs_baseline: baseline_final.map(|b| final_mean - b),
        });
        traces.extend(results.into_iter().map(|(t, _)| t));
    }

    summaries.sort_by(|a, b| b.psnr_gen_last.mean.total_cmp(&a.psnr_gen_last.mean));
    StrategyReport {
        generations: n,
        summaries,
        warnings,
        traces,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::QuantMode;
    use crate::training::LossSet;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_img(seed: u64, h: usize, w: usize) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * h * w).map(|_| rng.gen_range(0.0f32..1.0)).collect();
        Tensor::new(vec![1, 3, h, w], data).unwrap()
    }

    fn tiny_sched() -> TrainSchedule {
        TrainSchedule {
            steps: 2,
            batch: 1,
            lr: 1e-4,
            lr_drop_step: 2,
            lr_final: 1e-5,
            patch: 32,
            loss_set: LossSet::Rd,
            seed: 4,
            save_every: 100,
            log_every: 100,
        }
    }

    #[test]
    fn sweep_continues_past_failing_entries() {
        let mut cfg = CodecConfig::toy(8, 0.01, 6);
        cfg.n = 8;
        let corpus = Corpus::synthetic(11, 2, 48, 48);
        let eval = vec![("e0".to_string(), rand_img(12, 32, 32))];
        // m = 4 violates the minimum channel count and must fail cleanly
        let rows = sweep_channels(&cfg, &[4, 8], &tiny_sched(), &corpus, &eval, 1, |_, _| {});
        assert_eq!(rows.len(), 2);
        assert!(rows[0].error.is_some());
        assert!(rows[0].reversibility.is_none());
        assert!(rows[1].error.is_none());
        assert!(rows[1].reversibility.unwrap() >= 0.0);
        assert!(rows[1].bpp1.unwrap() > 0.0);
        let csv = sweep_to_csv(&rows);
        assert!(csv.starts_with(SWEEP_CSV_HEADER));
        assert_eq!(csv.trim_end().lines().count(), 3);
    }

    #[test]
    fn comparison_report_orders_and_labels() {
        let mut c1 = CodecConfig::toy(8, 0.01, 6);
        c1.n = 8;
        let mut c2 = c1.clone();
        c2.quant_mode = QuantMode::Straight;
        let p1 = ModelParams::init(&c1).unwrap();
        let p2 = ModelParams::init(&c2).unwrap();
        let table = vec![
            StrategyModel {
                label: "corrected".into(),
                cfg: c1,
                params: p1,
            },
            StrategyModel {
                label: "straight".into(),
                cfg: c2,
                params: p2,
            },
        ];
        let xs = vec![
            ("a".to_string(), rand_img(13, 32, 32)),
            ("b".to_string(), rand_img(14, 32, 32)),
        ];
        let report = compare_strategies(&xs, &table, 2, 1);
        assert_eq!(report.summaries.len(), 2);
        assert_eq!(report.traces.len(), 4);
        assert!(report.warnings.is_empty());
        assert!(
            report.summaries[0].psnr_gen_last.mean >= report.summaries[1].psnr_gen_last.mean,
            "not ordered"
        );
        let base = report
            .summaries
            .iter()
            .find(|s| s.strategy == "corrected")
            .unwrap();
        assert_eq!(base.delta_final_psnr_vs_baseline, Some(0.0));
        assert_eq!(base.mean_psnr_by_gen.len(), 2);
        // JSON-serializable end to end
        let j = serde_json::to_string(&report).unwrap();
        assert!(j.contains("\"generations\":2"));
    }
}

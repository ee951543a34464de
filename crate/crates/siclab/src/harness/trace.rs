//! Trace records for successive-compression runs.

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// One generation of a trace. Row 0 is the original image: infinite PSNR
/// sentinel, no bitstream, no latent diff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub n: usize,
    pub psnr_db: f64,
    pub bpp: Option<f64>,
    pub latent_changed: Option<u64>,
    pub clip_events: Option<u64>,
}

impl TraceRow {
    pub fn original() -> TraceRow {
        TraceRow {
            n: 0,
            psnr_db: f64::INFINITY,
            bpp: None,
            latent_changed: None,
            clip_events: None,
        }
    }
}

/// All generations of one image under one strategy label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub image_id: String,
    pub strategy: String,
    pub rows: Vec<TraceRow>,
}

pub const TRACE_CSV_HEADER: &str = "image_id,strategy,n,psnr_db,bpp,latent_changed,clip_events";

fn fmt_opt_f64(v: Option<f64>) -> String {
    v.map(|x| format!("{}", x)).unwrap_or_default()
}

fn fmt_opt_u64(v: Option<u64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl GenerationTrace {
    /// Append this trace's rows (no header) to a CSV buffer.
    pub fn append_csv(&self, out: &mut String) {
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                self.image_id,
                self.strategy,
                r.n,
                if r.psnr_db.is_infinite() { "inf".to_string() } else { format!("{}", r.psnr_db) },
                fmt_opt_f64(r.bpp),
                fmt_opt_u64(r.latent_changed),
                fmt_opt_u64(r.clip_events),
            )
            .expect("string write");
        }
    }

    /// PSNR of the last generation, or the sentinel if only row 0 exists.
    pub fn final_psnr(&self) -> f64 {
        self.rows.last().map(|r| r.psnr_db).unwrap_or(f64::INFINITY)
    }

    pub fn psnr_at(&self, n: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.n == n).map(|r| r.psnr_db)
    }
}

/// Whole-CSV form of a set of traces.
pub fn traces_to_csv(traces: &[GenerationTrace]) -> String {
    let mut out = String::from(TRACE_CSV_HEADER);
    out.push('\n');
    for t in traces {
        t.append_csv(&mut out);
    }
    out
}

/// Parse a CSV produced by [`traces_to_csv`], regrouping consecutive rows by
/// (image_id, strategy).
pub fn traces_from_csv(text: &str) -> crate::error::Result<Vec<GenerationTrace>> {
    use crate::error::SicError;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == TRACE_CSV_HEADER => {}
        other => {
            return Err(SicError::data(format!(
                "trace CSV header is {other:?}, want '{TRACE_CSV_HEADER}'"
            )))
        }
    }
    let mut traces: Vec<GenerationTrace> = Vec::new();
    for (ln, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(SicError::data(format!(
                "trace CSV line {}: {} fields, want 7",
                ln + 2,
                f.len()
            )));
        }
        let bad = |what: &str| SicError::data(format!("trace CSV line {}: bad {what}", ln + 2));
        let psnr = if f[3] == "inf" {
            f64::INFINITY
        } else {
            f[3].parse::<f64>().map_err(|_| bad("psnr_db"))?
        };
        let opt_f = |s: &str, what: &str| -> crate::error::Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                Ok(Some(s.parse::<f64>().map_err(|_| bad(what))?))
            }
        };
        let opt_u = |s: &str, what: &str| -> crate::error::Result<Option<u64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                Ok(Some(s.parse::<u64>().map_err(|_| bad(what))?))
            }
        };
        let row = TraceRow {
            n: f[2].parse().map_err(|_| bad("n"))?,
            psnr_db: psnr,
            bpp: opt_f(f[4], "bpp")?,
            latent_changed: opt_u(f[5], "latent_changed")?,
            clip_events: opt_u(f[6], "clip_events")?,
        };
        match traces.last_mut() {
            Some(t) if t.image_id == f[0] && t.strategy == f[1] => t.rows.push(row),
            _ => traces.push(GenerationTrace {
                image_id: f[0].to_string(),
                strategy: f[1].to_string(),
                rows: vec![row],
            }),
        }
    }
    Ok(traces)
}

/// Stability summary of one run. Distances are MSE on the 0–255 pixel
/// scale: `first_gen_loss` = d(x₂,x₀) − d(x₁,x₀) (needs ≥ 2 generations),
/// `reversibility` = d(x₀, x̄₀) with x̄₀ the synthesis of the unquantized
/// latent — smaller means a more reversible transform pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub first_gen_loss: Option<f64>,
    pub reversibility: f64,
    /// First n with x_n bit-identical to x_{n−1}, if reached.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fixed_point_gen: Option<usize>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<GenerationTrace> {
        vec![
            GenerationTrace {
                image_id: "img-a".into(),
                strategy: "corrected".into(),
                rows: vec![
                    TraceRow::original(),
                    TraceRow {
                        n: 1,
                        psnr_db: 33.25,
                        bpp: Some(0.41),
                        latent_changed: None,
                        clip_events: Some(0),
                    },
                    TraceRow {
                        n: 2,
                        psnr_db: 31.5,
                        bpp: Some(0.40),
                        latent_changed: Some(128),
                        clip_events: Some(0),
                    },
                ],
            },
            GenerationTrace {
                image_id: "img-b".into(),
                strategy: "straight".into(),
                rows: vec![TraceRow::original()],
            },
        ]
    }

    #[test]
    fn csv_round_trip_preserves_everything() {
        let traces = sample();
        let csv = traces_to_csv(&traces);
        assert!(csv.starts_with(TRACE_CSV_HEADER));
        assert!(csv.contains("img-a,corrected,0,inf,,,"));
        let back = traces_from_csv(&csv).unwrap();
        assert_eq!(back, traces);
    }

    #[test]
    fn malformed_csv_is_rejected() {
        assert!(traces_from_csv("nope\n1,2,3").is_err());
        let mut csv = String::from(TRACE_CSV_HEADER);
        csv.push_str("\na,b,zero,inf,,,\n");
        assert!(traces_from_csv(&csv).is_err());
    }

    #[test]
    fn trace_lookups() {
        let t = &sample()[0];
        assert_eq!(t.psnr_at(2), Some(31.5));
        assert_eq!(t.psnr_at(9), None);
        assert_eq!(t.final_psnr(), 31.5);
    }

    #[test]
    fn stability_report_json_drops_absent_fields() {
        let r = StabilityReport {
            first_gen_loss: None,
            reversibility: 12.5,
            fixed_point_gen: Some(4),
        };
        let s = serde_json::to_string(&r).unwrap();
        assert!(!s.contains("first_gen_loss"));
        assert!(s.contains("\"fixed_point_gen\":4"));
        let back: StabilityReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, r);
    }
}

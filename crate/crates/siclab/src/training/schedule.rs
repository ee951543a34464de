//! Training schedules: step counts, learning-rate step function, batch and
//! patch geometry, and which loss terms are active.

use crate::error::{Result, SicError};
use serde::{Deserialize, Serialize};

/// Which auxiliary terms join the rate-distortion objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossSet {
    #[serde(rename = "rd")]
    Rd,
    /// adds the feature-identity norm (baseline method)
    #[serde(rename = "rd+fi")]
    RdFi,
    /// adds the reversibility distortion with weight α from the codec config
    #[serde(rename = "rd+rl")]
    RdRl,
}

impl std::fmt::Display for LossSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossSet::Rd => "rd",
            LossSet::RdFi => "rd+fi",
            LossSet::RdRl => "rd+rl",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    /// from this step on, `lr_final` applies (step function)
    pub lr_drop_step: u64,
    pub lr_final: f64,
    pub patch: usize,
    pub loss_set: LossSet,
    pub seed: u64,
    /// checkpoint snapshot cadence (also the "last good" retention grid)
    #[serde(default = "default_save_every")]
    pub save_every: u64,
    /// loss CSV cadence
    #[serde(default = "default_log_every")]
    pub log_every: u64,
}

fn default_save_every() -> u64 {
    1000
}
fn default_log_every() -> u64 {
    50
}

impl TrainSchedule {
    /// Desk-scale default: 30k steps, batch 8, 64×64 patches, 1e-4 → 1e-5
    /// for the final ninth of training (the full-scale schedule's ratio).
    pub fn desk_default(seed: u64) -> TrainSchedule {
        TrainSchedule {
            steps: 30_000,
            batch: 8,
            lr: 1e-4,
            lr_drop_step: 26_667,
            lr_final: 1e-5,
            patch: 64,
            loss_set: LossSet::Rd,
            seed,
            save_every: default_save_every(),
            log_every: default_log_every(),
        }
    }

    /// Short smoke schedule (single-core friendly).
    pub fn smoke(seed: u64) -> TrainSchedule {
        TrainSchedule {
            steps: 2_000,
            batch: 4,
            lr: 1e-4,
            lr_drop_step: 1_800,
            lr_final: 1e-5,
            patch: 64,
            loss_set: LossSet::Rd,
            seed,
            save_every: 500,
            log_every: 20,
        }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.lr_drop_step {
            self.lr_final
        } else {
            self.lr
        }
    }

    /// Validate against the dense codec's 16× downsampling grid.
    pub fn validate(&self) -> Result<()> {
        self.validate_for_multiple(16)
    }

    /// Validate with a caller-chosen patch alignment (the coupling codec's
    /// stage factor differs from the dense codec's fixed 16).
    pub fn validate_for_multiple(&self, multiple: usize) -> Result<()> {
        if self.steps == 0 {
            return Err(SicError::config("schedule: steps must be > 0"));
        }
        if self.lr_drop_step > self.steps {
            return Err(SicError::config(format!(
                "schedule: lr_drop_step {} exceeds steps {}",
                self.lr_drop_step, self.steps
            )));
        }
        if self.batch == 0 || self.patch == 0 {
            return Err(SicError::config("schedule: batch and patch must be > 0"));
        }
        if self.patch % multiple != 0 {
            return Err(SicError::config(format!(
                "schedule: patch {} must be a multiple of {multiple}",
                self.patch
            )));
        }
        if !(self.lr > 0.0) || !(self.lr_final > 0.0) {
            return Err(SicError::config("schedule: learning rates must be > 0"));
        }
        if self.save_every == 0 || self.log_every == 0 {
            return Err(SicError::config("schedule: cadences must be > 0"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_is_a_step_function() {
        let s = TrainSchedule::desk_default(0);
        assert_eq!(s.lr_at(0), 1e-4);
        assert_eq!(s.lr_at(26_666), 1e-4);
        assert_eq!(s.lr_at(26_667), 1e-5);
        assert_eq!(s.lr_at(30_000), 1e-5);
    }

    #[test]
    fn json_round_trip_with_tagged_loss_set() {
        let mut s = TrainSchedule::smoke(9);
        s.loss_set = LossSet::RdRl;
        let j = serde_json::to_string(&s).unwrap();
        assert!(j.contains("\"rd+rl\""));
        let back: TrainSchedule = serde_json::from_str(&j).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn defaults_fill_missing_cadences() {
        let j = r#"{"steps":10,"batch":2,"lr":1e-4,"lr_drop_step":8,
                    "lr_final":1e-5,"patch":32,"loss_set":"rd","seed":1}"#;
        let s: TrainSchedule = serde_json::from_str(j).unwrap();
        assert_eq!(s.save_every, 1000);
        assert_eq!(s.log_every, 50);
        s.validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_schedules() {
        let mut s = TrainSchedule::smoke(0);
        s.lr_drop_step = s.steps + 1;
        assert!(s.validate().is_err());
        let mut s = TrainSchedule::smoke(0);
        s.patch = 50;
        assert!(s.validate().is_err());
        let mut s = TrainSchedule::smoke(0);
        s.steps = 0;
        assert!(s.validate().is_err());
    }
}

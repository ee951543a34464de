//! Invertible-coupling codec: a mathematically invertible transform paired
//! with straight quantization. Because synthesis is the exact inverse of
//! analysis, re-encoding a decoded image reproduces the latents bit-for-bit —
//! as long as the image-domain rounding/clipping step between generations is
//! skipped. With that step enabled, pixel rounding noise is amplified by the
//! transform and quality decays again, which is the point of the study.

pub mod codec;
pub mod experiment;
pub mod net;
pub mod train;

pub use codec::{inn_cycle, inn_decode, inn_encode, InnCycle, InnDecoded, InnEncoded};
pub use experiment::{inn_reversibility_mse, inn_sic_experiment, InnRun};
pub use net::{inn_forward, inn_inverse};
pub use train::{
    inn_train, probe_csv, training_fragility_probe, InnLossReport, InnTrainOutput, ProbeRow,
    INN_LOG_HEADER, INN_MODEL_FILE, PROBE_HEADER,
};

use crate::codec::config::fnv1a64;
use crate::codec::params::{sidecar_path, softplus_inv, LayerSpec};
use crate::error::{Result, SicError};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Configuration of the coupling codec. The transform is a fixed-shape
/// stack: each stage is one 2×2 space-to-channel reshuffle followed by
/// `blocks_per_stage` additive coupling blocks; with `stages` = 4 an image
/// maps to an H/16 × W/16 grid of 768 channels, dimension preserved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnConfig {
    pub stages: usize,
    pub blocks_per_stage: usize,
    /// hidden width of each coupling subnet
    pub hidden: usize,
    /// channel width of the hyper transforms
    pub hyper_n: usize,
    pub lambda: f64,
    pub sigma_floor: f64,
    pub latent_clip: i32,
    pub seed: u64,
}

impl InnConfig {
    /// Desk-scale defaults: the full four-stage stack.
    pub fn toy(lambda: f64, seed: u64) -> InnConfig {
        InnConfig {
            stages: 4,
            blocks_per_stage: 2,
            hidden: 32,
            hyper_n: 48,
            lambda,
            sigma_floor: 0.04,
            latent_clip: 127,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages < 1 || self.stages > 4 {
            return Err(SicError::config(format!(
                "stages {} outside 1..=4",
                self.stages
            )));
        }
        if self.blocks_per_stage < 1 || self.blocks_per_stage > 8 {
            return Err(SicError::config(format!(
                "blocks_per_stage {} outside 1..=8",
                self.blocks_per_stage
            )));
        }
        if self.hidden < 4 {
            return Err(SicError::config(format!("hidden {} below 4", self.hidden)));
        }
        if self.hyper_n < 8 {
            return Err(SicError::config(format!("hyper_n {} below 8", self.hyper_n)));
        }
        if !(self.lambda > 0.0) {
            return Err(SicError::config(format!("lambda {} must be > 0", self.lambda)));
        }
        if !(self.sigma_floor > 0.0) {
            return Err(SicError::config(format!(
                "sigma_floor {} must be > 0",
                self.sigma_floor
            )));
        }
        if self.latent_clip < 1 || self.latent_clip > 4096 {
            return Err(SicError::config(format!(
                "latent_clip {} outside 1..=4096",
                self.latent_clip
            )));
        }
        Ok(())
    }

    /// Channels of the coded latent: 3·4^stages.
    pub fn latent_channels(&self) -> usize {
        3 * 4usize.pow(self.stages as u32)
    }

    /// Spatial dimensions must be multiples of this (2^stages).
    pub fn spatial_multiple(&self) -> usize {
        1 << self.stages
    }

    /// Channel count after reshuffle stage `s` (0-based).
    pub fn stage_channels(&self, s: usize) -> usize {
        3 * 4usize.pow(s as u32 + 1)
    }

    pub fn hyper_channels(&self) -> usize {
        self.hyper_n
    }

    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(json: &str) -> Result<InnConfig> {
        let cfg: InnConfig = serde_json::from_str(json)
            .map_err(|e| SicError::config(format!("bad coupling-codec config JSON: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hash(&self) -> u64 {
        fnv1a64(self.canonical_json().as_bytes())
    }
}

fn spec(name: String, shape: Vec<usize>, fan_in: usize) -> LayerSpec {
    LayerSpec { name, shape, fan_in }
}

/// Layer table in fixed declaration order. Coupling subnets are two 3×3
/// convs; the second is zero-initialized (fan_in = 0) so every block starts
/// as the identity and the whole transform starts as a pure reshuffle.
pub fn inn_layer_table(cfg: &InnConfig) -> Vec<LayerSpec> {
    let mut t = Vec::new();
    for s in 0..cfg.stages {
        let half = cfg.stage_channels(s) / 2;
        for b in 0..cfg.blocks_per_stage {
            t.push(spec(
                format!("couple.{s}.{b}.0.w"),
                vec![cfg.hidden, half, 3, 3],
                half * 9,
            ));
            t.push(spec(format!("couple.{s}.{b}.0.b"), vec![cfg.hidden], 0));
            t.push(spec(
                format!("couple.{s}.{b}.1.w"),
                vec![half, cfg.hidden, 3, 3],
                0,
            ));
            t.push(spec(format!("couple.{s}.{b}.1.b"), vec![half], 0));
        }
    }
    let c = cfg.latent_channels();
    let n = cfg.hyper_n;
    t.push(spec("h_a.0.w".into(), vec![n, c, 3, 3], c * 9));
    t.push(spec("h_a.0.b".into(), vec![n], 0));
    t.push(spec("h_a.1.w".into(), vec![n, n, 5, 5], n * 25));
    t.push(spec("h_a.1.b".into(), vec![n], 0));
    t.push(spec("h_a.2.w".into(), vec![n, n, 5, 5], n * 25));
    t.push(spec("h_a.2.b".into(), vec![n], 0));
    // transpose convs store kernels [in_ch, out_ch, k, k]
    t.push(spec("h_s.0.w".into(), vec![n, n, 5, 5], n * 25));
    t.push(spec("h_s.0.b".into(), vec![n], 0));
    t.push(spec("h_s.1.w".into(), vec![n, n, 5, 5], n * 25));
    t.push(spec("h_s.1.b".into(), vec![n], 0));
    t.push(spec("h_s.2.w".into(), vec![n, n, 3, 3], n * 9));
    t.push(spec("h_s.2.b".into(), vec![n], 0));
    t.push(spec("h_ep.0.w".into(), vec![n, n, 1, 1], n));
    t.push(spec("h_ep.0.b".into(), vec![n], 0));
    t.push(spec("h_ep.1.w".into(), vec![2 * c, n, 1, 1], n));
    t.push(spec("h_ep.1.b".into(), vec![2 * c], 0));
    t.push(spec("hyper_prior.mu".into(), vec![n], 0));
    t.push(spec("hyper_prior.sigma_raw".into(), vec![n], 0));
    t
}

/// Parameters of the coupling codec. Stored at 32-bit (checkpoint format);
/// the bijective evaluation path casts to 64-bit, where the forward/inverse
/// round trip stays below 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct InnModel {
    cfg: InnConfig,
    arrays: BTreeMap<String, Tensor<f32>>,
}

/// Tape handles for every parameter, keyed by name.
pub struct InnVars {
    map: BTreeMap<String, Var>,
}

impl InnVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| SicError::config(format!("model has no parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.map.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl InnModel {
    /// Seeded initialization: uniform first subnet layers, zero second
    /// layers (identity couplings), unit-σ hyper prior.
    pub fn init(cfg: &InnConfig) -> Result<InnModel> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut arrays = BTreeMap::new();
        for l in inn_layer_table(cfg) {
            let numel: usize = l.shape.iter().product();
            let t = if l.fan_in > 0 {
                let bound = (6.0 / l.fan_in as f64).sqrt();
                let data = (0..numel)
                    .map(|_| rng.gen_range(-bound..bound) as f32)
                    .collect();
                Tensor::new(l.shape, data)?
            } else if l.name == "hyper_prior.sigma_raw" {
                let raw = softplus_inv(1.0 - cfg.sigma_floor) as f32;
                Tensor::full(l.shape, raw)
            } else {
                Tensor::zeros(l.shape)
            };
            arrays.insert(l.name, t);
        }
        Ok(InnModel {
            cfg: cfg.clone(),
            arrays,
        })
    }

    pub fn cfg(&self) -> &InnConfig {
        &self.cfg
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.arrays
            .get(name)
            .ok_or_else(|| SicError::config(format!("model has no parameter '{name}'")))
    }

    pub fn arrays(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut BTreeMap<String, Tensor<f32>> {
        &mut self.arrays
    }

    /// Put every parameter on a tape at the tape's precision.
    pub fn vars<T: Scalar>(&self, tape: &mut Tape<T>, trainable: bool) -> InnVars {
        let map = self
            .arrays
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.cast::<T>(), trainable)))
            .collect();
        InnVars { map }
    }

    /// Write checkpoint bytes plus a JSON config sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new();
        for (k, t) in &self.arrays {
            ck.insert(k, t.clone());
        }
        ck.save(path)?;
        std::fs::write(sidecar_path(path), self.cfg.canonical_json())?;
        Ok(())
    }

    /// Load checkpoint plus sidecar, validating the exact name set and
    /// shapes the config derives.
    pub fn load(path: &Path, expect: Option<&InnConfig>) -> Result<InnModel> {
        let sidecar = sidecar_path(path);
        let json = std::fs::read_to_string(&sidecar).map_err(|e| {
            SicError::data(format!("cannot read config sidecar {}: {e}", sidecar.display()))
        })?;
        let cfg = InnConfig::from_json(&json)?;
        if let Some(e) = expect {
            if e.hash() != cfg.hash() {
                return Err(SicError::config(format!(
                    "config hash mismatch: expected {:016x}, checkpoint has {:016x}",
                    e.hash(),
                    cfg.hash()
                )));
            }
        }
        let ck = Checkpoint::load(path)?;
        let table = inn_layer_table(&cfg);
        if ck.arrays.len() != table.len() {
            return Err(SicError::config(format!(
                "checkpoint holds {} arrays, config derives {}",
                ck.arrays.len(),
                table.len()
            )));
        }
        let mut arrays = BTreeMap::new();
        for l in table {
            let t = ck.get(&l.name)?;
            if t.shape() != l.shape.as_slice() {
                return Err(SicError::config(format!(
                    "parameter '{}' has shape {:?}, config derives {:?}",
                    l.name,
                    t.shape(),
                    l.shape
                )));
            }
            arrays.insert(l.name, t.clone());
        }
        Ok(InnModel { cfg, arrays })
    }
}

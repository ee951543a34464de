//! Named parameter tensors for all codec networks.
//!
//! Every shape derives from [`CodecConfig`] alone, so a checkpoint can be
//! validated against the config before use. Initialization draws from a
//! ChaCha stream seeded by `config.seed`, walking the layer table in a fixed
//! order — identical configs always produce identical parameters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::CodecConfig;
use crate::error::{Result, SicError};
use crate::tensor::checkpoint::Checkpoint;
use crate::tensor::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One entry of the derived layer table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// fan-in used for the init bound; 0 means init to a constant instead
    pub fan_in: usize,
}

fn spec(name: &str, shape: Vec<usize>, fan_in: usize) -> LayerSpec {
    LayerSpec {
        name: name.to_string(),
        shape,
        fan_in,
    }
}

/// Weight+bias pair for a conv layer. For transpose convs the kernel is
/// [in_ch, out_ch, k, k]; for normal convs [out_ch, in_ch, k, k]. Fan-in is
/// the input-channel count times the receptive field either way.
fn conv_pair(table: &mut Vec<LayerSpec>, name: &str, kernel: Vec<usize>, in_c: usize, bias_c: usize) {
    let k = kernel[2];
    table.push(spec(&format!("{name}.w"), kernel, in_c * k * k));
    table.push(spec(&format!("{name}.b"), vec![bias_c], 0));
}

/// Full layer table for a config, in fixed declaration order.
pub fn layer_table(cfg: &CodecConfig) -> Vec<LayerSpec> {
    let n = cfg.n;
    let m = cfg.m;
    let cz = cfg.hyper_channels();
    let mut t = Vec::new();
    // analysis: 4 × conv k5 s2, widths 3 -> N -> N -> N -> M
    conv_pair(&mut t, "g_a.0", vec![n, 3, 5, 5], 3, n);
    conv_pair(&mut t, "g_a.1", vec![n, n, 5, 5], n, n);
    conv_pair(&mut t, "g_a.2", vec![n, n, 5, 5], n, n);
    conv_pair(&mut t, "g_a.3", vec![m, n, 5, 5], n, m);
    // synthesis mirror: 4 × transpose k5 s2, widths M -> N -> N -> N -> 3
    conv_pair(&mut t, "g_s.0", vec![m, n, 5, 5], m, n);
    conv_pair(&mut t, "g_s.1", vec![n, n, 5, 5], n, n);
    conv_pair(&mut t, "g_s.2", vec![n, n, 5, 5], n, n);
    conv_pair(&mut t, "g_s.3", vec![n, 3, 5, 5], n, 3);
    // hyper analysis on |y|: conv k3 s1, conv k5 s2, conv k5 s2
    conv_pair(&mut t, "h_a.0", vec![n, m, 3, 3], m, n);
    conv_pair(&mut t, "h_a.1", vec![n, n, 5, 5], n, n);
    conv_pair(&mut t, "h_a.2", vec![cz, n, 5, 5], n, cz);
    // hyper synthesis mirror: transpose k5 s2 × 2, conv k3 s1
    conv_pair(&mut t, "h_s.0", vec![cz, n, 5, 5], cz, n);
    conv_pair(&mut t, "h_s.1", vec![n, n, 5, 5], n, n);
    conv_pair(&mut t, "h_s.2", vec![n, n, 3, 3], n, n);
    if cfg.context_enabled {
        // masked 5×5 context conv over ŷ
        conv_pair(&mut t, "g_cm", vec![n, m, 5, 5], m, n);
    }
    // parameter fusion: two 1×1 convs -> (μ, σ_raw) stacked
    let ep_in = if cfg.context_enabled { 2 * n } else { n };
    conv_pair(&mut t, "g_ep.0", vec![n, ep_in, 1, 1], ep_in, n);
    conv_pair(&mut t, "g_ep.1", vec![2 * m, n, 1, 1], n, 2 * m);
    // static per-channel prior of the hyper latent
    t.push(spec("hyper_prior.mu", vec![cz], 0));
    t.push(spec("hyper_prior.sigma_raw", vec![cz], 0));
    t
}

/// inverse of x ↦ ln(1 + eˣ)
pub(crate) fn softplus_inv(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arrays: BTreeMap<String, Tensor<f32>>,
}

impl ModelParams {
    /// Seeded initialization: uniform weights with bound √(6/fan_in), zero
    /// biases, unit-σ hyper prior.
    pub fn init(cfg: &CodecConfig) -> Result<ModelParams> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut arrays = BTreeMap::new();
        for l in layer_table(cfg) {
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
        Ok(ModelParams { arrays })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.arrays
            .get(name)
            .ok_or_else(|| SicError::config(format!("model has no parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.arrays
            .get_mut(name)
            .ok_or_else(|| SicError::config(format!("model has no parameter '{name}'")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(|s| s.as_str())
    }

    pub fn arrays(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.arrays
    }

    pub fn arrays_mut(&mut self) -> &mut BTreeMap<String, Tensor<f32>> {
        &mut self.arrays
    }

    /// Put every parameter on a tape; trainable parameters become gradient
    /// leaves.
    pub fn vars(&self, tape: &mut Tape<f32>, trainable: bool) -> ParamVars {
        let map = self
            .arrays
            .iter()
            .map(|(k, t)| (k.clone(), tape.leaf(t.clone(), trainable)))
            .collect();
        ParamVars { map }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (k, t) in &self.arrays {
            ck.insert(k, t.clone());
        }
        ck
    }

    /// Rebuild from a checkpoint, validating the exact name set and shapes
    /// the config derives.
    pub fn from_checkpoint(ck: &Checkpoint, cfg: &CodecConfig) -> Result<ModelParams> {
        let table = layer_table(cfg);
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
        Ok(ModelParams { arrays })
    }

    /// Write checkpoint bytes plus a JSON config sidecar.
    pub fn save(&self, path: &Path, cfg: &CodecConfig) -> Result<()> {
        self.to_checkpoint().save(path)?;
        std::fs::write(sidecar_path(path), cfg.canonical_json())?;
        Ok(())
    }

    /// Load checkpoint plus sidecar. When `expect` is given, a config-hash
    /// mismatch is an error.
    pub fn load(path: &Path, expect: Option<&CodecConfig>) -> Result<(ModelParams, CodecConfig)> {
        let sidecar = sidecar_path(path);
        let json = std::fs::read_to_string(&sidecar).map_err(|e| {
            SicError::data(format!("cannot read config sidecar {}: {e}", sidecar.display()))
        })?;
        let cfg = CodecConfig::from_json(&json)?;
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
        let params = ModelParams::from_checkpoint(&ck, &cfg)?;
        Ok((params, cfg))
    }
}

/// `model.sicw` → `model.sicw.json`
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

/// Tape handles of all parameters, by name.
pub struct ParamVars {
    map: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| SicError::config(format!("no tape var for parameter '{name}'")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.map.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::QuantMode;

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = CodecConfig::toy(32, 0.01, 99);
        let a = ModelParams::init(&cfg).unwrap();
        let b = ModelParams::init(&cfg).unwrap();
        assert_eq!(a, b);
        let mut cfg2 = cfg.clone();
        cfg2.seed = 100;
        let c = ModelParams::init(&cfg2).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn checkpoint_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sicw");
        let cfg = CodecConfig::toy(32, 0.0075, 5);
        let p = ModelParams::init(&cfg).unwrap();
        p.save(&path, &cfg).unwrap();
        let (q, cfg2) = ModelParams::load(&path, Some(&cfg)).unwrap();
        assert_eq!(p, q);
        assert_eq!(cfg2, cfg);
    }

    #[test]
    fn hash_mismatch_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sicw");
        let cfg = CodecConfig::toy(32, 0.0075, 5);
        ModelParams::init(&cfg).unwrap().save(&path, &cfg).unwrap();
        let mut other = cfg.clone();
        other.quant_mode = QuantMode::Straight;
        assert!(matches!(
            ModelParams::load(&path, Some(&other)).unwrap_err(),
            SicError::Config(_)
        ));
    }

    #[test]
    fn wrong_shape_checkpoint_is_refused() {
        let cfg = CodecConfig::toy(32, 0.01, 5);
        let p = ModelParams::init(&cfg).unwrap();
        let mut ck = p.to_checkpoint();
        ck.insert("g_a.0.b", Tensor::zeros(vec![7]));
        assert!(ModelParams::from_checkpoint(&ck, &cfg).is_err());
    }

    #[test]
    fn channel_relaxation_touches_only_latent_adjacent_shapes() {
        let a = CodecConfig::toy(64, 0.01, 3);
        let mut b = a.clone();
        b.m = 96;
        let ta: BTreeMap<_, _> = layer_table(&a).into_iter().map(|l| (l.name, l.shape)).collect();
        let tb: BTreeMap<_, _> = layer_table(&b).into_iter().map(|l| (l.name, l.shape)).collect();
        assert_eq!(
            ta.keys().collect::<Vec<_>>(),
            tb.keys().collect::<Vec<_>>(),
            "same layer names"
        );
        // layers allowed to change shape when only M changes: those touching
        // the latent (or the hyper latent, whose width max(8, M/4) follows M)
        let latent_adjacent = [
            "g_a.3.w", "g_a.3.b", "g_s.0.w", "h_a.0.w", "h_a.2.w", "h_a.2.b", "h_s.0.w",
            "g_cm.w", "g_ep.1.w", "g_ep.1.b", "hyper_prior.mu", "hyper_prior.sigma_raw",
        ];
        for (name, sa) in &ta {
            let sb = &tb[name];
            if latent_adjacent.contains(&name.as_str()) {
                assert_ne!(sa, sb, "{name} should follow M");
            } else {
                assert_eq!(sa, sb, "{name} must not follow M");
            }
        }
    }

    #[test]
    fn context_toggle_changes_fusion_width_and_layer_set() {
        let on = CodecConfig::toy(64, 0.01, 3);
        let mut off = on.clone();
        off.context_enabled = false;
        let names_on: Vec<String> = layer_table(&on).into_iter().map(|l| l.name).collect();
        let names_off: Vec<String> = layer_table(&off).into_iter().map(|l| l.name).collect();
        assert!(names_on.contains(&"g_cm.w".to_string()));
        assert!(!names_off.contains(&"g_cm.w".to_string()));
        let ep0 = layer_table(&on)
            .into_iter()
            .find(|l| l.name == "g_ep.0.w")
            .unwrap();
        assert_eq!(ep0.shape, vec![64, 128, 1, 1]);
        let ep0_off = layer_table(&off)
            .into_iter()
            .find(|l| l.name == "g_ep.0.w")
            .unwrap();
        assert_eq!(ep0_off.shape, vec![64, 64, 1, 1]);
    }
}

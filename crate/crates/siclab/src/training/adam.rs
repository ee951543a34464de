//! Adam optimizer over the named parameter store. Moment buffers are keyed by
//! parameter name, updates run in name order, and all arithmetic is scalar —
//! the whole update is bit-deterministic.

use crate::codec::ModelParams;
use crate::error::{Result, SicError};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new() -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update. Parameters without a gradient entry are untouched (their
    /// moments don't advance either) — layers that a config disables simply
    /// never move.
    pub fn step(
        &mut self,
        lr: f64,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Tensor<f32>>,
    ) -> Result<()> {
        self.step_arrays(lr, params.arrays_mut(), grads)
    }

    /// Same update against a bare named-array store (used by the coupling
    /// codec, whose parameter set has a different layer table).
    pub fn step_arrays(
        &mut self,
        lr: f64,
        arrays: &mut BTreeMap<String, Tensor<f32>>,
        grads: &BTreeMap<String, Tensor<f32>>,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, g) in grads {
            let p = arrays
                .get_mut(name)
                .ok_or_else(|| SicError::config(format!("no parameter named {name}")))?;
            if p.shape() != g.shape() {
                return Err(SicError::config(format!(
                    "gradient shape {:?} for {name} does not match parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let pd = p.data_mut();
            for i in 0..n {
                let gi = g.data()[i] as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                pd[i] = ((pd[i] as f64) - lr * mhat / (vhat.sqrt() + self.eps)) as f32;
            }
        }
        Ok(())
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;

    fn tiny_params() -> (ModelParams, String) {
        let mut cfg = CodecConfig::toy(8, 0.01, 1);
        cfg.n = 8;
        let params = ModelParams::init(&cfg).unwrap();
        (params, "hyper_prior.mu".to_string())
    }

    #[test]
    fn first_step_is_signed_lr() {
        let (mut params, name) = tiny_params();
        let before = params.get(&name).unwrap().clone();
        let g = Tensor::full(before.shape().to_vec(), 0.37f32);
        let mut grads = BTreeMap::new();
        grads.insert(name.clone(), g);
        let mut opt = Adam::new();
        opt.step(1e-2, &mut params, &grads).unwrap();
        let after = params.get(&name).unwrap();
        for (a, b) in after.data().iter().zip(before.data()) {
            // m̂/√v̂ = g/|g| on the first step (ε-perturbed)
            assert!(((b - a) as f64 - 1e-2).abs() < 1e-6, "step was {}", b - a);
        }
    }

    #[test]
    fn converges_on_quadratic() {
        // minimize Σ (p − 3)² over one real parameter array
        let (mut params, name) = tiny_params();
        let mut opt = Adam::new();
        for _ in 0..4000 {
            let p = params.get(&name).unwrap();
            let g: Vec<f32> = p.data().iter().map(|&v| 2.0 * (v - 3.0)).collect();
            let mut grads = BTreeMap::new();
            grads.insert(
                name.clone(),
                Tensor::new(p.shape().to_vec(), g).unwrap(),
            );
            opt.step(5e-3, &mut params, &grads).unwrap();
        }
        for &v in params.get(&name).unwrap().data() {
            assert!((v - 3.0).abs() < 1e-2, "did not converge: {v}");
        }
    }

    #[test]
    fn update_is_bit_deterministic() {
        let run = || {
            let (mut params, name) = tiny_params();
            let mut opt = Adam::new();
            for k in 0..50 {
                let p = params.get(&name).unwrap();
                let g: Vec<f32> = p
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v * 0.1 + (i as f32 + k as f32) * 1e-3)
                    .collect();
                let mut grads = BTreeMap::new();
                grads.insert(name.clone(), Tensor::new(p.shape().to_vec(), g).unwrap());
                opt.step(1e-3, &mut params, &grads).unwrap();
            }
            params
                .get(&name)
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn absent_gradients_leave_parameters_untouched() {
        let (mut params, name) = tiny_params();
        let before = params.get("g_cm.w").unwrap().clone();
        let mut grads = BTreeMap::new();
        grads.insert(
            name,
            Tensor::full(params.get("hyper_prior.mu").unwrap().shape().to_vec(), 1.0f32),
        );
        let mut opt = Adam::new();
        opt.step(1e-2, &mut params, &grads).unwrap();
        assert_eq!(params.get("g_cm.w").unwrap().data(), before.data());
    }
}

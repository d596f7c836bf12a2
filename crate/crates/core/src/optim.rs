//! Adam and the warmup learning-rate schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Linear warmup from `0` to `peak` over `warmup_steps`, then constant.
pub fn lr_schedule(step: u64, peak: f64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        peak
    } else {
        peak * step as f64 / warmup_steps as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moments keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, ..Self::default() }
    }

    /// One bias-corrected update. Parameters without a gradient keep their
    /// value, but their moments still decay.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter `{name}`")))?;
            if p.shape() != g.shape() {
                return Err(Error::Dimension(format!("gradient of `{name}` has shape {:?}, parameter {:?}", g.shape(), p.shape())));
            }
        }
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let names: Vec<String> = params.names().map(str::to_owned).collect();
        for name in names {
            let p = params.get_mut(&name).expect("listed parameter");
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape().to_vec()));
            let g = grads.get(&name);
            for i in 0..p.numel() {
                let gi = g.map_or(0.0, |g| g.data()[i]);
                let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
                let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                p.data_mut()[i] -= lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(250, 3e-3, 500), 1.5e-3);
        assert_eq!(lr_schedule(0, 3e-3, 500), 0.0);
        assert_eq!(lr_schedule(500, 3e-3, 500), 3e-3);
        assert_eq!(lr_schedule(10_000, 3e-3, 500), 3e-3);
        assert_eq!(lr_schedule(3, 1.0, 0), 1.0);
    }

    #[test]
    fn first_update_moves_by_lr() {
        let mut ps = ParamStore::new();
        ps.insert("w", Tensor::new([2], vec![1.0, -1.0]));
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::new([2], vec![0.5, -4.0]));
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut ps, &grads, 0.1).unwrap();
        let w = ps.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamStore::new();
        ps.insert("x", Tensor::new([1], vec![3.0]));
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..2000 {
            let x = ps.get("x").unwrap().data()[0];
            let grads = BTreeMap::from([("x".to_string(), Tensor::new([1], vec![2.0 * (x - 1.0)]))]);
            adam.step(&mut ps, &grads, 0.01).unwrap();
        }
        assert!((ps.get("x").unwrap().data()[0] - 1.0).abs() < 1e-3);
    }
}

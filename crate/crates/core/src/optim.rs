//! Adam over a [`ModelParams`] registry.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ModelParams, ParamGrads};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Adam {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Frozen parameters and parameters without
    /// an entry in `grads` are left untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ParamGrads) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, p) in params.iter_mut() {
            if p.frozen {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != p.value.shape() {
                return Err(Error::Dimension(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.value.shape()
                )));
            }
            let n = g.numel();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            for (((w, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ModelParams::new();
        p.insert("w", Tensor::new([2], vec![1.0, -1.0]).unwrap());
        p.insert("frozen", Tensor::scalar(5.0));
        p.set_frozen("frozen", true);
        let mut grads = ParamGrads::new();
        grads.insert("w".into(), Tensor::new([2], vec![0.3, -2.0]).unwrap());
        grads.insert("frozen".into(), Tensor::scalar(1.0));
        let mut opt = Adam::new(AdamConfig::default()).unwrap();
        opt.step(&mut p, &grads).unwrap();
        let w = p.value("w").unwrap().data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((w[1] - (-1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(p.value("frozen").unwrap().item(), 5.0);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = ModelParams::new();
        p.insert("x", Tensor::scalar(3.0));
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        })
        .unwrap();
        for _ in 0..500 {
            let x = p.value("x").unwrap().item();
            let mut g = ParamGrads::new();
            g.insert("x".into(), Tensor::scalar(2.0 * (x - 1.0)));
            opt.step(&mut p, &g).unwrap();
        }
        assert!((p.value("x").unwrap().item() - 1.0).abs() < 1e-2);
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::net::ParamVector;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.99)
}

fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            betas: default_betas(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) || !(self.eps > 0.0) {
            return Err(config_err!("invalid optimizer settings {self:?}"));
        }
        if self.weight_decay < 0.0 {
            return Err(config_err!("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Adam {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamVector, grad: &ParamVector) {
        let AdamConfig { lr, betas: (b1, b2), eps, weight_decay } = self.config;
        self.t += 1;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.values.len() {
            let g = grad.values[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            let p = &mut params.values[i];
            *p -= lr * (mhat / (vhat.sqrt() + eps) + weight_decay * *p);
        }
    }
}

/// `ema <- decay * ema + (1 - decay) * params`.
pub fn ema_update(ema: &mut ParamVector, params: &ParamVector, decay: f64) {
    for (e, p) in ema.values.iter_mut().zip(&params.values) {
        *e = decay * *e + (1.0 - decay) * p;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = ParamVector { values: vec![1.0, -2.0, 0.5] };
        let g = ParamVector { values: vec![3.0, -0.1, 0.0] };
        let mut opt = Adam::new(AdamConfig::with_lr(0.01), 3);
        opt.step(&mut p, &g);
        // Bias-corrected first step is lr * sign(g) up to eps.
        assert!((p.values[0] - 0.99).abs() < 1e-8);
        assert!((p.values[1] + 1.99).abs() < 1e-6);
        assert_eq!(p.values[2], 0.5);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut p = ParamVector { values: vec![3.0, -4.0] };
        let mut opt = Adam::new(AdamConfig::with_lr(0.05), 2);
        for _ in 0..2000 {
            let g = p.clone();
            opt.step(&mut p, &g);
        }
        assert!(p.norm() < 1e-2, "{:?}", p.values);
    }

    #[test]
    fn ema_matches_reference_recursion() {
        let mut ema = ParamVector { values: vec![0.0] };
        let mut reference = 0.0;
        for n in 1..=50 {
            let theta = ParamVector { values: vec![n as f64] };
            ema_update(&mut ema, &theta, 0.9);
            reference = 0.9 * reference + (1.0 - 0.9) * n as f64;
        }
        assert_eq!(ema.values[0], reference);
    }

    #[test]
    fn rejects_bad_betas() {
        let mut c = AdamConfig::with_lr(1e-3);
        c.betas = (1.0, 0.99);
        assert!(c.validate().is_err());
    }
}

use serde::{Deserialize, Serialize};

use crate::diffcore::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_start_lr: f64,
    pub warmup_epochs: usize,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub weight_decay: f64,
    pub betas: [f64; 2],
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 8e-4,
            warmup_start_lr: 8e-6,
            warmup_epochs: 20,
            decay_factor: 0.5,
            decay_every: 40,
            weight_decay: 5e-4,
            betas: [0.9, 0.999],
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.warmup_start_lr, self.decay_factor, self.eps];
        if positive.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::Config(
                "learning rates, decay factor and eps must be positive".into(),
            ));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) || self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::Config(
                "weight decay must be >= 0 and betas in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Linear warmup from `warmup_start_lr` to `lr`, then step decay.
pub fn lr_schedule(epoch: usize, c: &OptimConfig) -> f64 {
    if epoch < c.warmup_epochs {
        let t = epoch as f64 / c.warmup_epochs as f64;
        c.warmup_start_lr + (c.lr - c.warmup_start_lr) * t
    } else {
        let steps = (epoch - c.warmup_epochs) / c.decay_every;
        c.lr * c.decay_factor.powi(steps as i32)
    }
}

/// Adam with decoupled weight decay. State is kept in store order.
#[derive(Clone, Debug)]
pub struct Adam {
    config: OptimConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, config: OptimConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| Tensor::zeros(p.value.shape()))
                .collect()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let [b1, b2] = self.config.betas;
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        let (wd, eps) = (self.config.weight_decay, self.config.eps);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let (w, g) = (p.value.data_mut(), p.grad.data());
            for i in 0..w.len() {
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (1.0 - b1) * g[i];
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (1.0 - b2) * g[i] * g[i];
                let update = (m.data()[i] / c1) / ((v.data()[i] / c2).sqrt() + eps);
                w[i] -= lr * (update + wd * w[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_anchors() {
        let c = OptimConfig::default();
        assert_eq!(lr_schedule(0, &c), 8e-6);
        assert_eq!(lr_schedule(20, &c), 8e-4);
        assert!((lr_schedule(10, &c) - 4.04e-4).abs() < 1e-18);
        assert_eq!(lr_schedule(60, &c), 4e-4);
        assert_eq!(lr_schedule(100, &c), 2e-4);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        s.add_buffer("b", Tensor::full(&[1], 3.0));
        s.get_mut(id).grad = Tensor::new(&[2], vec![0.5, -2.0]).unwrap();
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut adam = Adam::new(&s, cfg);
        adam.step(&mut s, 0.1);
        let w = s.get(id).value.data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
        assert_eq!(s.get(s.id("b").unwrap()).value.data(), &[3.0]);
    }
}

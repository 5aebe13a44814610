//! AdamW and the two-phase warmup/decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Step schedule: linear warmup to 1, linear decay to 0 at `total_steps`,
/// multiplied by a base rate that drops from `lr_phase1` to `lr_phase2` at
/// `phase_switch_step`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub lr_phase1: f64,
    pub lr_phase2: f64,
    pub phase_switch_step: u64,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            total_steps: 120_000,
            warmup_steps: 20_000,
            lr_phase1: 1e-5,
            lr_phase2: 1e-6,
            phase_switch_step: 80_000,
            optimizer: AdamWConfig::default(),
            batch_size: 4,
            grad_clip: 1.0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.phase_switch_step {
            return Err(Error::config(
                "warmup_steps",
                format!(
                    "{} must be below phase_switch_step {}",
                    self.warmup_steps, self.phase_switch_step
                ),
            ));
        }
        if self.phase_switch_step >= self.total_steps {
            return Err(Error::config(
                "phase_switch_step",
                format!(
                    "{} must be below total_steps {}",
                    self.phase_switch_step, self.total_steps
                ),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        for (key, v) in [("lr_phase1", self.lr_phase1), ("lr_phase2", self.lr_phase2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(key, "must be a nonnegative finite number"));
            }
        }
        let o = &self.optimizer;
        for (key, b) in [("adam_beta1", o.beta1), ("adam_beta2", o.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if o.eps <= 0.0 {
            return Err(Error::config("adam_eps", "must be positive"));
        }
        if o.weight_decay < 0.0 {
            return Err(Error::config("weight_decay", "must be nonnegative"));
        }
        if self.grad_clip < 0.0 {
            return Err(Error::config("grad_clip", "must be nonnegative"));
        }
        Ok(())
    }
}

pub fn lr_at(step: u64, s: &TrainSchedule) -> Result<f64> {
    if step > s.total_steps {
        return Err(Error::Contract(format!(
            "step {step} outside schedule of {} steps",
            s.total_steps
        )));
    }
    let base = if step < s.phase_switch_step {
        s.lr_phase1
    } else {
        s.lr_phase2
    };
    let factor = if step < s.warmup_steps {
        step as f64 / s.warmup_steps as f64
    } else {
        (s.total_steps - step) as f64 / (s.total_steps - s.warmup_steps) as f64
    };
    Ok(base * factor)
}

/// Decoupled-weight-decay Adam over every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.tensor(id).numel()]).collect();
        AdamW {
            cfg,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Scales all gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
        let ids: Vec<ParamId> = store.ids().collect();
        let mut sq = 0.0;
        for &id in &ids {
            if let Some(g) = store.tensor(id).grad() {
                sq += g.iter().map(|x| x * x).sum::<f64>();
            }
        }
        let norm = sq.sqrt();
        if max_norm > 0.0 && norm > max_norm {
            let s = max_norm / norm;
            for id in ids {
                let t = store.tensor_mut(id);
                if let Some(g) = t.grad() {
                    let scaled: Vec<f64> = g.iter().map(|x| x * s).collect();
                    t.set_grad(scaled).expect("same length");
                }
            }
        }
        norm
    }

    /// Applies one update with learning rate `lr` and clears gradients.
    /// Parameters without a gradient still receive weight decay and moment decay.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let decay = if store.decays(id) { c.weight_decay } else { 0.0 };
            let t = store.tensor_mut(id);
            let grad = t.grad().map(<[f64]>::to_vec);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data = t.data_mut();
            for i in 0..data.len() {
                let gi = grad.as_ref().map_or(0.0, |g| g[i]);
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                data[i] -= lr * (update + decay * data[i]);
            }
            t.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_anchor_points() {
        let s = TrainSchedule::default();
        assert_eq!(lr_at(0, &s).unwrap(), 0.0);
        assert!((lr_at(20_000, &s).unwrap() - 1e-5).abs() < 1e-20);
        assert!((lr_at(80_000, &s).unwrap() - 4e-7).abs() < 1e-20);
        assert_eq!(lr_at(120_000, &s).unwrap(), 0.0);
        assert!(matches!(lr_at(120_001, &s), Err(Error::Contract(_))));
    }

    #[test]
    fn schedule_invariants() {
        let mut s = TrainSchedule::default();
        assert!(s.validate().is_ok());
        s.warmup_steps = 200_000;
        assert!(matches!(s.validate(), Err(Error::Config { key, .. }) if key == "warmup_steps"));
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, -1.0]), false).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &store);
        let id = store.id("w").unwrap();
        store.tensor_mut(id).set_grad(vec![0.5, -0.5]).unwrap();
        opt.step(&mut store, 0.1);
        let w = store.get("w").unwrap().data();
        // first bias-corrected Adam step has magnitude lr
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] + 0.9).abs() < 1e-6);
        assert!(store.get("w").unwrap().grad().is_none());
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![0.0, 0.0]), true).unwrap();
        let id = store.id("w").unwrap();
        store.tensor_mut(id).set_grad(vec![3.0, 4.0]).unwrap();
        let n = AdamW::clip_grad_norm(&mut store, 1.0);
        assert_eq!(n, 5.0);
        let g = store.get("w").unwrap().grad().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-12 && (g[1] - 0.8).abs() < 1e-12);
    }
}

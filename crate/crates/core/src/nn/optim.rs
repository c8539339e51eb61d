use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Grads, Mat, ParamSet};

/// Cosine decay from `lr_max` to `lr_min` over `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub total_steps: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps <= 1 {
            return self.lr_max;
        }
        let progress = (step.min(self.total_steps - 1)) as f64 / (self.total_steps - 1) as f64;
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (PI * progress).cos())
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
}

impl AdamW {
    pub fn new(n_params: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update. Parameters without a gradient or marked
    /// non-trainable are left untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if !params.entry(id).trainable {
                continue;
            }
            let Some(g) = grads.get(id) else { continue };
            let decay = params.entry(id).decay;
            let m = self.m[id.index()].get_or_insert_with(|| Mat::zeros(g.dim()));
            let v = self.v[id.index()].get_or_insert_with(|| Mat::zeros(g.dim()));
            let p = params.get_mut(id);
            let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                if decay {
                    *p -= lr * wd * *p;
                }
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule {
            lr_max: 0.01,
            lr_min: 0.001,
            total_steps: 11,
        };
        assert!((s.lr(0) - 0.01).abs() < 1e-15);
        assert!((s.lr(10) - 0.001).abs() < 1e-15);
        assert!((s.lr(5) - 0.0055).abs() < 1e-12);
        assert!((s.lr(100) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        let mut ps = ParamSet::new();
        let id = ps.add("x", Mat::from_elem((1, 2), 3.0), false);
        let mut opt = AdamW::new(ps.len(), 0.0);
        for _ in 0..500 {
            let mut g = Grads::new(1);
            let grad = ps.get(id) * 2.0;
            g.accumulate(id, &grad);
            opt.step(&mut ps, &g, 0.05);
        }
        assert!(ps.get(id).iter().all(|v| v.abs() < 1e-2));
    }
}

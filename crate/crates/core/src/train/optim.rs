//! Adam and a reduce-on-plateau learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(params: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; params],
            v: vec![0.0; params],
        }
    }

    /// One bias-corrected update of `params` at rate `lr`.
    pub fn update(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                got: if params.len() != self.m.len() { params.len() } else { grad.len() },
            });
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Multiplies the rate by `factor` once the watched metric has not improved
/// for `patience` epochs, never going below `min_lr`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    best: Option<f64>,
    stale: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize, min_lr: f64) -> Self {
        PlateauScheduler {
            factor,
            patience,
            min_lr,
            best: None,
            stale: 0,
        }
    }

    /// Records one epoch's metric (higher is better) and returns the new rate.
    pub fn observe(&mut self, metric: f64, lr: f64) -> f64 {
        if self.best.map_or(true, |b| metric > b) {
            self.best = Some(metric);
            self.stale = 0;
            return lr;
        }
        self.stale += 1;
        if self.stale > self.patience {
            self.stale = 0;
            return (lr * self.factor).max(self.min_lr);
        }
        lr
    }
}

impl Default for PlateauScheduler {
    fn default() -> Self {
        PlateauScheduler::new(0.5, 3, 1e-5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut a = Adam::new(3);
        let mut p = vec![1.0, -2.0, 0.5];
        a.update(&mut p, &[0.3, -4.0, 0.0], 0.01).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 1.99).abs() < 1e-9);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut a = Adam::new(2);
        let mut p = vec![3.0, -1.0];
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.0), 20.0 * (p[1] + 0.5)];
            a.update(&mut p, &g, 0.01).unwrap();
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3, "{p:?}");
        assert!(a.update(&mut p, &[0.0], 0.01).is_err());
    }

    #[test]
    fn scheduler_waits_patience_epochs() {
        let mut s = PlateauScheduler::default();
        let mut lr = 1e-3;
        lr = s.observe(0.5, lr);
        for _ in 0..3 {
            lr = s.observe(0.4, lr);
            assert_eq!(lr, 1e-3);
        }
        lr = s.observe(0.5, lr);
        assert_eq!(lr, 5e-4);
        lr = s.observe(0.6, lr);
        assert_eq!(lr, 5e-4);
        let mut lr = 1.5e-5;
        for _ in 0..10 {
            lr = s.observe(0.0, lr);
        }
        assert_eq!(lr, 1e-5);
    }
}

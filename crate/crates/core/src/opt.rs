//! Adaptive-moment gradient ascent for the encoder and the softmax-logit
//! global updates, plus global-norm gradient clipping.

use crate::real::Real;
use ndarray::{Array, Dimension, Zip};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamCfg {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamCfg {
    fn default() -> Self {
        AdamCfg {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment state for one tensor.
#[derive(Debug, Clone)]
pub struct AdamSlot<T, D: Dimension> {
    pub m: Array<T, D>,
    pub v: Array<T, D>,
}

impl<T: Real, D: Dimension> AdamSlot<T, D> {
    pub fn zeros_like(p: &Array<T, D>) -> Self {
        AdamSlot {
            m: Array::zeros(p.raw_dim()),
            v: Array::zeros(p.raw_dim()),
        }
    }

    /// One ascent step: p += lr·m̂/(√v̂ + eps) with bias-corrected moments.
    /// `t` is the 1-based step index shared by all slots of an optimizer.
    pub fn ascend(&mut self, p: &mut Array<T, D>, g: &Array<T, D>, cfg: &AdamCfg, t: u64) {
        let b1 = T::of_f64(cfg.beta1);
        let b2 = T::of_f64(cfg.beta2);
        let one = T::one();
        let bc1 = one - T::of_f64(cfg.beta1.powi(t as i32));
        let bc2 = one - T::of_f64(cfg.beta2.powi(t as i32));
        let lr = T::of_f64(cfg.lr);
        let eps = T::of_f64(cfg.eps);
        Zip::from(p)
            .and(g)
            .and(&mut self.m)
            .and(&mut self.v)
            .for_each(|p, &g, m, v| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p = *p + lr * mhat / (vhat.sqrt() + eps);
            });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    #[test]
    fn zero_gradient_and_zero_lr_leave_params_unchanged() {
        let mut p = Array1::from_vec(vec![1.0, -2.0, 0.5]);
        let orig = p.clone();
        let mut slot = AdamSlot::zeros_like(&p);
        slot.ascend(&mut p, &Array1::zeros(3), &AdamCfg::default(), 1);
        assert_eq!(p, orig);

        let cfg = AdamCfg { lr: 0.0, ..Default::default() };
        slot.ascend(&mut p, &Array1::from_vec(vec![1.0, 1.0, 1.0]), &cfg, 2);
        assert_eq!(p, orig);
    }

    #[test]
    fn ascends_toward_higher_objective() {
        let mut p = Array1::from_vec(vec![0.0]);
        let mut slot = AdamSlot::zeros_like(&p);
        let cfg = AdamCfg::default();
        for t in 1..=500 {
            // maximize −(p−3)²: gradient is 2(3−p)
            let g = p.mapv(|x: f64| 2.0 * (3.0 - x));
            slot.ascend(&mut p, &g, &cfg, t);
        }
        assert!(p[0] > 0.3);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut p = Array1::from_vec(vec![0.2, -0.7]);
            let mut slot = AdamSlot::zeros_like(&p);
            for t in 1..=50 {
                let g = p.mapv(|x: f64| x.sin());
                slot.ascend(&mut p, &g, &AdamCfg::default(), t);
            }
            p
        };
        assert_eq!(run(), run());
    }
}

//! Adam with a linear learning-rate schedule.

use crate::attention::TAU_MIN;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::Real;

/// Linear interpolation from `start` at step 0 to `end` at `total − 1`.
pub fn linear_lr(start: f64, end: f64, step: u64, total: u64) -> f64 {
    if total <= 1 {
        return start;
    }
    let t = (step.min(total - 1)) as f64 / (total - 1) as f64;
    start + (end - start) * t
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed updates.
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &Params<F>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|(_, t)| vec![F::zero(); t.numel()]).collect();
        Adam { beta1, beta2, eps, step: 0, m: zeros(), v: zeros() }
    }

    pub fn from_config(params: &Params<F>, cfg: &ModelConfig) -> Self {
        Self::new(params, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    }

    /// One bias-corrected update.
    pub fn update(&mut self, params: &mut Params<F>, grads: &[Vec<F>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Argument(format!("adam: {} grads for {} params", grads.len(), params.len())));
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, (_, t)) in params.iter_mut().enumerate() {
            let (g, m, v) = (&grads[i], &mut self.m[i], &mut self.v[i]);
            if g.len() != t.numel() {
                return Err(Error::Argument(format!("adam: gradient {i} has {} entries", g.len())));
            }
            for (j, w) in t.data_mut().iter_mut().enumerate() {
                let gj = g[j].to_f64().unwrap_or(f64::NAN);
                let mj = b1 * m[j].to_f64().unwrap_or(0.0) + (1.0 - b1) * gj;
                let vj = b2 * v[j].to_f64().unwrap_or(0.0) + (1.0 - b2) * gj * gj;
                m[j] = F::cst(mj);
                v[j] = F::cst(vj);
                let delta = lr * (mj / c1) / ((vj / c2).sqrt() + self.eps);
                *w = F::cst(w.to_f64().unwrap_or(0.0) - delta);
            }
        }
        Ok(())
    }
}

/// Raises every attention temperature to at least the floor.
pub fn clamp_temperatures<F: Real>(params: &mut Params<F>) {
    let floor = F::cst(TAU_MIN);
    for (name, t) in params.iter_mut() {
        if name.ends_with(".tau") {
            t.data_mut().iter_mut().for_each(|v| {
                if !(*v >= floor) {
                    *v = floor;
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(linear_lr(2e-5, 1e-5, 0, 11), 2e-5);
        assert!((linear_lr(2e-5, 1e-5, 5, 11) - 1.5e-5).abs() < 1e-18);
        assert_eq!(linear_lr(2e-5, 1e-5, 10, 11), 1e-5);
        assert_eq!(linear_lr(2e-5, 1e-5, 99, 11), 1e-5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Params::<f64>::new();
        p.insert("w", Tensor::new([2], vec![1.0, -1.0]).unwrap()).unwrap();
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
        adam.update(&mut p, &[vec![3.0, -0.5]], 0.1).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = Params::<f64>::new();
        p.insert("w", Tensor::new([3], vec![2.0, -3.0, 0.5]).unwrap()).unwrap();
        let mut adam = Adam::new(&p, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            let g: Vec<f64> = p.get("w").unwrap().data().iter().map(|w| 2.0 * w).collect();
            adam.update(&mut p, &[g], 0.01).unwrap();
        }
        assert!(p.get("w").unwrap().data().iter().all(|w| w.abs() < 1e-2));
    }

    #[test]
    fn temperatures_are_floored() {
        let mut p = Params::<f32>::new();
        p.insert("a.attn.tau", Tensor::new([1], vec![-3.0]).unwrap()).unwrap();
        p.insert("a.attn.q.b", Tensor::new([1], vec![-3.0]).unwrap()).unwrap();
        clamp_temperatures(&mut p);
        assert_eq!(p.get("a.attn.tau").unwrap().data()[0], 0.01);
        assert_eq!(p.get("a.attn.q.b").unwrap().data()[0], -3.0);
    }
}

//! Scale-invariant log loss.

use std::rc::Rc;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Real, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Variance factor λ in `[0, 1]`.
    pub lambda: f64,
    /// Output scale α.
    pub alpha: f64,
    pub min_depth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.85, alpha: 10.0, min_depth: 1e-3 }
    }
}

impl LossConfig {
    pub fn from_model(cfg: &ModelConfig) -> Self {
        LossConfig { lambda: cfg.silog_lambda, alpha: cfg.silog_alpha, min_depth: cfg.min_depth }
    }
}

/// Pixels with `min_depth < gt < max_depth`.
pub fn valid_mask<F: Real>(gt: &[F], min_depth: f64, max_depth: f64) -> Vec<bool> {
    gt.iter()
        .map(|&g| {
            let g = g.to_f64().unwrap_or(f64::NAN);
            g > min_depth && g < max_depth
        })
        .collect()
}

/// `α·sqrt(mean(Δd²) − λ·mean(Δd)²)` with `Δd = ln pred − ln gt` over the
/// masked pixels of the whole batch.
///
/// The variance term is computed about the first residual, so a uniform
/// scale error contributes exactly zero variance.
pub fn silog_loss<'t, F: Real>(pred: Var<'t, F>, gt: &[F], mask: &[bool], cfg: &LossConfig) -> Result<Var<'t, F>> {
    let n = pred.numel();
    if gt.len() != n || mask.len() != n {
        return Err(Error::dim("silog", format!("pred {n}, gt {}, mask {}", gt.len(), mask.len())));
    }
    if !(0.0..=1.0).contains(&cfg.lambda) || !(cfg.alpha > 0.0) {
        return Err(Error::Argument(format!("silog: lambda {} alpha {}", cfg.lambda, cfg.alpha)));
    }
    let index: Vec<u32> = (0..n).filter(|&i| mask[i]).map(|i| i as u32).collect();
    let k = index.len();
    if k == 0 {
        return Err(Error::Evaluation("silog: no valid pixels".into()));
    }
    let reference: Vec<F> = index.iter().map(|&i| gt[i as usize]).collect();
    let d = pred.gather(Rc::from(index), vec![k]).log_ratio(&reference)?;
    let tape = pred.tape();
    let pivot = d.value()[0];
    let shifted = d.add_scalar(tape.constant([], vec![-pivot])?)?;
    let shifted_mean = shifted.mean();
    let variance = shifted.add_scalar(shifted_mean.scale(-F::one()))?.square().mean();
    let mean = shifted_mean.add_scalar(tape.constant([], vec![pivot])?)?;
    let bias = mean.square().scale(F::cst(1.0 - cfg.lambda));
    Ok(variance.add(bias)?.sqrt().scale(F::cst(cfg.alpha)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, Tape, Tensor};

    fn gt(n: usize) -> Vec<f64> {
        (0..n).map(|i| 0.5 + (i * 37 % 19) as f64 * 0.4).collect()
    }

    fn loss(pred: &[f64], gt: &[f64], cfg: &LossConfig) -> f64 {
        let tape = Tape::new();
        let p = tape.leaf(&Tensor::new([pred.len()], pred.to_vec()).unwrap());
        silog_loss(p, gt, &vec![true; gt.len()], cfg).unwrap().item()
    }

    #[test]
    fn scale_law() {
        let g = gt(50);
        let cfg = LossConfig::default();
        assert_eq!(loss(&g, &g, &cfg), 0.0);
        for c in [0.5, 2.0, std::f64::consts::E] {
            let p: Vec<f64> = g.iter().map(|v| v * c).collect();
            let want = 10.0 * f64::ln(c).abs() * 0.15f64.sqrt();
            assert!((loss(&p, &g, &cfg) - want).abs() < 1e-9);
        }
        let p: Vec<f64> = g.iter().map(|v| v * 2.0).collect();
        assert_eq!(loss(&p, &g, &LossConfig { lambda: 1.0, ..cfg }), 0.0);
        assert!((loss(&p, &g, &cfg) - 2.6846).abs() < 1e-4);
    }

    #[test]
    fn masked_pixels_are_ignored_and_empty_mask_fails() {
        let g = gt(6);
        let mut p = g.clone();
        p[2] = 100.0;
        let mut mask = vec![true; 6];
        mask[2] = false;
        let tape = Tape::new();
        let v = tape.leaf(&Tensor::new([6], p).unwrap());
        assert_eq!(silog_loss(v, &g, &mask, &LossConfig::default()).unwrap().item(), 0.0);
        assert!(matches!(silog_loss(v, &g, &[false; 6], &LossConfig::default()), Err(Error::Evaluation(_))));
    }

    #[test]
    fn gradient_matches_differences() {
        let g = gt(24);
        let x = Tensor::from_fn([2, 12], |i| g[i] * (1.0 + 0.3 * (i as f64 * 1.7).sin()));
        let mask: Vec<bool> = (0..24).map(|i| i % 5 != 3).collect();
        let err = grad_check(|_, v| silog_loss(v, &g, &mask, &LossConfig::default()), &x).unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn mask_bounds() {
        assert_eq!(valid_mask(&[0.0f32, 0.5, 10.0, 11.0], 1e-3, 10.0), vec![false, true, false, false]);
    }
}

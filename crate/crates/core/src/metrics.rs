//! Depth evaluation metrics.

use std::fmt;

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "abs_rel,sq_rel,rmse,log_rmse,d1,d2,d3,k";

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub log_rmse: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    /// Valid pixel count.
    pub k: usize,
}

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.abs_rel, self.sq_rel, self.rmse, self.log_rmse, self.d1, self.d2, self.d3, self.k
        )
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "abs_rel={}", self.abs_rel)?;
        writeln!(f, "sq_rel={}", self.sq_rel)?;
        writeln!(f, "rmse={}", self.rmse)?;
        writeln!(f, "log_rmse={}", self.log_rmse)?;
        writeln!(f, "d1={}", self.d1)?;
        writeln!(f, "d2={}", self.d2)?;
        writeln!(f, "d3={}", self.d3)?;
        writeln!(f, "k={}", self.k)
    }
}

/// Running sums, so metrics can be pooled over several batches.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricAccumulator {
    abs_rel: f64,
    sq_rel: f64,
    sq: f64,
    log_sq: f64,
    hits: [usize; 3],
    k: usize,
}

impl MetricAccumulator {
    /// Adds the masked pixels; both maps are clamped to `caps` first.
    pub fn add(&mut self, pred: &[f64], gt: &[f64], mask: &[bool], caps: (f64, f64)) -> Result<()> {
        if pred.len() != gt.len() || gt.len() != mask.len() {
            return Err(Error::dim("eval_metrics", format!("pred {}, gt {}, mask {}", pred.len(), gt.len(), mask.len())));
        }
        let (lo, hi) = caps;
        if !(lo > 0.0 && hi > lo) {
            return Err(Error::Argument(format!("eval_metrics: caps ({lo}, {hi})")));
        }
        for ((&p, &g), _) in pred.iter().zip(gt).zip(mask).filter(|(_, &m)| m) {
            let (d, t) = (p.clamp(lo, hi), g.clamp(lo, hi));
            let diff = d - t;
            self.abs_rel += diff.abs() / t;
            self.sq_rel += diff * diff / t;
            self.sq += diff * diff;
            self.log_sq += (d.ln() - t.ln()).powi(2);
            let ratio = (d / t).max(t / d);
            for (j, hit) in self.hits.iter_mut().enumerate() {
                if ratio < 1.25f64.powi(j as i32 + 1) {
                    *hit += 1;
                }
            }
            self.k += 1;
        }
        Ok(())
    }

    pub fn report(&self) -> Result<MetricReport> {
        if self.k == 0 {
            return Err(Error::Evaluation("eval_metrics: no valid pixels".into()));
        }
        let k = self.k as f64;
        Ok(MetricReport {
            abs_rel: self.abs_rel / k,
            sq_rel: self.sq_rel / k,
            rmse: (self.sq / k).sqrt(),
            log_rmse: (self.log_sq / k).sqrt(),
            d1: self.hits[0] as f64 / k,
            d2: self.hits[1] as f64 / k,
            d3: self.hits[2] as f64 / k,
            k: self.k,
        })
    }
}

pub fn eval_metrics(pred: &[f64], gt: &[f64], mask: &[bool], caps: (f64, f64)) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::default();
    acc.add(pred, gt, mask, caps)?;
    acc.report()
}

#[cfg(test)]
mod tests {
    use super::*;

    const CAPS: (f64, f64) = (1e-3, 80.0);

    #[test]
    fn perfect_prediction() {
        let g = [0.7, 1.0, 3.5, 9.0];
        let r = eval_metrics(&g, &g, &[true; 4], CAPS).unwrap();
        assert_eq!((r.abs_rel, r.sq_rel, r.rmse, r.log_rmse), (0.0, 0.0, 0.0, 0.0));
        assert_eq!((r.d1, r.d2, r.d3, r.k), (1.0, 1.0, 1.0, 4));
    }

    #[test]
    fn worked_examples() {
        let r = eval_metrics(&[1.0, 2.0, 4.0], &[1.0, 2.6, 4.0], &[true; 3], CAPS).unwrap();
        assert!((r.d1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!((r.d2, r.d3), (1.0, 1.0));
        let r = eval_metrics(&[2.0], &[1.0], &[true], CAPS).unwrap();
        assert_eq!((r.abs_rel, r.sq_rel, r.rmse), (1.0, 1.0, 1.0));
    }

    #[test]
    fn caps_and_empty() {
        let r = eval_metrics(&[100.0], &[80.0], &[true], CAPS).unwrap();
        assert_eq!(r.abs_rel, 0.0);
        assert!(matches!(eval_metrics(&[1.0], &[1.0], &[false], CAPS), Err(Error::Evaluation(_))));
    }

    #[test]
    fn serializations() {
        let r = eval_metrics(&[2.0], &[1.0], &[true], CAPS).unwrap();
        assert_eq!(CSV_HEADER.split(',').count(), r.csv_row().split(',').count());
        assert!(r.to_kv().starts_with("abs_rel=1\nsq_rel=1\n"));
    }
}

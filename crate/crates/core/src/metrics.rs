//! Depth evaluation metrics (standard KITTI/NYU definitions).

use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Depths are clamped to at least this many meters before evaluation.
pub const MIN_EVAL_DEPTH: f64 = 1e-3;

pub const METRIC_NAMES: [&str; 10] = ["abs_rel", "sq_rel", "rmse", "rmse_log", "log10", "silog", "irmse", "d1", "d2", "d3"];

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub silog: f64,
    /// Inverse-depth RMSE in 1/km.
    pub irmse: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl MetricsReport {
    /// Values in [`METRIC_NAMES`] order.
    pub fn values(&self) -> [f64; 10] {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.log10,
            self.silog,
            self.irmse,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    pub fn from_values(v: [f64; 10]) -> Self {
        MetricsReport {
            abs_rel: v[0],
            sq_rel: v[1],
            rmse: v[2],
            rmse_log: v[3],
            log10: v[4],
            silog: v[5],
            irmse: v[6],
            delta1: v[7],
            delta2: v[8],
            delta3: v[9],
        }
    }

    /// Per-field mean over several reports.
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let mut acc = [0.0; 10];
        for r in reports {
            acc.iter_mut().zip(r.values()).for_each(|(a, v)| *a += v);
        }
        acc.iter_mut().for_each(|a| *a /= reports.len() as f64);
        Some(Self::from_values(acc))
    }
}

/// Metrics of `pred` against `target` over the `valid` pixels, after clamping
/// both to `[MIN_EVAL_DEPTH, cap]`.
pub fn evaluate(pred: &Tensor, target: &Tensor, valid: &[bool], cap: f64) -> Result<MetricsReport> {
    if pred.extents() != target.extents() || valid.len() != pred.len() {
        return Err(shape_err!("evaluate: prediction {:?}, target {:?}, mask of {}", pred.extents(), target.extents(), valid.len()));
    }
    if !(cap > MIN_EVAL_DEPTH) {
        return Err(Error::Contract(alloc::format!("evaluate: cap {cap} must exceed {MIN_EVAL_DEPTH}")));
    }
    let pairs: Vec<(f64, f64)> = (0..pred.len())
        .filter(|&i| valid[i])
        .map(|i| (pred.data()[i].clamp(MIN_EVAL_DEPTH, cap), target.data()[i].clamp(MIN_EVAL_DEPTH, cap)))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Contract("evaluate: no valid pixels".into()));
    }
    let k = pairs.len() as f64;
    let mean = |f: &dyn Fn(f64, f64) -> f64| pairs.iter().map(|&(p, t)| f(p, t)).sum::<f64>() / k;
    let ratio_below = |thr: f64| pairs.iter().filter(|&&(p, t)| (p / t).max(t / p) < thr).count() as f64 / k;
    let mean_log = mean(&|p, t| libm::log(p) - libm::log(t));
    let mean_log_sq = mean(&|p, t| sq(libm::log(p) - libm::log(t)));
    Ok(MetricsReport {
        abs_rel: mean(&|p, t| (p - t).abs() / t),
        sq_rel: mean(&|p, t| sq(p - t) / t),
        rmse: libm::sqrt(mean(&|p, t| sq(p - t))),
        rmse_log: libm::sqrt(mean_log_sq),
        log10: mean(&|p, t| (libm::log10(p) - libm::log10(t)).abs()),
        silog: 100.0 * libm::sqrt((mean_log_sq - mean_log * mean_log).max(0.0)),
        irmse: libm::sqrt(mean(&|p, t| sq(1000.0 / p - 1000.0 / t))),
        delta1: ratio_below(1.25),
        delta2: ratio_below(1.25 * 1.25),
        delta3: ratio_below(1.25 * 1.25 * 1.25),
    })
}

fn sq(v: f64) -> f64 {
    v * v
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn gt() -> Tensor {
        Tensor::from_fn(&[4, 5], |i| 0.8 + 0.37 * i as f64)
    }

    #[test]
    fn identity_is_perfect() {
        let t = gt();
        let r = evaluate(&t, &t, &[true; 20], 80.0).unwrap();
        for v in &r.values()[..7] {
            assert_eq!(*v, 0.0);
        }
        assert_eq!((r.delta1, r.delta2, r.delta3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn uniform_scaling_cases() {
        let t = gt();
        let r = evaluate(&t.map(|d| 1.1 * d), &t, &[true; 20], 80.0).unwrap();
        assert!((r.abs_rel - 0.1).abs() < 1e-12);
        assert_eq!(r.delta1, 1.0);
        // Dyadic depths keep 1.25·d exact, so the ratio sits on the boundary.
        let t = Tensor::from_fn(&[4, 5], |i| 0.5 * (i + 1) as f64);
        let r = evaluate(&t.map(|d| 1.25 * d), &t, &[true; 20], 80.0).unwrap();
        assert!((r.abs_rel - 0.25).abs() < 1e-12);
        assert_eq!(r.delta1, 0.0);
        assert_eq!(r.delta2, 1.0);
    }

    #[test]
    fn cap_clamps_before_metrics() {
        let t = Tensor::new(&[2], vec![5.0, 20.0]).unwrap();
        let p = Tensor::new(&[2], vec![5.0, 40.0]).unwrap();
        let r = evaluate(&p, &t, &[true, true], 10.0).unwrap();
        assert_eq!(r.abs_rel, 0.0);
        let r = evaluate(&p, &t, &[true, true], 80.0).unwrap();
        assert!((r.abs_rel - 0.5).abs() < 1e-12);
    }

    #[test]
    fn no_valid_pixels() {
        let t = gt();
        assert!(matches!(evaluate(&t, &t, &[false; 20], 80.0), Err(Error::Contract(_))));
    }
}

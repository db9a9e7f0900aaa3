//! Scale-invariant logarithmic training loss.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Variance-minimising factor λ, in `[0, 1]`.
    pub lambda: f64,
    /// Scale constant α.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.85, alpha: 10.0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) || !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Contract(alloc::format!(
                "loss needs 0 <= lambda <= 1 and alpha > 0, got lambda {} alpha {}",
                self.lambda,
                self.alpha
            )));
        }
        Ok(())
    }
}

/// `α·sqrt((1/K)ΣΔ² − (λ/K²)(ΣΔ)²)` with `Δ = ln pred − ln target` over the
/// `valid` pixels.
pub fn silog_loss(tape: &mut Tape, pred: Var, target: &Tensor, valid: &[bool], cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    tape.silog(pred, target, valid, cfg.lambda, cfg.alpha)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn loss_of(pred: &Tensor, target: &Tensor, cfg: LossConfig) -> f64 {
        let mut tape = Tape::new();
        let p = tape.leaf(pred.clone());
        let mask = alloc::vec![true; pred.len()];
        let l = silog_loss(&mut tape, p, target, &mask, &cfg).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn closed_forms() {
        let gt = Tensor::from_fn(&[3, 4], |i| 0.5 + i as f64 * 0.7);
        assert_eq!(loss_of(&gt, &gt, LossConfig::default()), 0.0);
        let scaled = gt.map(|d| d * core::f64::consts::E);
        let l = loss_of(&scaled, &gt, LossConfig::default());
        assert!((l - 10.0 * libm::sqrt(0.15)).abs() < 1e-9, "{l}");
        assert!((l - 3.872_983_346_207_417).abs() < 1e-9);
        let full = LossConfig { lambda: 1.0, alpha: 10.0 };
        assert!(loss_of(&gt.map(|d| d * 2.3), &gt, full).abs() < 1e-6);
    }

    #[test]
    fn errors() {
        let gt = Tensor::full(&[2, 2], 1.0);
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::new(&[2, 2], alloc::vec![1.0, -1.0, 1.0, 1.0]).unwrap());
        let cfg = LossConfig::default();
        assert!(matches!(silog_loss(&mut tape, p, &gt, &[true; 4], &cfg), Err(Error::Domain(_))));
        // The nonpositive value is ignored when masked out.
        assert!(silog_loss(&mut tape, p, &gt, &[true, false, true, true], &cfg).is_ok());
        assert!(matches!(silog_loss(&mut tape, p, &gt, &[false; 4], &cfg), Err(Error::Contract(_))));
        let bad = LossConfig { lambda: 1.5, alpha: 10.0 };
        assert!(silog_loss(&mut tape, p, &gt, &[true; 4], &bad).is_err());
    }
}

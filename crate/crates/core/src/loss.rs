//! Huber-clipped losses, clipped gradients, and absolute-residual scores.
//!
//! For residual `r = w·x − y` and clipping parameter `kappa`, the sample loss
//! is `r²/2` when `|r| <= kappa` and `kappa|r| − kappa²/2` otherwise. Its
//! gradient is `r / max(|r|, kappa) * kappa * x`. `kappa = +inf` is accepted
//! and means "unclipped squared loss".

use crate::error::{Error, Result};
use crate::linalg::axpy;
use crate::types::{Batch, Sample};

/// Huber value of a residual.
#[inline]
pub fn huber(r: f64, kappa: f64) -> f64 {
    let a = r.abs();
    if a <= kappa {
        0.5 * r * r
    } else {
        kappa * a - 0.5 * kappa * kappa
    }
}

/// Derivative of [`huber`] with respect to the residual.
#[inline]
pub fn huber_slope(r: f64, kappa: f64) -> f64 {
    let a = r.abs();
    if a <= kappa {
        r
    } else {
        r / a.max(kappa) * kappa
    }
}

pub(crate) fn check_kappa(kappa: f64) -> Result<()> {
    if kappa > 0.0 {
        Ok(())
    } else {
        Err(Error::Argument(format!("clipping parameter must be positive, got {kappa}")))
    }
}

fn check_dim(expected: usize, w: &[f64]) -> Result<()> {
    if w.len() == expected {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "parameter has dimension {}, data has dimension {expected}",
            w.len()
        )))
    }
}

pub fn clipped_loss_sample(s: &Sample<'_>, w: &[f64], kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    check_dim(s.x.len(), w)?;
    Ok(huber(s.residual(w), kappa))
}

pub fn clipped_grad_sample(s: &Sample<'_>, w: &[f64], kappa: f64) -> Result<Vec<f64>> {
    check_kappa(kappa)?;
    check_dim(s.x.len(), w)?;
    let c = huber_slope(s.residual(w), kappa);
    Ok(s.x.iter().map(|xi| c * xi).collect())
}

/// Mean clipped loss over the batch.
pub fn batch_clipped_loss(b: &Batch, w: &[f64], kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    check_dim(b.dim(), w)?;
    Ok(batch_loss_unchecked(b, w, kappa))
}

/// Mean clipped gradient over the batch.
pub fn batch_clipped_grad(b: &Batch, w: &[f64], kappa: f64) -> Result<Vec<f64>> {
    check_kappa(kappa)?;
    check_dim(b.dim(), w)?;
    let mut g = vec![0.0; b.dim()];
    batch_grad_accumulate(b, w, kappa, 1.0, &mut g);
    Ok(g)
}

/// Mean absolute residual `(1/n) Σ |w·x − y|`.
pub fn batch_abs_residual(b: &Batch, w: &[f64]) -> Result<f64> {
    check_dim(b.dim(), w)?;
    Ok(b.samples().map(|s| s.residual(w).abs()).sum::<f64>() / b.len() as f64)
}

pub(crate) fn batch_loss_unchecked(b: &Batch, w: &[f64], kappa: f64) -> f64 {
    b.samples().map(|s| huber(s.residual(w), kappa)).sum::<f64>() / b.len() as f64
}

/// Adds `scale * batch_clipped_grad(b, w, kappa)` into `out`; returns the batch loss.
pub(crate) fn batch_grad_accumulate(
    b: &Batch,
    w: &[f64],
    kappa: f64,
    scale: f64,
    out: &mut [f64],
) -> f64 {
    let inv_n = 1.0 / b.len() as f64;
    let mut loss = 0.0;
    for s in b.samples() {
        let r = s.residual(w);
        loss += huber(r, kappa);
        axpy(scale * inv_n * huber_slope(r, kappa), s.x, out);
    }
    loss * inv_n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;
    use proptest::prelude::*;

    fn s<'a>(x: &'a [f64], y: f64) -> Sample<'a> {
        Sample::new(x, y)
    }

    #[test]
    fn loss_branches() {
        let x = [1.0, 0.0];
        let w = [2.0, 0.0];
        assert_eq!(clipped_loss_sample(&s(&x, 0.0), &w, 10.0).unwrap(), 2.0);
        assert_eq!(clipped_loss_sample(&s(&x, 0.0), &w, 1.0).unwrap(), 1.5);
        assert_eq!(clipped_loss_sample(&s(&x, 2.0), &w, 1.0).unwrap(), 0.0);
        assert_eq!(clipped_loss_sample(&s(&x, 0.0), &w, f64::INFINITY).unwrap(), 2.0);
    }

    #[test]
    fn grad_branches() {
        let x = [1.0, 0.0];
        let w = [2.0, 0.0];
        assert_eq!(clipped_grad_sample(&s(&x, 0.0), &w, 10.0).unwrap(), vec![2.0, 0.0]);
        assert_eq!(clipped_grad_sample(&s(&x, 0.0), &w, 1.0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(clipped_grad_sample(&s(&x, 2.0), &w, 1.0).unwrap(), vec![0.0, 0.0]);
        assert_eq!(
            clipped_grad_sample(&s(&x, 0.0), &w, f64::INFINITY).unwrap(),
            vec![2.0, 0.0]
        );
    }

    #[test]
    fn argument_errors() {
        let x = [1.0, 0.0];
        assert!(clipped_loss_sample(&s(&x, 0.0), &[1.0], 1.0).is_err());
        assert!(clipped_loss_sample(&s(&x, 0.0), &[1.0, 0.0], 0.0).is_err());
        assert!(clipped_grad_sample(&s(&x, 0.0), &[1.0, 0.0], -1.0).is_err());
        assert!(clipped_grad_sample(&s(&x, 0.0), &[1.0, 0.0], f64::NAN).is_err());
        let b = Batch::from_rows(vec![(vec![1.0], 0.0)]).unwrap();
        assert!(batch_abs_residual(&b, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn batch_means() {
        // residuals 2 and 0 -> losses 2 and 0
        let b = Batch::from_rows(vec![(vec![1.0, 0.0], 0.0), (vec![0.0, 1.0], 0.0)]).unwrap();
        let w = [2.0, 0.0];
        assert_eq!(batch_clipped_loss(&b, &w, 10.0).unwrap(), 1.0);

        // gradients (2,0) and (0,2)
        let b = Batch::from_rows(vec![(vec![1.0, 0.0], 0.0), (vec![0.0, 1.0], 0.0)]).unwrap();
        let w = [2.0, 2.0];
        assert_eq!(batch_clipped_grad(&b, &w, 10.0).unwrap(), vec![1.0, 1.0]);

        let single = Batch::from_rows(vec![(vec![1.0, 0.0], 0.0)]).unwrap();
        let w = [2.0, 0.0];
        assert_eq!(
            batch_clipped_loss(&single, &w, 1.0).unwrap(),
            clipped_loss_sample(&single.sample(0), &w, 1.0).unwrap()
        );
        assert_eq!(
            batch_clipped_grad(&single, &w, 1.0).unwrap(),
            clipped_grad_sample(&single.sample(0), &w, 1.0).unwrap()
        );

        let exact = Batch::from_rows(vec![(vec![1.0, 1.0], 3.0), (vec![2.0, 0.0], 4.0)]).unwrap();
        let w = [2.0, 1.0];
        assert_eq!(batch_clipped_loss(&exact, &w, 0.5).unwrap(), 0.0);
        assert_eq!(batch_clipped_grad(&exact, &w, 0.5).unwrap(), vec![0.0, 0.0]);
        assert_eq!(batch_abs_residual(&exact, &w).unwrap(), 0.0);
    }

    #[test]
    fn abs_residual_examples() {
        let b = Batch::from_rows(vec![(vec![1.0], 2.0), (vec![1.0], -2.0)]).unwrap();
        assert_eq!(batch_abs_residual(&b, &[0.0]).unwrap(), 2.0);
        let b = Batch::from_rows(vec![(vec![1.0], 1.0), (vec![1.0], 3.0)]).unwrap();
        assert_eq!(batch_abs_residual(&b, &[0.0]).unwrap(), 2.0);
    }

    #[test]
    fn kink_is_continuous() {
        let x = [1.5, -0.5];
        let w = [1.0, 1.0];
        let sample = s(&x, 0.0);
        let r = sample.residual(&w);
        let k = r.abs();
        let at = clipped_loss_sample(&sample, &w, k).unwrap();
        let above = clipped_loss_sample(&sample, &w, k * (1.0 + 1e-12)).unwrap();
        let below = clipped_loss_sample(&sample, &w, k * (1.0 - 1e-12)).unwrap();
        assert!((at - above).abs() < 1e-10 && (at - below).abs() < 1e-10);
    }

    fn sample_strategy() -> impl Strategy<Value = (Vec<f64>, f64, Vec<f64>, f64)> {
        (1usize..6).prop_flat_map(|d| {
            (
                proptest::collection::vec(-3.0f64..3.0, d),
                -5.0f64..5.0,
                proptest::collection::vec(-3.0f64..3.0, d),
                0.01f64..10.0,
            )
        })
    }

    proptest! {
        #[test]
        fn gradient_norm_bounded((x, y, w, kappa) in sample_strategy()) {
            let g = clipped_grad_sample(&s(&x, y), &w, kappa).unwrap();
            prop_assert!(norm(&g) <= kappa * norm(&x) * (1.0 + 1e-12) + 1e-300);
        }

        #[test]
        fn loss_monotone_in_kappa((x, y, w, kappa) in sample_strategy(), bump in 0.0f64..5.0) {
            let sample = s(&x, y);
            let lo = clipped_loss_sample(&sample, &w, kappa).unwrap();
            let hi = clipped_loss_sample(&sample, &w, kappa + bump).unwrap();
            let sq = clipped_loss_sample(&sample, &w, f64::INFINITY).unwrap();
            prop_assert!(lo <= hi + 1e-12);
            prop_assert!(hi <= sq + 1e-12);
            prop_assert!(lo >= 0.0);
        }

        #[test]
        fn unclipped_region_matches_squared_gradient((x, y, w, _k) in sample_strategy()) {
            let sample = s(&x, y);
            let r = sample.residual(&w);
            let g = clipped_grad_sample(&sample, &w, r.abs() + 1.0).unwrap();
            for (gi, xi) in g.iter().zip(&x) {
                prop_assert!((gi - r * xi).abs() <= 1e-12 * (1.0 + (r * xi).abs()));
            }
        }

        #[test]
        fn batch_ops_are_sample_means(
            rows in proptest::collection::vec((proptest::collection::vec(-2.0f64..2.0, 3), -4.0f64..4.0), 1..12),
            w in proptest::collection::vec(-2.0f64..2.0, 3),
            kappa in 0.05f64..5.0,
        ) {
            let b = Batch::from_rows(rows.clone()).unwrap();
            let n = rows.len() as f64;
            let mut loss = 0.0;
            let mut grad = [0.0; 3];
            let mut abs = 0.0;
            for (x, y) in &rows {
                let sample = s(x, *y);
                loss += clipped_loss_sample(&sample, &w, kappa).unwrap();
                let g = clipped_grad_sample(&sample, &w, kappa).unwrap();
                for j in 0..3 { grad[j] += g[j]; }
                abs += sample.residual(&w).abs();
            }
            prop_assert!((batch_clipped_loss(&b, &w, kappa).unwrap() - loss / n).abs() < 1e-10);
            let bg = batch_clipped_grad(&b, &w, kappa).unwrap();
            for j in 0..3 { prop_assert!((bg[j] - grad[j] / n).abs() < 1e-10); }
            prop_assert!((batch_abs_residual(&b, &w).unwrap() - abs / n).abs() < 1e-10);
        }
    }
}

//! Cross-entropy objectives between predicted codes and pseudo-label codes.
//!
//! The probability-space functions use a `1e-12` floor inside the log. The
//! logit-space variant computes the same quantity through a log-softmax and
//! also returns the gradient with respect to the logits; training uses it
//! because the floor zeroes gradients wherever a sharp softmax underflows.

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::network::layers::log_softmax_rows;

pub const LOG_FLOOR: f64 = 1e-12;

fn check(p: ArrayView2<f64>, q: ArrayView2<f64>, context: &'static str) -> Result<()> {
    if p.dim() != q.dim() {
        return Err(Error::shape(context, q.dim(), p.dim()));
    }
    if p.nrows() == 0 {
        return Err(Error::EmptySequence);
    }
    Ok(())
}

/// `−(1/R)·Σ q·log max(p, 1e-12)` over an `R × K` pair.
pub fn cross_entropy(p: ArrayView2<f64>, q: ArrayView2<f64>) -> f64 {
    let total: f64 = p
        .iter()
        .zip(q.iter())
        .map(|(&pv, &qv)| if qv == 0.0 { 0.0 } else { qv * pv.max(LOG_FLOOR).ln() })
        .sum();
    -total / p.nrows() as f64
}

/// Frame-level loss between `P_f` and `Q_f` (both `B × K`).
pub fn loss_frame(p_f: ArrayView2<f64>, q_f: ArrayView2<f64>) -> Result<f64> {
    check(p_f, q_f, "frame loss")?;
    Ok(cross_entropy(p_f, q_f))
}

/// Segment-level loss between `P_s` and `Q_s` (both `N × K`).
pub fn loss_segment(p_s: ArrayView2<f64>, q_s: ArrayView2<f64>) -> Result<f64> {
    check(p_s, q_s, "segment loss")?;
    Ok(cross_entropy(p_s, q_s))
}

/// Alignment loss between `P_a` and `Q_a` (both `B × K`, action-indexed).
pub fn loss_align(p_a: ArrayView2<f64>, q_a: ArrayView2<f64>) -> Result<f64> {
    check(p_a, q_a, "alignment loss")?;
    Ok(cross_entropy(p_a, q_a))
}

pub fn loss_total(lf: f64, ls: f64, la: f64, alpha: f64, beta: f64) -> f64 {
    lf + alpha * ls + beta * la
}

/// Cross-entropy of `softmax(z)` against `q`, with its gradient in `z`.
///
/// Value: `−(1/R)·Σ q·log_softmax(z)`. Gradient row `i`:
/// `(softmax(z_i)·Σ_j q_ij − q_i) / R`.
pub fn cross_entropy_logits(z: ArrayView2<f64>, q: ArrayView2<f64>) -> Result<(f64, Array2<f64>)> {
    check(z, q, "logit cross-entropy")?;
    let rows = z.nrows() as f64;
    let log_p = log_softmax_rows(z);
    let value = -(&log_p * &q).sum() / rows;
    let mass = q.sum_axis(Axis(1));
    let mut grad = log_p.mapv(f64::exp);
    for (mut row, (&m, q_row)) in grad.rows_mut().into_iter().zip(mass.iter().zip(q.rows())) {
        row *= m;
        row -= &q_row;
        row /= rows;
    }
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::layers::softmax_rows;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn perfect_one_hot_prediction_costs_nothing() {
        let q = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(loss_frame(q.view(), q.view()).unwrap().abs() < 1e-15);
        assert!(loss_segment(q.view(), q.view()).unwrap().abs() < 1e-15);
        assert!(loss_align(q.view(), q.view()).unwrap().abs() < 1e-15);
    }

    #[test]
    fn uniform_prediction_against_transport_codes() {
        // Rows of Q sum to 1/B, so the loss is log K / B.
        let (b, k) = (4, 3);
        let p = Array2::from_elem((b, k), 1.0 / k as f64);
        let q = Array2::from_elem((b, k), 1.0 / (b * k) as f64);
        let expected = (k as f64).ln() / b as f64;
        assert!((loss_frame(p.view(), q.view()).unwrap() - expected).abs() < 1e-12);
        assert!((loss_align(p.view(), q.view()).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn uniform_segment_prediction_costs_log_k() {
        let p = Array2::from_elem((3, 3), 1.0 / 3.0);
        let q = Array2::<f64>::eye(3);
        assert!((loss_segment(p.view(), q.view()).unwrap() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn moving_mass_to_the_target_lowers_segment_loss() {
        let q = array![[0.0, 1.0, 0.0]];
        let worse = array![[0.5, 0.3, 0.2]];
        let better = array![[0.4, 0.4, 0.2]];
        assert!(loss_segment(better.view(), q.view()).unwrap() < loss_segment(worse.view(), q.view()).unwrap());
    }

    #[test]
    fn floor_keeps_zero_probabilities_finite() {
        let p = array![[1.0, 0.0]];
        let q = array![[0.5, 0.5]];
        let l = loss_frame(p.view(), q.view()).unwrap();
        assert!((l - 0.5 * -(LOG_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = Array2::<f64>::zeros((2, 3));
        let q = Array2::<f64>::zeros((3, 2));
        assert!(matches!(
            loss_frame(p.view(), q.view()),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(cross_entropy_logits(p.view(), q.view()).is_err());
    }

    #[test]
    fn total_is_weighted_sum() {
        assert_eq!(loss_total(0.7, 5.0, 9.0, 0.0, 0.0), 0.7);
        assert_eq!(loss_total(1.0, 1.0, 1.0, 1.0, 1.0), 3.0);
        assert_eq!(loss_total(1.0, 2.0, 3.0, 2.0, 0.5), 1.0 + 4.0 + 1.5);
    }

    #[test]
    fn logit_gradient_matches_finite_differences() {
        let z = array![[0.3, -1.2, 2.0], [0.0, 0.5, -0.5]];
        let q = array![[0.1, 0.0, 0.2], [0.3, 0.25, 0.15]];
        let (_, g) = cross_entropy_logits(z.view(), q.view()).unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..3 {
                let mut zp = z.clone();
                zp[[i, j]] += h;
                let mut zm = z.clone();
                zm[[i, j]] -= h;
                let fd = (cross_entropy_logits(zp.view(), q.view()).unwrap().0
                    - cross_entropy_logits(zm.view(), q.view()).unwrap().0)
                    / (2.0 * h);
                assert!((fd - g[[i, j]]).abs() < 1e-8, "{fd} vs {}", g[[i, j]]);
            }
        }
    }

    proptest! {
        #[test]
        fn logit_and_probability_forms_agree(
            vals in proptest::collection::vec(-5.0f64..5.0, 12),
            qs in proptest::collection::vec(0.0f64..1.0, 12),
        ) {
            let z = Array2::from_shape_vec((4, 3), vals).unwrap();
            let q = Array2::from_shape_vec((4, 3), qs).unwrap();
            let p = softmax_rows(z.view());
            let (v, _) = cross_entropy_logits(z.view(), q.view()).unwrap();
            prop_assert!((v - loss_frame(p.view(), q.view()).unwrap()).abs() < 1e-9);
            prop_assert!(v >= 0.0);
        }

        #[test]
        fn loss_is_invariant_to_joint_row_permutation(
            vals in proptest::collection::vec(0.01f64..1.0, 9),
            qs in proptest::collection::vec(0.0f64..1.0, 9),
        ) {
            let p = Array2::from_shape_vec((3, 3), vals).unwrap();
            let q = Array2::from_shape_vec((3, 3), qs).unwrap();
            let order = [2usize, 0, 1];
            let pp = p.select(Axis(0), &order);
            let qp = q.select(Axis(0), &order);
            let a = loss_frame(p.view(), q.view()).unwrap();
            let b = loss_frame(pp.view(), qp.view()).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

//! Scalar losses with their gradients with respect to the prediction.
//!
//! These are plain functions over arrays so that loss bookkeeping outside the
//! tape (reporting, tests) uses exactly the same arithmetic as training.

use std::f64::consts::PI;

use ndarray::{ArrayView2, Zip};

use super::Mat;

/// Wrap an angle difference into `[-π, π)`.
pub fn wrap_angle(d: f64) -> f64 {
    (d + PI).rem_euclid(2.0 * PI) - PI
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn weighted_abs(
    pred: ArrayView2<f64>,
    target: ArrayView2<f64>,
    weights: Option<ArrayView2<f64>>,
    diff: impl Fn(f64, f64) -> f64,
) -> (f64, Mat) {
    assert_eq!(pred.dim(), target.dim(), "loss operands differ in shape");
    let mut grad = Mat::zeros(pred.dim());
    let mut total = 0.0;
    let denom = match weights {
        Some(w) => {
            assert_eq!(w.dim(), pred.dim(), "loss weights differ in shape");
            w.sum()
        }
        None => pred.len() as f64,
    };
    if denom <= 0.0 {
        return (0.0, grad);
    }
    match weights {
        Some(w) => Zip::from(&mut grad)
            .and(pred)
            .and(target)
            .and(w)
            .for_each(|g, &p, &t, &w| {
                let d = diff(p, t);
                total += w * d.abs();
                *g = w * sign(d) / denom;
            }),
        None => Zip::from(&mut grad).and(pred).and(target).for_each(|g, &p, &t| {
            let d = diff(p, t);
            total += d.abs();
            *g = sign(d) / denom;
        }),
    }
    (total / denom, grad)
}

/// Mean absolute error, optionally weighted (normalized by the weight sum).
pub fn mae(pred: ArrayView2<f64>, target: ArrayView2<f64>, weights: Option<ArrayView2<f64>>) -> (f64, Mat) {
    weighted_abs(pred, target, weights, |p, t| p - t)
}

/// Mean absolute error on the wrapped angular difference, so that angles
/// either side of ±π count as neighbours.
pub fn phase_mae(pred: ArrayView2<f64>, target: ArrayView2<f64>, weights: Option<ArrayView2<f64>>) -> (f64, Mat) {
    weighted_abs(pred, target, weights, |p, t| wrap_angle(p - t))
}

pub fn mse(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> (f64, Mat) {
    assert_eq!(pred.dim(), target.dim());
    let n = pred.len() as f64;
    let diff = &pred - &target;
    let value = diff.iter().map(|d| d * d).sum::<f64>() / n;
    (value, diff * (2.0 / n))
}

/// Softmax cross-entropy for a single row of logits.
pub fn cross_entropy(logits: ArrayView2<f64>, label: usize) -> (f64, Mat) {
    assert_eq!(logits.nrows(), 1);
    let row = logits.row(0);
    assert!(label < row.len(), "label {label} out of range");
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let log_z = max + sum.ln();
    let mut grad = Mat::zeros(logits.dim());
    for (k, e) in exps.iter().enumerate() {
        grad[[0, k]] = e / sum - if k == label { 1.0 } else { 0.0 };
    }
    (log_z - row[label], grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn wrapped_difference_across_pi() {
        let pred = array![[-3.1]];
        let target = array![[3.1]];
        let (v, _) = phase_mae(pred.view(), target.view(), None);
        let expected = 2.0 * PI - 6.2;
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.0832).abs() < 1e-4);
    }

    #[test]
    fn zero_weight_sum_gives_zero_loss() {
        let p = array![[1.0, 2.0]];
        let t = array![[0.0, 0.0]];
        let w = array![[0.0, 0.0]];
        let (v, g) = mae(p.view(), t.view(), Some(w.view()));
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let l = array![[0.0, 0.0, 0.0, 0.0]];
        let (v, g) = cross_entropy(l.view(), 2);
        assert!((v - 4f64.ln()).abs() < 1e-12);
        assert!((g[[0, 2]] + 0.75).abs() < 1e-12);
    }
}

//! Elementwise and row-wise kernels with their hand-written derivatives.

use crate::tensor::Matrix;

pub const RMS_EPS: f32 = 1e-5;

/// Row-wise RMS normalization. Returns the output and the per-row `1/rms`
/// needed by [`rmsnorm_backward`]. A zero row maps to a zero row.
pub fn rmsnorm(x: &Matrix, weight: &[f32]) -> (Matrix, Vec<f32>) {
    let (rows, cols) = x.shape();
    let mut out = Matrix::zeros(rows, cols);
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f32>() / cols as f32;
        let inv_rms = 1.0 / (ms + RMS_EPS).sqrt();
        inv.push(inv_rms);
        for ((o, &v), &w) in out.row_mut(r).iter_mut().zip(row).zip(weight) {
            *o = v * inv_rms * w;
        }
    }
    (out, inv)
}

/// Gradient of [`rmsnorm`] w.r.t. its input (the weight is frozen).
pub fn rmsnorm_backward(x: &Matrix, weight: &[f32], inv_rms: &[f32], grad_out: &Matrix) -> Matrix {
    let (rows, cols) = x.shape();
    let mut dx = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let xr = x.row(r);
        let gr = grad_out.row(r);
        let ir = inv_rms[r];
        // sum_j g_j w_j x_j
        let s: f32 = gr
            .iter()
            .zip(weight)
            .zip(xr)
            .map(|((g, w), x)| g * w * x)
            .sum();
        let coef = ir * ir * ir * s / cols as f32;
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = ir * gr[j] * weight[j] - xr[j] * coef;
        }
    }
    dx
}

/// Rotates coordinate pairs `(2i, 2i+1)` of every head in place. Row `r`
/// sits at absolute position `positions[r]`. `inverse` rotates by the
/// negative angle, which is also the transpose used in the backward pass.
pub fn rope(x: &mut Matrix, positions: &[usize], n_heads: usize, base: f32, inverse: bool) {
    let d = x.cols();
    let hd = d / n_heads;
    let half = hd / 2;
    let freqs: Vec<f32> = (0..half)
        .map(|i| base.powf(-((2 * i) as f32) / hd as f32))
        .collect();
    for (r, &pos) in positions.iter().enumerate() {
        let row = x.row_mut(r);
        for h in 0..n_heads {
            for (i, &f) in freqs.iter().enumerate() {
                let angle = pos as f32 * f;
                let (sin, cos) = angle.sin_cos();
                let sin = if inverse { -sin } else { sin };
                let a = h * hd + 2 * i;
                let (x0, x1) = (row[a], row[a + 1]);
                row[a] = x0 * cos - x1 * sin;
                row[a + 1] = x0 * sin + x1 * cos;
            }
        }
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v *= sigmoid(*v);
    }
    out
}

/// `grad_out ⊙ silu'(pre)`.
pub fn silu_backward(pre: &Matrix, grad_out: &Matrix) -> Matrix {
    let mut out = grad_out.clone();
    for (g, &x) in out.data_mut().iter_mut().zip(pre.data()) {
        let s = sigmoid(x);
        *g *= s * (1.0 + x * (1.0 - s));
    }
    out
}

/// Numerically stable softmax of a slice, written into `out`.
pub fn softmax_into(logits: &[f32], out: &mut [f32]) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(f: impl Fn(&Matrix) -> f32, x: &Matrix, analytic: &Matrix) {
        let eps = 1e-2f32;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let num = (f(&xp) - f(&xm)) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!(
                (num - a).abs() <= 2e-3 * (1.0 + a.abs()),
                "coord {i}: numeric {num} analytic {a}"
            );
        }
    }

    fn probe(rows: usize, cols: usize, seed: f32) -> Matrix {
        Matrix::from_fn(rows, cols, |r, c| ((r * cols + c) as f32 * 0.37 + seed).sin())
    }

    #[test]
    fn rmsnorm_of_zero_is_zero() {
        let (y, _) = rmsnorm(&Matrix::zeros(2, 4), &[1.0; 4]);
        assert!(y.is_all_zero());
    }

    #[test]
    fn rmsnorm_gradient_matches_finite_difference() {
        let x = probe(2, 6, 0.3);
        let w: Vec<f32> = (0..6).map(|i| 0.5 + i as f32 * 0.1).collect();
        let g = probe(2, 6, 1.1);
        let loss = |x: &Matrix| {
            let (y, _) = rmsnorm(x, &w);
            y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f32>()
        };
        let (_, inv) = rmsnorm(&x, &w);
        fd_check(loss, &x, &rmsnorm_backward(&x, &w, &inv, &g));
    }

    #[test]
    fn silu_gradient_matches_finite_difference() {
        let x = probe(3, 4, 0.0).scaled(3.0);
        let g = probe(3, 4, 2.0);
        let loss = |x: &Matrix| silu(x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum::<f32>();
        fd_check(loss, &x, &silu_backward(&x, &g));
    }

    #[test]
    fn rope_inverse_round_trips_and_preserves_norm() {
        let x = probe(3, 8, 0.5);
        let pos = [0, 5, 17];
        let mut y = x.clone();
        rope(&mut y, &pos, 2, 10_000.0, false);
        assert_eq!(y.row(0), x.row(0)); // position 0 is the identity
        for r in 0..3 {
            let n0: f32 = x.row(r).iter().map(|v| v * v).sum();
            let n1: f32 = y.row(r).iter().map(|v| v * v).sum();
            assert!((n0 - n1).abs() < 1e-5);
        }
        rope(&mut y, &pos, 2, 10_000.0, true);
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        softmax_into(&[1.0, 2.0, 3.0], &mut a);
        softmax_into(&[1001.0, 1002.0, 1003.0], &mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!((a.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}

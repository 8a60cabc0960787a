//! Device-side ends of the model: token embedding, tied LM head, and the masked
//! next-token loss.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::config::TokenId;
use super::ops::{rmsnorm, rmsnorm_backward, softmax_into};
use super::weights::HeadWeights;

pub fn embed(tokens: &[TokenId], head: &HeadWeights) -> Result<Matrix> {
    let d = head.d();
    let mut out = Matrix::zeros(tokens.len(), d);
    for (r, &t) in tokens.iter().enumerate() {
        let t = t as usize;
        if t >= head.vocab() {
            return Err(Error::input(format!(
                "token id {t} out of range for vocabulary of {}",
                head.vocab()
            )));
        }
        out.row_mut(r).copy_from_slice(head.embedding.row(t));
    }
    Ok(out)
}

/// Scatter-adds per-position gradients into a `vocab × d` embedding gradient.
pub fn embed_backward(tokens: &[TokenId], grad: &Matrix, vocab: usize) -> Matrix {
    let mut out = Matrix::zeros(vocab, grad.cols());
    for (r, &t) in tokens.iter().enumerate() {
        for (o, g) in out.row_mut(t as usize).iter_mut().zip(grad.row(r)) {
            *o += g;
        }
    }
    out
}

fn check_width(acts: &Matrix, head: &HeadWeights) -> Result<()> {
    if acts.cols() != head.d() {
        return Err(Error::input(format!(
            "hidden states have {} columns, LM head expects {}",
            acts.cols(),
            head.d()
        )));
    }
    Ok(())
}

/// `final_norm(acts) · embeddingᵀ`.
pub fn lm_head(acts: &Matrix, head: &HeadWeights) -> Result<Matrix> {
    check_width(acts, head)?;
    let (normed, _) = rmsnorm(acts, &head.final_norm);
    normed.matmul_t(&head.embedding)
}

/// What [`lm_head_backward`] needs from the forward pass.
#[derive(Debug, Clone)]
pub struct HeadStash {
    acts: Matrix,
    normed: Matrix,
    inv_rms: Vec<f32>,
}

pub fn lm_head_train(acts: &Matrix, head: &HeadWeights) -> Result<(Matrix, HeadStash)> {
    check_width(acts, head)?;
    let (normed, inv_rms) = rmsnorm(acts, &head.final_norm);
    let logits = normed.matmul_t(&head.embedding)?;
    Ok((
        logits,
        HeadStash {
            acts: acts.clone(),
            normed,
            inv_rms,
        },
    ))
}

/// Returns the gradient at the hidden states and, if requested, the LM-head
/// share of the tied embedding gradient.
pub fn lm_head_backward(
    stash: &HeadStash,
    head: &HeadWeights,
    grad_logits: &Matrix,
    want_embedding: bool,
) -> Result<(Matrix, Option<Matrix>)> {
    if grad_logits.shape() != (stash.acts.rows(), head.vocab()) {
        return Err(Error::input(format!(
            "logit gradient has shape {:?}, expected {:?}",
            grad_logits.shape(),
            (stash.acts.rows(), head.vocab())
        )));
    }
    let d_normed = grad_logits.matmul(&head.embedding)?;
    let d_acts = rmsnorm_backward(&stash.acts, &head.final_norm, &stash.inv_rms, &d_normed);
    let d_emb = if want_embedding {
        Some(grad_logits.t_matmul(&stash.normed)?)
    } else {
        None
    };
    Ok((d_acts, d_emb))
}

/// Mean negative log-likelihood over positions with `mask[t]`, and its gradient
/// w.r.t. the logits (zero rows where the mask is off).
pub fn masked_cross_entropy(logits: &Matrix, targets: &[TokenId], mask: &[bool]) -> Result<(f32, Matrix)> {
    let (rows, vocab) = logits.shape();
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::input(format!(
            "{rows} logit rows, {} targets, {} mask bits",
            targets.len(),
            mask.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::input("loss mask selects no positions"));
    }
    let inv = 1.0 / count as f32;
    let mut grad = Matrix::zeros(rows, vocab);
    let mut total = 0.0f64;
    let mut probs = vec![0.0; vocab];
    for r in 0..rows {
        if !mask[r] {
            continue;
        }
        let t = targets[r] as usize;
        if t >= vocab {
            return Err(Error::input(format!("target id {t} out of range")));
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
        total += (lse - row[t]) as f64;
        softmax_into(row, &mut probs);
        let g = grad.row_mut(r);
        for (gv, p) in g.iter_mut().zip(&probs) {
            *gv = p * inv;
        }
        g[t] -= inv;
    }
    Ok(((total / count as f64) as f32, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;

    fn head() -> HeadWeights {
        HeadWeights::init(&ModelConfig::toy(8, 1, 2, 16, 42)).unwrap()
    }

    #[test]
    fn embed_is_a_lookup() {
        let h = head();
        let e = embed(&[3, 1, 1], &h).unwrap();
        assert_eq!(e.row(0), h.embedding.row(3));
        assert_eq!(e.row(1), e.row(2));
        assert_eq!(embed(&[], &h).unwrap().shape(), (0, 8));
        assert!(matches!(embed(&[16], &h), Err(Error::Input(_))));
    }

    #[test]
    fn lm_head_of_zero_is_flat() {
        let h = head();
        let logits = lm_head(&Matrix::zeros(2, 8), &h).unwrap();
        assert_eq!(logits.shape(), (2, 16));
        assert!(logits.is_all_zero());
        assert_eq!(lm_head(&Matrix::zeros(1, 8), &h).unwrap().shape(), (1, 16));
        assert!(lm_head(&Matrix::zeros(1, 7), &h).is_err());
    }

    #[test]
    fn uniform_logits_give_ln_v() {
        let (loss, _) = masked_cross_entropy(&Matrix::zeros(3, 16), &[1, 2, 3], &[true, false, true]).unwrap();
        assert!((loss - (16f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn saturated_logits_give_zero_loss() {
        let mut logits = Matrix::zeros(2, 4);
        logits.set(1, 2, 100.0);
        let (loss, grad) = masked_cross_entropy(&logits, &[0, 2], &[false, true]).unwrap();
        assert!(loss < 1e-6);
        assert!(grad.row(0).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn empty_mask_is_an_error() {
        assert!(masked_cross_entropy(&Matrix::zeros(2, 4), &[0, 1], &[false, false]).is_err());
        assert!(masked_cross_entropy(&Matrix::zeros(2, 4), &[0], &[true]).is_err());
    }

    #[test]
    fn loss_gradient_matches_finite_difference() {
        let logits = Matrix::from_fn(3, 5, |r, c| ((r * 5 + c) as f32 * 0.7).sin() * 2.0);
        let targets = [4, 0, 2];
        let mask = [true, false, true];
        let (_, grad) = masked_cross_entropy(&logits, &targets, &mask).unwrap();
        let eps = 1e-2;
        for &(r, c) in &[(0usize, 4usize), (2, 1), (0, 0)] {
            let mut p = logits.clone();
            p.set(r, c, p.get(r, c) + eps);
            let mut m = logits.clone();
            m.set(r, c, m.get(r, c) - eps);
            let lp = masked_cross_entropy(&p, &targets, &mask).unwrap().0;
            let lm = masked_cross_entropy(&m, &targets, &mask).unwrap().0;
            let num = (lp - lm) / (2.0 * eps);
            let a = grad.get(r, c);
            assert!((num - a).abs() <= 1e-3 * a.abs().max(1e-2), "{num} vs {a}");
        }
    }
}

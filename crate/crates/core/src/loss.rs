//! Symmetric contrastive objective over a similarity matrix.

use crate::error::{DapeError, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

fn check_temperature<S: Scalar>(tau: S) -> Result<()> {
    if !(tau > S::zero()) {
        return Err(DapeError::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `½·(CE(S/τ, diag) + CE((S/τ)ᵀ, diag))` for a square `b×b` score matrix, `b ≥ 2`.
pub fn contrastive_loss_from_scores<S: Scalar>(tape: &mut Tape<S>, scores: Var, tau: Var) -> Result<Var> {
    let (b, c) = tape.value(scores).require_matrix("contrastive_loss")?;
    if b != c || b < 2 {
        return Err(DapeError::dim("contrastive_loss", format!("scores must be square with b ≥ 2, got {b}×{c}")));
    }
    check_temperature(tape.value(tau).data()[0])?;
    let logits = tape.div_scalar(scores, tau)?;
    let diag: Vec<usize> = (0..b).collect();
    let li = tape.cross_entropy(logits, &diag)?;
    let lt = tape.transpose(logits)?;
    let lt = tape.cross_entropy(lt, &diag)?;
    let sum = tape.add(li, lt)?;
    tape.scale(sum, S::c(0.5))
}

/// Loss over `img` and `txt` embeddings (`b×d` each, rows L2-normalised).
pub fn contrastive_loss<S: Scalar>(tape: &mut Tape<S>, img: Var, txt: Var, tau: Var) -> Result<Var> {
    if tape.shape(img) != tape.shape(txt) {
        return Err(DapeError::shapes("contrastive_loss", tape.shape(img), tape.shape(txt)));
    }
    let tt = tape.transpose(txt)?;
    let s = tape.matmul(img, tt)?;
    contrastive_loss_from_scores(tape, s, tau)
}

/// Value of the loss, with gradients with respect to the scores and to `τ`.
pub fn contrastive_loss_grad<S: Scalar>(scores: &Tensor<S>, tau: S) -> Result<(S, Tensor<S>, S)> {
    let mut tape = Tape::new();
    let s = tape.param(scores.clone());
    let t = tape.param(Tensor::scalar(tau));
    let loss = contrastive_loss_from_scores(&mut tape, s, t)?;
    let g = tape.backward(loss)?;
    let value = tape.value(loss).data()[0];
    Ok((value, g.get_or_zeros(s, scores), g.get_or_zeros(t, tape.value(t)).data()[0]))
}

pub fn contrastive_loss_value<S: Scalar>(scores: &Tensor<S>, tau: S) -> Result<S> {
    let mut tape = Tape::new();
    let s = tape.constant(scores.clone());
    let t = tape.constant(Tensor::scalar(tau));
    let loss = contrastive_loss_from_scores(&mut tape, s, t)?;
    Ok(tape.value(loss).data()[0])
}

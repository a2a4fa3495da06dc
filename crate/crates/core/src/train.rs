//! Cross-encoder contrastive training with plain gradient descent.
//!
//! Every (image, text) pair in a batch gets its own forward pass, so a batch
//! of `b` costs `b²` passes. Scores are gathered first, the loss gradient with
//! respect to each score is formed, and each pair's tape is then reversed
//! from its score with that seed.

use crate::config::DapeConfig;
use crate::decisions::Decisions;
use crate::error::{DapeError, Result};
use crate::loss::{contrastive_loss_from_scores, contrastive_loss_grad};
use crate::model::{forward_pair, Batch, DapeModel, ModelWeights};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Temperature bounds applied after each update.
pub const TEMPERATURE_RANGE: (f64, f64) = (1e-2, 1.0);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Loss before the update.
    pub loss: f64,
    pub grad_norm: f64,
    /// Temperature after the update.
    pub temperature: f64,
}

#[derive(Clone, Debug)]
pub struct BatchGradients<S> {
    pub loss: S,
    pub scores: Tensor<S>,
    /// One entry per parameter store slot.
    pub params: Vec<Tensor<S>>,
    /// Derivative with respect to `ln τ`.
    pub log_temperature: S,
}

impl<S: Scalar> BatchGradients<S> {
    pub fn norm(&self) -> S {
        let sq: S = self.params.iter().map(|g| g.data().iter().map(|&x| x * x).sum::<S>()).sum();
        (sq + self.log_temperature * self.log_temperature).sqrt()
    }
}

/// Loss of a whole batch on a single tape: all `b²` pairs, then the objective.
pub fn batch_loss_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    cfg: &DapeConfig,
    w: &ModelWeights<Var>,
    tau: Var,
    batch: &Batch<S>,
    decisions: &mut Decisions<S>,
) -> Result<Var> {
    let b = batch.len();
    let mut scores = Vec::with_capacity(b * b);
    for image in &batch.images {
        for text in &batch.texts {
            scores.push(forward_pair(tape, cfg, w, image, text, decisions)?.score);
        }
    }
    let s = tape.concat_rows(&scores)?;
    let s = tape.reshape(s, &[b, b])?;
    contrastive_loss_from_scores(tape, s, tau)
}

/// Loss and gradients for `batch` without touching the model.
pub fn batch_gradients<S: Scalar>(model: &DapeModel<S>, batch: &Batch<S>) -> Result<BatchGradients<S>> {
    let b = batch.len();
    let mut scores = Tensor::zeros(&[b, b]);
    let mut tapes = Vec::with_capacity(b * b);
    for (i, image) in batch.images.iter().enumerate() {
        for (j, text) in batch.texts.iter().enumerate() {
            let mut tape = Tape::new();
            let (w, vars) = model.bind(&mut tape);
            let out = forward_pair(&mut tape, &model.config, &w, image, text, &mut Decisions::live())?;
            scores.set2(i, j, tape.value(out.score).data()[0]);
            tapes.push((tape, vars, out.score));
        }
    }
    let (loss, ds, dtau) = contrastive_loss_grad(&scores, model.temperature)?;
    if !loss.is_finite() {
        return Err(DapeError::Numeric(format!("non-finite loss {loss}")));
    }
    let mut params: Vec<Tensor<S>> = (0..model.store.len()).map(|k| Tensor::zeros(model.store.get(k).shape())).collect();
    for (n, (tape, vars, score)) in tapes.into_iter().enumerate() {
        let seed = ds.data()[n];
        if seed == S::zero() {
            continue;
        }
        let g = tape.backward_seeded(score, Tensor::full(tape.shape(score), seed))?;
        for (k, &v) in vars.iter().enumerate() {
            if let Some(gk) = g.get(v) {
                params[k].add_assign(gk)?;
            }
        }
    }
    Ok(BatchGradients { loss, scores, params, log_temperature: dtau * model.temperature })
}

/// `θ ← θ − lr·g`; the temperature moves in log space and is clamped to [`TEMPERATURE_RANGE`]
/// (widened to include its current value).
pub fn apply_gradients<S: Scalar>(model: &mut DapeModel<S>, grads: &BatchGradients<S>, lr: f64) -> Result<()> {
    if grads.params.len() != model.store.len() {
        return Err(DapeError::dim("apply_gradients", format!("{} gradients for {} parameters", grads.params.len(), model.store.len())));
    }
    let lr = S::c(lr);
    for (k, g) in grads.params.iter().enumerate() {
        let p = model.store.get_mut(k);
        if p.shape() != g.shape() {
            return Err(DapeError::shapes("apply_gradients", p.shape(), g.shape()));
        }
        for (x, &dx) in p.data_mut().iter_mut().zip(g.data()) {
            *x -= lr * dx;
        }
    }
    let (lo, hi) = TEMPERATURE_RANGE;
    let cur = model.temperature;
    let tau = cur * (-(lr * grads.log_temperature)).exp();
    model.temperature = tau.max(S::c(lo).min(cur)).min(S::c(hi).max(cur));
    Ok(())
}

/// One gradient-descent step at the configured learning rate.
pub fn train_step<S: Scalar>(model: &mut DapeModel<S>, batch: &Batch<S>) -> Result<StepReport> {
    let grads = batch_gradients(model, batch)?;
    let grad_norm = grads.norm();
    if !grad_norm.is_finite() {
        return Err(DapeError::Numeric("non-finite gradient norm".into()));
    }
    let lr = model.config.learning_rate;
    apply_gradients(model, &grads, lr)?;
    Ok(StepReport { loss: grads.loss.as_f64(), grad_norm: grad_norm.as_f64(), temperature: model.temperature.as_f64() })
}

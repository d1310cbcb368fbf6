//! Dense tensors, the differentiable layer set, cross-entropy loss and the
//! gradients of that loss with respect to inputs and parameters.

mod batch;
pub(crate) mod gemm;
mod layers;
mod loss;
mod tensor;

use rayon::prelude::*;

pub use batch::LabeledBatch;
pub use layers::{Layer, Network, Trace};
pub use loss::{
    argmax, cross_entropy, cross_entropy_logit_grad, order_free_mean, pairwise_sum, softmax, PROB_FLOOR,
};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::models::Model;

/// Samples per gradient work unit. Chunk boundaries are fixed so that the
/// summation order never depends on the number of worker threads.
pub const GRAD_CHUNK: usize = 16;

/// Output distribution (N×k softmax rows) of `model` on `images`.
pub fn forward(model: &Model, images: &Tensor) -> Result<Tensor> {
    model.check_input(images)?;
    Ok(softmax(&model.network().forward(images)?))
}

/// Mean cross-entropy of the model on `(images, labels)`.
pub fn loss(model: &Model, images: &Tensor, labels: &[usize]) -> Result<f64> {
    cross_entropy(&forward(model, images)?, labels)
}

fn check_labels(images: &Tensor, labels: &[usize]) -> Result<()> {
    if images.batch_len() != labels.len() {
        return Err(Error::input(format!(
            "{} images but {} labels",
            images.batch_len(),
            labels.len()
        )));
    }
    Ok(())
}

/// Loss and ∇ₓL for a batch (gradient of the batch-mean loss).
pub fn loss_and_grad_input(model: &Model, images: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    model.check_input(images)?;
    check_labels(images, labels)?;
    let (logits, traces) = model.network().forward_traced(images)?;
    let probs = softmax(&logits);
    let loss = cross_entropy(&probs, labels)?;
    let g = cross_entropy_logit_grad(&probs, labels)?;
    let dx = model.network().backward(&traces, g, None)?;
    Ok((loss, dx))
}

/// ∇ₓL, same shape as `images`.
pub fn grad_input(model: &Model, images: &Tensor, labels: &[usize]) -> Result<Tensor> {
    loss_and_grad_input(model, images, labels).map(|(_, g)| g)
}

/// Mean loss and ∇θL over `(images, labels)`, ordered like
/// [`Model::params`]. Work is split into fixed [`GRAD_CHUNK`]-sample chunks
/// evaluated in parallel and summed in chunk order.
pub fn loss_and_grad_params(model: &Model, images: &Tensor, labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    model.check_input(images)?;
    check_labels(images, labels)?;
    let n = labels.len();
    let chunks: Vec<(usize, usize)> = (0..n)
        .step_by(GRAD_CHUNK)
        .map(|s| (s, (s + GRAD_CHUNK).min(n)))
        .collect();
    let partials = chunks
        .par_iter()
        .map(|&(start, end)| {
            let idx: Vec<usize> = (start..end).collect();
            let x = images.gather(&idx);
            let y = &labels[start..end];
            let (logits, traces) = model.network().forward_traced(&x)?;
            let probs = softmax(&logits);
            let mut g = cross_entropy_logit_grad(&probs, y)?;
            // Rescale from the chunk mean to this chunk's share of the batch mean.
            g.scale((end - start) as f64 / n as f64);
            let mut grads = model.network().zero_grads();
            model.network().backward(&traces, g, Some(&mut grads))?;
            let loss_sum = cross_entropy(&probs, y)? * (end - start) as f64;
            Ok((loss_sum, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = model.network().zero_grads();
    let mut loss_terms = Vec::with_capacity(partials.len());
    for (l, grads) in partials {
        loss_terms.push(l);
        for (t, g) in total.iter_mut().zip(&grads) {
            t.add_assign(g)?;
        }
    }
    Ok((pairwise_sum(&loss_terms) / n as f64, total))
}

/// ∇θL of the batch-mean loss.
pub fn grad_params(model: &Model, batch: &LabeledBatch) -> Result<Vec<Tensor>> {
    loss_and_grad_params(model, batch.images(), batch.labels()).map(|(_, g)| g)
}

/// θ ← θ − lr·g, elementwise.
pub fn sgd_update<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, grads: &[Tensor], lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::config(format!("learning rate must be finite and ≥ 0, got {lr}")));
    }
    let params: Vec<&mut Tensor> = params.into_iter().collect();
    if params.len() != grads.len() {
        return Err(Error::internal(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        p.expect_shape(g.shape())?;
    }
    for (p, g) in params.into_iter().zip(grads) {
        for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

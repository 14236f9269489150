//! One optimisation step and batched evaluation.

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{Model, TrainabilityConfig};
use crate::optim::Sgd;
use crate::tensor::Tensor;

/// Outcome of a training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// FLOPs the tape executed, loss excluded.
    pub executed_flops: u64,
}

/// Forward, cross-entropy, backward and an SGD update of every trainable
/// parameter. `step` is only used to label a divergence error.
pub fn train_step(
    model: &mut Model,
    train: &TrainabilityConfig,
    opt: &mut Sgd,
    images: &Tensor,
    labels: &[usize],
    step: usize,
) -> Result<StepStats> {
    let mut tape = Tape::new();
    let (logits, bound) = model.forward(&mut tape, images, train)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let loss_value = tape.value(loss).data()[0];
    if !loss_value.is_finite() {
        return Err(Error::Diverged { step, loss: loss_value });
    }
    tape.backward(loss)?;
    let grads = model.gradients(&tape, &bound);
    for (param, grad) in model.params_mut().into_iter().zip(grads) {
        if train.is_trainable(param.group) {
            opt.step(&param.name, param.value.data_mut(), grad.as_deref())?;
        }
    }
    Ok(StepStats {
        loss: loss_value,
        executed_flops: tape.total_flops().total(),
    })
}

/// Index of the largest logit per row; ties resolve to the lowest class.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Top-1 accuracy, evaluated in batches of `batch_size`.
pub fn evaluate(model: &Model, images: &Tensor, labels: &[usize], batch_size: usize) -> Result<f64> {
    let n = labels.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + batch_size.max(1)).min(n);
        let logits = model.logits(&images.slice_rows(start, end)?)?;
        correct += predict(&logits)
            .iter()
            .zip(&labels[start..end])
            .filter(|(p, l)| p == l)
            .count();
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

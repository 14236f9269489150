use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean softmax cross-entropy plus the softmax probabilities (reused by the
/// backward pass). Each row is stabilised by subtracting its maximum.
pub fn softmax_cross_entropy_parts(
    logits: &[f64],
    labels: &[usize],
    classes: usize,
) -> Result<(f64, Vec<f64>)> {
    if classes == 0 || logits.len() != labels.len() * classes {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{} logits for {} labels x {classes} classes", logits.len(), labels.len()),
        ));
    }
    let mut probs = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { row, label, classes });
        }
        let z = &logits[row * classes..(row + 1) * classes];
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        for (p, v) in probs[row * classes..(row + 1) * classes].iter_mut().zip(z) {
            *p = (v - max).exp() / sum;
        }
        total += log_sum - (z[label] - max);
    }
    Ok((total / labels.len() as f64, probs))
}

pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let &[n, c] = logits.shape() else {
        return Err(Error::shape("softmax_cross_entropy", format!("expected [N, C], got {:?}", logits.shape())));
    };
    if n != labels.len() {
        return Err(Error::shape("softmax_cross_entropy", format!("{n} rows vs {} labels", labels.len())));
    }
    softmax_cross_entropy_parts(logits.data(), labels, c).map(|(l, _)| l)
}

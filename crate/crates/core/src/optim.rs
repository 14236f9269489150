use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// SGD with heavy-ball momentum: `v <- momentum * v + g; w <- w - lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Updates one named parameter. A missing gradient is an error: callers
    /// only step parameters they marked trainable.
    pub fn step(&mut self, name: &str, weights: &mut [f64], grad: Option<&[f64]>) -> Result<()> {
        let grad = grad.ok_or_else(|| Error::MissingGrad(name.to_string()))?;
        if grad.len() != weights.len() {
            return Err(Error::shape(
                "sgd_step",
                format!("`{name}`: gradient {} vs weights {}", grad.len(), weights.len()),
            ));
        }
        let v = self
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; weights.len()]);
        if v.len() != weights.len() {
            *v = vec![0.0; weights.len()];
        }
        for ((w, vi), g) in weights.iter_mut().zip(v.iter_mut()).zip(grad) {
            *vi = self.momentum * *vi + g;
            *w -= self.lr * *vi;
        }
        Ok(())
    }

    pub fn reset(&mut self) {
        self.velocity.clear();
    }
}

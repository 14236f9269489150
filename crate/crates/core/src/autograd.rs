//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! A tape is recorded once per forward pass and consumed by one call to
//! [`Tape::backward`]. A node needs a gradient only when a trainable leaf
//! lies upstream of it, so frozen prefixes cost nothing in the backward pass
//! and frozen layers downstream of trainable ones still pass input gradients.

use std::cell::Cell;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::conv::{conv_backward, conv_forward, ConvDims, ConvGeometry, FilterLayout, WeightsRef};
use crate::ops::{self, PoolDims};
use crate::tensor::Tensor;

thread_local! {
    static TAPES_RECORDED: Cell<u64> = const { Cell::new(0) };
}

/// Number of tapes created on the current thread. Lets tests assert that a
/// code path evaluated no network at all.
pub fn tapes_recorded() -> u64 {
    TAPES_RECORDED.with(Cell::get)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// FLOPs a node actually executed.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ExecutedFlops {
    pub forward: u64,
    pub backward_input: u64,
    pub backward_weight: u64,
}

impl ExecutedFlops {
    pub fn total(&self) -> u64 {
        self.forward + self.backward_input + self.backward_weight
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dims: ConvDims,
        layout: Option<Arc<FilterLayout>>,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input: Var,
        plane: usize,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        dims: (usize, usize, usize),
    },
    Add(Var, Var),
    Scale(Var, f64),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    WeightedSum {
        input: Var,
        coeffs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    label: Option<String>,
    flops: ExecutedFlops,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        TAPES_RECORDED.with(|c| c.set(c.get() + 1));
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, forward: u64) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            label: None,
            flops: ExecutedFlops {
                forward,
                ..Default::default()
            },
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad, 0)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Attributes the node's executed FLOPs to a named layer.
    pub fn label(&mut self, v: Var, name: impl Into<String>) -> Var {
        self.nodes[v.0].label = Some(name.into());
        v
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        self.conv_impl(input, weight, bias, geom, None)
    }

    /// Convolution over a filter-compacted layer; `weight` holds the
    /// surviving `K x K` kernels in layout pair order.
    pub fn filter_conv2d(
        &mut self,
        input: Var,
        weight: Var,
        layout: Arc<FilterLayout>,
        geom: ConvGeometry,
    ) -> Result<Var> {
        self.conv_impl(input, weight, None, geom, Some(layout))
    }

    fn conv_impl(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        layout: Option<Arc<FilterLayout>>,
    ) -> Result<Var> {
        let dims = ConvDims::new(self.value(input).shape(), &geom)?;
        let w = self.value(weight).data();
        let weights = match &layout {
            Some(l) => WeightsRef::Filters(l, w),
            None => WeightsRef::Dense(w),
        };
        let b = bias.map(|b| self.value(b).data());
        let (out, flops) = conv_forward(self.value(input).data(), weights, b, &dims)?;
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        let value = Tensor::new(dims.output_shape().to_vec(), out)?;
        Ok(self.push(
            value,
            Op::Conv {
                input,
                weight,
                bias,
                dims,
                layout,
            },
            needs,
            flops,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (out, flops) = ops::relu_forward(self.value(x).data());
        let value = Tensor::new(self.value(x).shape().to_vec(), out).expect("same shape");
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs, flops)
    }

    pub fn max_pool(&mut self, x: Var, window: usize, stride: usize) -> Result<Var> {
        let d = PoolDims::new(self.value(x).shape(), window, stride)?;
        let (out, argmax, flops) = ops::max_pool_forward(self.value(x).data(), &d);
        let value = Tensor::new(d.output_shape().to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::MaxPool { input: x, argmax }, needs, flops))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let &[n, c, h, w] = self.value(x).shape() else {
            return Err(Error::shape(
                "global_avg_pool",
                format!("expected NCHW, got {:?}", self.value(x).shape()),
            ));
        };
        let (out, flops) = ops::global_avg_pool_forward(self.value(x).data(), n * c, h * w);
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![n, c], out)?,
            Op::GlobalAvgPool { input: x, plane: h * w },
            needs,
            flops,
        ))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let dims = ops::dense::linear_dims(
            self.value(x).shape(),
            self.value(weight).shape(),
            bias.map(|b| self.value(b).shape()),
        )?;
        let (n, fan_in, fan_out) = dims;
        let (y, flops) = ops::linear_forward(
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            n,
            fan_in,
            fan_out,
        );
        let needs = self.needs(x) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::new(vec![n, fan_out], y)?,
            Op::Linear {
                input: x,
                weight,
                bias,
                dims,
            },
            needs,
            flops,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::residual_add(self.value(a), self.value(b))?;
        let flops = value.numel() as u64;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs, flops))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let value = Tensor::from_fn(v.shape(), |i| v.data()[i] * factor);
        let flops = value.numel() as u64;
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, factor), needs, flops)
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let &[n, c] = self.value(logits).shape() else {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("expected [N, C], got {:?}", self.value(logits).shape()),
            ));
        };
        if n != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{n} rows vs {} labels", labels.len()),
            ));
        }
        let (loss, probs) = ops::softmax_cross_entropy_parts(self.value(logits).data(), labels, c)?;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            needs,
            0,
        ))
    }

    /// `sum(coeffs * x)`, a scalar probe used for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, coeffs: Vec<f64>) -> Result<Var> {
        if coeffs.len() != self.value(x).numel() {
            return Err(Error::shape("weighted_sum", "coefficient count mismatch"));
        }
        let s = self.value(x).data().iter().zip(&coeffs).map(|(a, b)| a * b).sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { input: x, coeffs }, needs, 0))
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.needs(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) || !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            self.propagate(idx, &g)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        match &mut self.grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn propagate(&mut self, idx: usize, g: &[f64]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut flops = ExecutedFlops::default();
        let mut out: Vec<(Var, Vec<f64>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv {
                input,
                weight,
                bias,
                dims,
                layout,
            } => {
                let w = self.nodes[weight.0].value.data();
                let weights = match layout {
                    Some(l) => WeightsRef::Filters(l, w),
                    None => WeightsRef::Dense(w),
                };
                let want_w = self.needs(*weight) || bias.is_some_and(|b| self.needs(b));
                let grads = conv_backward(
                    self.nodes[input.0].value.data(),
                    weights,
                    bias.is_some(),
                    dims,
                    g,
                    self.needs(*input),
                    want_w,
                )?;
                flops.backward_input = grads.input_flops;
                flops.backward_weight = grads.weight_flops;
                if let Some(dx) = grads.input {
                    out.push((*input, dx));
                }
                if let Some(dw) = grads.weights {
                    if self.needs(*weight) {
                        out.push((*weight, dw));
                    }
                }
                if let (Some(b), Some(db)) = (bias, grads.bias) {
                    if self.needs(*b) {
                        out.push((*b, db));
                    }
                }
            }
            Op::Relu(x) => {
                let (dx, f) = ops::relu_backward(self.nodes[x.0].value.data(), g);
                flops.backward_input = f;
                out.push((*x, dx));
            }
            Op::MaxPool { input, argmax } => {
                let (dx, f) = ops::max_pool_backward(argmax, self.nodes[input.0].value.numel(), g);
                flops.backward_input = f;
                out.push((*input, dx));
            }
            Op::GlobalAvgPool { input, plane } => {
                let (dx, f) = ops::global_avg_pool_backward(g, *plane);
                flops.backward_input = f;
                out.push((*input, dx));
            }
            Op::Linear {
                input,
                weight,
                bias,
                dims: (n, fan_in, fan_out),
            } => {
                let want_w = self.needs(*weight) || bias.is_some_and(|b| self.needs(b));
                let grads = ops::linear_backward(
                    self.nodes[input.0].value.data(),
                    self.nodes[weight.0].value.data(),
                    bias.is_some(),
                    *n,
                    *fan_in,
                    *fan_out,
                    g,
                    self.needs(*input),
                    want_w,
                );
                flops.backward_input = grads.input_flops;
                flops.backward_weight = grads.weight_flops;
                if let Some(dx) = grads.input {
                    out.push((*input, dx));
                }
                if let Some(dw) = grads.weights {
                    if self.needs(*weight) {
                        out.push((*weight, dw));
                    }
                }
                if let (Some(b), Some(db)) = (bias, grads.bias) {
                    if self.needs(*b) {
                        out.push((*b, db));
                    }
                }
            }
            Op::Add(a, b) => {
                flops.backward_input = g.len() as u64;
                for v in [*a, *b] {
                    if self.needs(v) {
                        out.push((v, g.to_vec()));
                    }
                }
            }
            Op::Scale(x, factor) => {
                flops.backward_input = g.len() as u64;
                out.push((*x, g.iter().map(|v| v * factor).collect()));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let classes = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                let mut d = probs.clone();
                for (row, &label) in labels.iter().enumerate() {
                    d[row * classes + label] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                out.push((*logits, d));
            }
            Op::WeightedSum { input, coeffs } => {
                out.push((*input, coeffs.iter().map(|c| c * g[0]).collect()));
            }
        }
        self.nodes[idx].flops.backward_input = flops.backward_input;
        self.nodes[idx].flops.backward_weight = flops.backward_weight;
        for (v, contribution) in out {
            if self.needs(v) {
                self.accumulate(v, contribution);
            }
        }
        Ok(())
    }

    /// Gradient of a leaf after [`Tape::backward`]; `None` for leaves that
    /// did not require one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }

    /// Executed FLOPs grouped by layer label, in first-recorded order.
    pub fn layer_flops(&self) -> Vec<(String, ExecutedFlops)> {
        let mut out: Vec<(String, ExecutedFlops)> = Vec::new();
        for node in &self.nodes {
            let Some(label) = &node.label else { continue };
            match out.iter_mut().find(|(l, _)| l == label) {
                Some((_, f)) => {
                    f.forward += node.flops.forward;
                    f.backward_input += node.flops.backward_input;
                    f.backward_weight += node.flops.backward_weight;
                }
                None => out.push((label.clone(), node.flops)),
            }
        }
        out
    }

    /// Smallest distance of any recorded ReLU input from zero, where the
    /// ReLU derivative jumps. Finite-difference checks are only meaningful
    /// when a perturbation cannot cross it.
    pub fn kink_margin(&self) -> f64 {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(self.value(x).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))),
                _ => None,
            })
            .fold(f64::INFINITY, f64::min)
    }

    pub fn total_flops(&self) -> ExecutedFlops {
        self.layer_flops()
            .into_iter()
            .fold(ExecutedFlops::default(), |acc, (_, f)| ExecutedFlops {
                forward: acc.forward + f.forward,
                backward_input: acc.backward_input + f.backward_input,
                backward_weight: acc.backward_weight + f.backward_weight,
            })
    }
}

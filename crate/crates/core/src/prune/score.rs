//! Saliency scores and keep-set selection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Signal {
    Magnitude,
    Random,
}

impl Signal {
    pub fn as_str(&self) -> &'static str {
        match self {
            Signal::Magnitude => "magnitude",
            Signal::Random => "random",
        }
    }
}

fn random_scores(n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::rng(seed, &[]);
    (0..n).map(|_| r.gen::<f64>()).collect()
}

/// One score per scalar weight.
pub fn score_weights(weights: &Tensor, signal: Signal, seed: u64) -> Vec<f64> {
    match signal {
        Signal::Magnitude => weights.data().iter().map(|w| w.abs()).collect(),
        Signal::Random => random_scores(weights.numel(), seed),
    }
}

/// One score per `(out, in)` kernel of a dense `[out, in, K, K]` weight,
/// indexed `out * in_channels + in`.
pub fn score_filters(weights: &Tensor, signal: Signal, seed: u64) -> Vec<f64> {
    let [o, i, k, _] = dims4(weights);
    match signal {
        Signal::Magnitude => weights.data().chunks(k * k).map(l1).collect(),
        Signal::Random => random_scores(o * i, seed),
    }
}

/// One score per output channel: L1 norm of all its incoming kernels.
pub fn score_channels(weights: &Tensor, signal: Signal, seed: u64) -> Vec<f64> {
    let [o, i, k, _] = dims4(weights);
    match signal {
        Signal::Magnitude => weights.data().chunks(i * k * k).map(l1).collect(),
        Signal::Random => random_scores(o, seed),
    }
}

fn l1(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x.abs()).sum()
}

fn dims4(w: &Tensor) -> [usize; 4] {
    let s = w.shape();
    assert_eq!(s.len(), 4, "scores need a dense [out, in, K, K] weight");
    [s[0], s[1], s[2], s[3]]
}

/// Items in pruning order: lowest score first, ties to the lower index.
fn pruning_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order
}

/// Number of items removed at `rate` out of `n`: `floor(rate * n)`, leaving
/// at least one.
pub fn pruned_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64).floor() as usize).min(n.saturating_sub(1))
}

/// Sorted indices that survive pruning the lowest-scoring `rate` fraction.
pub fn select_keep(scores: &[f64], rate: f64) -> Vec<usize> {
    let drop = pruned_count(rate, scores.len());
    let mut keep = pruning_order(scores)[drop..].to_vec();
    keep.sort_unstable();
    keep
}

/// Like [`select_keep`] over `out * inputs` filter scores, but never removes
/// the last filter of an output channel; the next-lowest filter is taken
/// instead.
pub fn select_filter_keep(scores: &[f64], out_channels: usize, in_channels: usize, rate: f64) -> Vec<usize> {
    assert_eq!(scores.len(), out_channels * in_channels);
    let target = ((rate * scores.len() as f64).floor() as usize).min(scores.len() - out_channels);
    let mut remaining = vec![in_channels; out_channels];
    let mut kept = vec![true; scores.len()];
    let mut dropped = 0;
    for idx in pruning_order(scores) {
        if dropped == target {
            break;
        }
        let o = idx / in_channels;
        if remaining[o] > 1 {
            remaining[o] -= 1;
            kept[idx] = false;
            dropped += 1;
        }
    }
    (0..scores.len()).filter(|&i| kept[i]).collect()
}

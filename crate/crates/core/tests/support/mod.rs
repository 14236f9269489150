//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::sync::Arc;

use rand::Rng;

use prunebench::autograd::{ExecutedFlops, Tape, Var};
use prunebench::model::{attach_adapters, freeze_blocks, truncate_blocks, Model, ModelSpec, TrainabilityConfig};
use prunebench::flops::{flop_report, training_step_flops, Granularity};
use prunebench::ops::{softmax_cross_entropy, ConvGeometry, FilterLayout};
use prunebench::prune::{
    gather_filters, gather_in_channels, gather_out_channels, prune, pruned_count, KeepSet, PruningPlan, Signal,
};
use prunebench::rng;
use prunebench::Tensor;

pub const FD_EPS: f64 = 1e-5;
pub const GRAD_REL_TOL: f64 = 1e-5;
/// Denominator floor of the relative error. Central differences at
/// `FD_EPS` carry about 1e-11 of rounding noise on an O(1) loss, so
/// gradients below this scale are judged on absolute error.
pub const REL_DENOM_FLOOR: f64 = 1e-4;
/// ReLU inputs closer than this to zero make a finite difference invalid.
pub const KINK_MARGIN: f64 = 1e-4;

pub fn uniform(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut r = rng::rng(seed, &[0x7e57]);
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

pub fn labels(n: usize, classes: usize, seed: u64) -> Vec<usize> {
    let mut r = rng::rng(seed, &[0x1abe1]);
    (0..n).map(|_| r.gen_range(0..classes)).collect()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_DENOM_FLOOR)
}

/// Max relative error between backprop and central differences for the
/// scalar `sum(c * f(inputs))`, with fixed random probe weights `c`.
pub fn op_gradcheck(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let probe = |tape: &mut Tape, out: Var| {
        let n = tape.value(out).numel();
        if n == 1 {
            return out;
        }
        let c = uniform(&[n], 99, -1.0, 1.0).into_data();
        tape.weighted_sum(out, c).expect("probe length matches")
    };
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone(), false)).collect();
        let out = f(&mut tape, &vars);
        let s = probe(&mut tape, out);
        tape.value(s).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    let s = probe(&mut tape, out);
    tape.backward(s).expect("scalar output");
    let grads: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).expect("leaf gradient").to_vec()).collect();

    let mut worst = 0.0f64;
    let mut xs = inputs.to_vec();
    for (i, g) in grads.iter().enumerate() {
        for j in 0..g.len() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + FD_EPS;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - FD_EPS;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            worst = worst.max(rel_err(g[j], (up - down) / (2.0 * FD_EPS)));
        }
    }
    worst
}

pub type OpFn = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// Every differentiable op with fixed random inputs. ReLU is checked
/// separately on inputs held away from its kink.
pub fn op_cases() -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let x = uniform(&[2, 3, 5, 5], 3, -1.0, 1.0);
    let w = uniform(&[4, 3, 3, 3], 4, -1.0, 1.0);
    let geom = ConvGeometry::new(3, 4, 3, 2, 1);
    let layout = Arc::new(FilterLayout::new(4, 3, vec![vec![0, 2], vec![1], vec![0, 1, 2], vec![2]]).unwrap());
    vec![
        ("conv", vec![x.clone(), w.clone()], Box::new(move |t, v| t.conv2d(v[0], v[1], None, geom).unwrap())),
        (
            "conv_bias",
            vec![x.clone(), w.clone(), uniform(&[4], 5, -1.0, 1.0)],
            Box::new(move |t, v| t.conv2d(v[0], v[1], Some(v[2]), geom).unwrap()),
        ),
        (
            "filter_conv",
            vec![x.clone(), uniform(&[7, 3, 3], 6, -1.0, 1.0)],
            Box::new(move |t, v| t.filter_conv2d(v[0], v[1], layout.clone(), geom).unwrap()),
        ),
        ("max_pool", vec![uniform(&[2, 2, 4, 6], 7, -1.0, 1.0)], Box::new(|t, v| t.max_pool(v[0], 2, 2).unwrap())),
        ("global_avg_pool", vec![x.clone()], Box::new(|t, v| t.global_avg_pool(v[0]).unwrap())),
        (
            "linear",
            vec![uniform(&[3, 5], 8, -1.0, 1.0), uniform(&[4, 5], 9, -1.0, 1.0), uniform(&[4], 10, -1.0, 1.0)],
            Box::new(|t, v| t.linear(v[0], v[1], Some(v[2])).unwrap()),
        ),
        ("add", vec![x.clone(), uniform(&[2, 3, 5, 5], 11, -1.0, 1.0)], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
        ("scale", vec![x], Box::new(|t, v| t.scale(v[0], -1.5))),
        (
            "softmax_cross_entropy",
            vec![uniform(&[4, 5], 12, -2.0, 2.0)],
            Box::new(|t, v| t.softmax_cross_entropy(v[0], &[0, 4, 2, 2]).unwrap()),
        ),
    ]
}

/// ReLU inputs at least 0.1 from zero, with mixed signs.
pub fn relu_input() -> Tensor {
    let x = uniform(&[3, 8], 13, 0.1, 1.0);
    let signs = uniform(&[3, 8], 14, -1.0, 1.0);
    Tensor::from_fn(x.shape(), |i| x.data()[i] * signs.data()[i].signum())
}

/// Smallest |input| over every ReLU in one forward pass.
pub fn kink_margin(model: &Model, images: &Tensor) -> f64 {
    let mut tape = Tape::new();
    model.forward(&mut tape, images, &TrainabilityConfig::frozen(model)).unwrap();
    tape.kink_margin()
}

/// The first `n` single-image inputs whose ReLU inputs all sit at least
/// `KINK_MARGIN` from zero, stacked into one batch.
pub fn inputs_away_from_kinks(model: &Model, n: usize) -> Tensor {
    let spec = model.spec();
    let shape = [1, spec.input_channels, spec.input_size, spec.input_size];
    let picked: Vec<Tensor> = (0..)
        .map(|seed| uniform(&shape, seed, 0.0, 1.0))
        .filter(|x| kink_margin(model, x) >= KINK_MARGIN)
        .take(n)
        .collect();
    let data: Vec<f64> = picked.iter().flat_map(|x| x.data().iter().copied()).collect();
    Tensor::new(vec![n, shape[1], shape[2], shape[3]], data).unwrap()
}

pub fn model_loss(model: &Model, images: &Tensor, labels: &[usize]) -> f64 {
    softmax_cross_entropy(&model.logits(images).unwrap(), labels).unwrap()
}

/// Max relative error of the cross-entropy loss gradient over trainable
/// parameter entries, the ReLU kink margin at the base point and the
/// largest analytic gradient checked. With `per_param`, only that many
/// evenly spaced entries of each parameter are checked.
pub fn model_gradcheck(
    model: &Model,
    train: &TrainabilityConfig,
    images: &Tensor,
    labels: &[usize],
    per_param: Option<usize>,
) -> (f64, f64, f64) {
    let mut tape = Tape::new();
    let (logits, bound) = model.forward(&mut tape, images, train).unwrap();
    let loss = tape.softmax_cross_entropy(logits, labels).unwrap();
    tape.backward(loss).unwrap();
    let margin = tape.kink_margin();
    let grads = model.gradients(&tape, &bound);

    let mut m = model.clone();
    let mut worst = 0.0f64;
    let mut largest = 0.0f64;
    for (p, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let picks: Vec<usize> = match per_param {
            Some(k) if k < g.len() => (0..k).map(|i| i * g.len() / k).collect(),
            _ => (0..g.len()).collect(),
        };
        for j in picks {
            let orig = m.params()[p].value.data()[j];
            m.params_mut()[p].value.data_mut()[j] = orig + FD_EPS;
            let up = model_loss(&m, images, labels);
            m.params_mut()[p].value.data_mut()[j] = orig - FD_EPS;
            let down = model_loss(&m, images, labels);
            m.params_mut()[p].value.data_mut()[j] = orig;
            worst = worst.max(rel_err(g[j], (up - down) / (2.0 * FD_EPS)));
            largest = largest.max(g[j].abs());
        }
    }
    (worst, margin, largest)
}

/// FLOPs one training step actually executes, per the tape counter.
pub fn executed_step(model: &Model, train: &TrainabilityConfig, batch: usize, seed: u64) -> (ExecutedFlops, Vec<(String, ExecutedFlops)>) {
    let spec = model.spec();
    let x = uniform(&[batch, spec.input_channels, spec.input_size, spec.input_size], seed, 0.0, 1.0);
    let y = labels(batch, model.head_classes(), seed);
    let mut tape = Tape::new();
    let (logits, _) = model.forward(&mut tape, &x, train).unwrap();
    let loss = tape.softmax_cross_entropy(logits, &y).unwrap();
    if train.groups().any(|(g, _)| train.is_trainable(g)) {
        tape.backward(loss).unwrap();
    }
    (tape.total_flops(), tape.layer_flops())
}

/// Six-nested-loop convolution that counts one FLOP per multiply and one
/// per add, padded taps included.
pub fn naive_conv(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> (Tensor, u64) {
    let [n, c_in, h, w] = input.shape().try_into().unwrap();
    let [c_out, _, k, _] = weight.shape().try_into().unwrap();
    let h_out = (h + 2 * pad - k) / stride + 1;
    let w_out = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * c_out * h_out * w_out];
    let mut count = 0u64;
    let x = input.data();
    let wt = weight.data();
    for b in 0..n {
        for o in 0..c_out {
            for i in 0..h_out {
                for j in 0..w_out {
                    let mut acc = 0.0;
                    for c in 0..c_in {
                        for di in 0..k {
                            for dj in 0..k {
                                let r = (i * stride + di) as isize - pad as isize;
                                let s = (j * stride + dj) as isize - pad as isize;
                                let v = if r >= 0 && s >= 0 && (r as usize) < h && (s as usize) < w {
                                    x[((b * c_in + c) * h + r as usize) * w + s as usize]
                                } else {
                                    0.0
                                };
                                acc += v * wt[((o * c_in + c) * k + di) * k + dj];
                                count += 2;
                            }
                        }
                    }
                    out[((b * c_out + o) * h_out + i) * w_out + j] = acc;
                }
            }
        }
    }
    (Tensor::new(vec![n, c_out, h_out, w_out], out).unwrap(), count)
}

/// A model small enough for exhaustive finite differences.
pub fn tiny_spec() -> ModelSpec {
    ModelSpec::with_widths(1, 8, [2, 3, 4, 4], 3)
}

pub fn small_spec() -> ModelSpec {
    ModelSpec::with_widths(1, 16, [4, 8, 8, 16], 5)
}

fn full_grads(model: &Model, x: &Tensor, y: &[usize]) -> (Tensor, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let train = TrainabilityConfig::full(model);
    let (logits, bound) = model.forward(&mut tape, x, &train).unwrap();
    let out = tape.value(logits).clone();
    let loss = tape.softmax_cross_entropy(logits, y).unwrap();
    tape.backward(loss).unwrap();
    let grads = model.gradients(&tape, &bound).into_iter().map(|g| g.unwrap()).collect();
    (out, grads)
}

/// Largest absolute difference between a compacted model and its masked
/// reference over logits and every parameter gradient. Masked gradients
/// are gathered onto the compacted layout before comparing.
pub fn masked_compact_gap(masked: &Model, compact: &Model, keep_sets: &[KeepSet], x: &Tensor, y: &[usize]) -> f64 {
    let (lm, gm) = full_grads(masked, x, y);
    let (lc, gc) = full_grads(compact, x, y);
    let mut gap = lm.max_abs_diff(&lc);
    let channel_keep = |layer: &str| {
        keep_sets
            .iter()
            .find(|k| k.layer == layer && k.granularity == Granularity::Channel)
            .map(|k| k.kept.clone())
    };
    for ((pm, pc), (g_m, g_c)) in masked.params().iter().zip(compact.params()).zip(gm.iter().zip(&gc)) {
        assert_eq!(pm.name, pc.name);
        let layer = pm.name.trim_end_matches(".weight");
        let g_m = Tensor::new(pm.value.shape().to_vec(), g_m.clone()).unwrap();
        let mapped = match compact.conv(layer).and_then(|c| c.layout.as_ref()) {
            Some(layout) => gather_filters(&g_m, layout),
            None => match (layer.strip_suffix(".conv1"), layer.strip_suffix(".conv2")) {
                (Some(_), _) => match channel_keep(layer) {
                    Some(keep) => gather_out_channels(&g_m, &keep),
                    None => g_m,
                },
                (_, Some(block)) => match channel_keep(&format!("{block}.conv1")) {
                    Some(keep) => gather_in_channels(&g_m, &keep),
                    None => g_m,
                },
                _ => g_m,
            },
        };
        assert_eq!(mapped.numel(), g_c.len(), "{}", pm.name);
        gap = mapped.data().iter().zip(g_c).fold(gap, |m, (a, b)| m.max((a - b).abs()));
    }
    gap
}

/// Executed training-step FLOPs of a chain: a single-channel input conv to
/// `channels`, then `depth` identical `channels -> channels` 3x3 convs with
/// ReLU, global average pooling and a linear head. Channel pruning at
/// `rate` removes `floor(rate * channels)` channels from every hidden
/// representation.
pub fn chain_step_flops(depth: usize, channels: usize, rate: f64, size: usize) -> u64 {
    let c = channels - pruned_count(rate, channels);
    let mut tape = Tape::new();
    let x = tape.leaf(uniform(&[1, 1, size, size], 1, 0.0, 1.0), false);
    let w = tape.leaf(uniform(&[c, 1, 3, 3], 2, -0.5, 0.5), true);
    let mut h = tape.conv2d(x, w, None, ConvGeometry::new(1, c, 3, 1, 1)).unwrap();
    tape.label(h, "input.conv");
    for d in 0..depth {
        let a = tape.relu(h);
        tape.label(a, format!("relu{d}"));
        let w = tape.leaf(uniform(&[c, c, 3, 3], 3 + d as u64, -0.5, 0.5), true);
        h = tape.conv2d(a, w, None, ConvGeometry::new(c, c, 3, 1, 1)).unwrap();
        tape.label(h, format!("conv{d}"));
    }
    let p = tape.global_avg_pool(h).unwrap();
    tape.label(p, "pool");
    let wh = tape.leaf(uniform(&[4, c], 100, -0.5, 0.5), true);
    let logits = tape.linear(p, wh, None).unwrap();
    tape.label(logits, "head");
    let loss = tape.softmax_cross_entropy(logits, &[1]).unwrap();
    tape.backward(loss).unwrap();
    tape.total_flops().total()
}

/// Model and trainability pairs spanning dense training, every pruning
/// granularity and every surgery baseline.
pub fn flop_configs(base: &Model) -> Vec<(String, Model, TrainabilityConfig)> {
    let mut out = vec![
        ("dense".to_string(), base.clone(), TrainabilityConfig::full(base)),
        ("frozen".to_string(), base.clone(), TrainabilityConfig::frozen(base)),
    ];
    for x in 0..=4 {
        out.push((format!("ft_block_{x}to3"), base.clone(), freeze_blocks(base, x).unwrap()));
    }
    for k in 1..=4 {
        let (m, t) = truncate_blocks(base, k, 3, 7).unwrap();
        out.push((format!("block_0to{k}_ft_all"), m, t));
    }
    let (m, t) = attach_adapters(base).unwrap();
    out.push(("adp1x1".into(), m, t));
    for g in [Granularity::Weight, Granularity::Filter, Granularity::Channel] {
        let r = prune(base, &PruningPlan::new(g, Signal::Magnitude, 0.5)).unwrap();
        let m = r.compacted_model.unwrap_or(r.masked_model);
        out.push((format!("{}_0.5", g.as_str()), m.clone(), TrainabilityConfig::full(&m)));
        if g == Granularity::Filter {
            let t = freeze_blocks(&m, 2).unwrap();
            out.push(("filter_0.5_ft_block_2to3".into(), m, t));
        }
    }
    out
}

/// Compares the static report with the tape counter, per layer and in
/// total. Returns (static, executed) step totals.
pub fn static_vs_executed(model: &Model, train: &TrainabilityConfig, batch: usize) -> (u64, u64) {
    let report = flop_report(model, train).unwrap();
    let (total, layers) = executed_step(model, train, batch, 3);
    for e in &report.entries {
        let ex = layers.iter().find(|(id, _)| *id == e.layer).map(|(_, f)| *f).unwrap_or_default();
        let b = batch as u64;
        assert_eq!(
            (e.forward * b, e.backward_input * b, e.backward_weight * b),
            (ex.forward, ex.backward_input, ex.backward_weight),
            "layer {}",
            e.layer
        );
    }
    assert_eq!(layers.len(), report.entries.len());
    (training_step_flops(model, train, batch).unwrap(), total.total())
}

//! Static FLOP accounting for one training step.
//!
//! Convention: a multiply-accumulate is two FLOPs (padded taps included);
//! ReLU, max pool and add cost one FLOP per output element; global average
//! pooling costs one per input element; a bias add costs one per output
//! element. The backward pass splits into an input-gradient half and a
//! weight-gradient half, each priced like the forward pass: the weight half
//! is charged only for trainable layers, and the input half only when some
//! trainable parameter feeds the layer's input. Optimizer updates and the
//! loss are not counted.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Model, ParamGroup, TrainabilityConfig};
use crate::ops::ConvGeometry;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        geometry: ConvGeometry,
        h_out: usize,
        w_out: usize,
        /// Surviving `(out, in)` filter pairs.
        filters: usize,
        bias: bool,
    },
    Linear {
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    },
    Relu {
        elements: usize,
    },
    MaxPool {
        outputs: usize,
    },
    GlobalAvgPool {
        inputs: usize,
    },
    Add {
        elements: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Input,
    Layer(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerDesc {
    pub id: String,
    pub kind: LayerKind,
    pub inputs: Vec<Source>,
    pub group: Option<ParamGroup>,
}

fn mac_flops(kind: &LayerKind) -> u64 {
    match *kind {
        LayerKind::Conv {
            geometry,
            h_out,
            w_out,
            filters,
            ..
        } => 2 * (h_out * w_out * filters * geometry.kernel * geometry.kernel) as u64,
        LayerKind::Linear { fan_in, fan_out, .. } => 2 * (fan_in * fan_out) as u64,
        _ => 0,
    }
}

fn bias_flops(kind: &LayerKind) -> u64 {
    match *kind {
        LayerKind::Conv {
            geometry,
            h_out,
            w_out,
            bias: true,
            ..
        } => (h_out * w_out * geometry.out_channels) as u64,
        LayerKind::Linear {
            fan_out, bias: true, ..
        } => fan_out as u64,
        _ => 0,
    }
}

pub fn forward_flops(kind: &LayerKind) -> u64 {
    match *kind {
        LayerKind::Conv { .. } | LayerKind::Linear { .. } => mac_flops(kind) + bias_flops(kind),
        LayerKind::Relu { elements } | LayerKind::Add { elements } => elements as u64,
        LayerKind::MaxPool { outputs } => outputs as u64,
        LayerKind::GlobalAvgPool { inputs } => inputs as u64,
    }
}

/// `(input_grad_flops, weight_grad_flops)` for one example.
pub fn backward_flops(kind: &LayerKind, input_needs_grad: bool, trainable: bool) -> (u64, u64) {
    let parametric = matches!(kind, LayerKind::Conv { .. } | LayerKind::Linear { .. });
    let input = match (input_needs_grad, parametric) {
        (false, _) => 0,
        // the bias term has no input-gradient counterpart
        (true, true) => mac_flops(kind),
        (true, false) => forward_flops(kind),
    };
    let weight = if parametric && trainable { forward_flops(kind) } else { 0 };
    (input, weight)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFlops {
    pub layer: String,
    pub forward: u64,
    pub backward_input: u64,
    pub backward_weight: u64,
}

impl LayerFlops {
    pub fn total(&self) -> u64 {
        self.forward + self.backward_input + self.backward_weight
    }
}

/// Per-layer costs of one training step on a single example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlopReport {
    pub entries: Vec<LayerFlops>,
    pub totals: LayerFlops,
    /// forward + backward totals.
    pub flops_per_example: u64,
}

impl FlopReport {
    pub fn entry(&self, layer: &str) -> Option<&LayerFlops> {
        self.entries.iter().find(|e| e.layer == layer)
    }

    /// Sum of `total()` over layers whose id satisfies `pred`.
    pub fn sum_where(&self, pred: impl Fn(&str) -> bool) -> u64 {
        self.entries.iter().filter(|e| pred(&e.layer)).map(LayerFlops::total).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,forward,backward_input,backward_weight\n");
        for e in self.entries.iter().chain(std::iter::once(&self.totals)) {
            let _ = writeln!(out, "{},{},{},{}", e.layer, e.forward, e.backward_input, e.backward_weight);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self
            .entries
            .iter()
            .map(|e| e.layer.len())
            .max()
            .unwrap_or(5)
            .max("layer".len());
        let mut out = format!(
            "{:<width$}  {:>14}  {:>14}  {:>14}\n",
            "layer", "forward", "backward_input", "backward_weight"
        );
        for e in self.entries.iter().chain(std::iter::once(&self.totals)) {
            let _ = writeln!(
                out,
                "{:<width$}  {:>14}  {:>14}  {:>14}",
                e.layer, e.forward, e.backward_input, e.backward_weight
            );
        }
        let _ = writeln!(out, "flops per example: {}", self.flops_per_example);
        out
    }
}

/// Builds the report from a layer graph and a trainability predicate.
pub fn report_for_layers(layers: &[LayerDesc], trainable: impl Fn(ParamGroup) -> bool) -> FlopReport {
    // carries[i]: some trainable parameter feeds layer i's output
    let mut carries = vec![false; layers.len()];
    let mut entries = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let input_needs = layer.inputs.iter().any(|s| match s {
            Source::Input => false,
            Source::Layer(j) => carries[*j],
        });
        let is_trainable = layer.group.is_some_and(&trainable);
        carries[i] = input_needs || is_trainable;
        let (bi, bw) = backward_flops(&layer.kind, input_needs, is_trainable);
        entries.push(LayerFlops {
            layer: layer.id.clone(),
            forward: forward_flops(&layer.kind),
            backward_input: bi,
            backward_weight: bw,
        });
    }
    let totals = LayerFlops {
        layer: "total".into(),
        forward: entries.iter().map(|e| e.forward).sum(),
        backward_input: entries.iter().map(|e| e.backward_input).sum(),
        backward_weight: entries.iter().map(|e| e.backward_weight).sum(),
    };
    let flops_per_example = totals.total();
    FlopReport {
        entries,
        totals,
        flops_per_example,
    }
}

pub fn flop_report(model: &Model, train: &TrainabilityConfig) -> Result<FlopReport> {
    train.validate_for(model)?;
    Ok(report_for_layers(&model.layers(), |g| train.is_trainable(g)))
}

pub fn training_step_flops(model: &Model, train: &TrainabilityConfig, batch_size: usize) -> Result<u64> {
    Ok(batch_size as u64 * flop_report(model, train)?.flops_per_example)
}

/// Forward-only cost of one example (evaluation).
pub fn inference_flops(model: &Model) -> u64 {
    model.layers().iter().map(|l| forward_flops(&l.kind)).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Weight,
    Filter,
    Channel,
}

impl Granularity {
    pub fn as_str(&self) -> &'static str {
        match self {
            Granularity::Weight => "weight",
            Granularity::Filter => "filter",
            Granularity::Channel => "channel",
        }
    }
}

/// Idealised relation between a per-layer structural rate and FLOPs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsityMapping {
    pub granularity: Granularity,
    pub structural_rate: f64,
    pub flop_fraction_removed: f64,
}

impl SparsityMapping {
    pub fn new(granularity: Granularity, structural_rate: f64) -> Self {
        Self {
            granularity,
            structural_rate,
            flop_fraction_removed: sparsity_to_flop_fraction(granularity, structural_rate),
        }
    }

    pub fn flop_fraction_kept(&self) -> f64 {
        1.0 - self.flop_fraction_removed
    }
}

/// Fraction of FLOPs removed by pruning each layer at rate `p`. Weight masks
/// save nothing on dense hardware; filter pruning is linear; channel pruning
/// of an interior layer shrinks both its inputs and outputs.
pub fn sparsity_to_flop_fraction(granularity: Granularity, p: f64) -> f64 {
    match granularity {
        Granularity::Weight => 0.0,
        Granularity::Filter => p,
        Granularity::Channel => 1.0 - (1.0 - p) * (1.0 - p),
    }
}

/// Channel rate that removes fraction `x` of an interior layer's FLOPs.
pub fn required_channel_rate(x: f64) -> f64 {
    1.0 - (1.0 - x).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{attach_adapters, freeze_blocks, ModelSpec};

    fn toy() -> Model {
        Model::build(&ModelSpec::default(), 0).unwrap()
    }

    #[test]
    fn conv_formula() {
        let kind = LayerKind::Conv {
            geometry: ConvGeometry::new(3, 8, 3, 1, 1),
            h_out: 8,
            w_out: 8,
            filters: 24,
            bias: false,
        };
        assert_eq!(forward_flops(&kind), 27_648);
        let id = LayerKind::Conv {
            geometry: ConvGeometry::new(1, 1, 1, 1, 0),
            h_out: 1,
            w_out: 1,
            filters: 1,
            bias: false,
        };
        assert_eq!(forward_flops(&id), 2);
        assert_eq!(forward_flops(&LayerKind::Relu { elements: 100 }), 100);
    }

    #[test]
    fn trainable_layer_costs_twice_forward_backward() {
        let kind = LayerKind::Conv {
            geometry: ConvGeometry::new(4, 4, 3, 1, 1),
            h_out: 5,
            w_out: 5,
            filters: 16,
            bias: false,
        };
        let (bi, bw) = backward_flops(&kind, true, true);
        assert_eq!(bi + bw, 2 * forward_flops(&kind));
        assert_eq!(backward_flops(&kind, false, false), (0, 0));
    }

    #[test]
    fn sparsity_mappings() {
        assert_eq!(sparsity_to_flop_fraction(Granularity::Filter, 0.25), 0.25);
        assert_eq!(SparsityMapping::new(Granularity::Filter, 0.25).flop_fraction_kept(), 0.75);
        assert_eq!(sparsity_to_flop_fraction(Granularity::Channel, 0.5), 0.75);
        assert_eq!(sparsity_to_flop_fraction(Granularity::Weight, 0.9), 0.0);
        assert!((required_channel_rate(0.5) - 0.292_893_218_813_452_5).abs() < 1e-15);
        assert_eq!(required_channel_rate(0.0), 0.0);
        assert_eq!(required_channel_rate(0.75), 0.5);
    }

    #[test]
    fn freezing_prefix_removes_backward_cost() {
        let m = toy();
        let r = flop_report(&m, &freeze_blocks(&m, 2).unwrap()).unwrap();
        for id in ["stem.conv", "block0.conv1", "block1.conv2"] {
            let e = r.entry(id).unwrap();
            assert_eq!((e.backward_input, e.backward_weight), (0, 0), "{id}");
        }
        let first = r.entry("block2.conv1").unwrap();
        assert_eq!((first.backward_input, first.backward_weight), (0, first.forward));
        let later = r.entry("block2.conv2").unwrap();
        assert_eq!((later.backward_input, later.backward_weight), (later.forward, later.forward));
    }

    #[test]
    fn adapters_make_frozen_layers_pay_input_gradients() {
        let (m, cfg) = attach_adapters(&toy()).unwrap();
        let r = flop_report(&m, &cfg).unwrap();
        let e = r.entry("block2.conv1").unwrap();
        assert_eq!((e.backward_input, e.backward_weight), (e.forward, 0));
        let first = r.entry("block0.conv1").unwrap();
        assert_eq!((first.backward_input, first.backward_weight), (0, 0));
        let a0 = r.entry("block0.adapter").unwrap();
        assert_eq!((a0.backward_input, a0.backward_weight), (0, a0.forward));
    }

    #[test]
    fn step_cost_is_monotone_in_frozen_prefix() {
        let m = toy();
        let costs: Vec<u64> = (0..=4)
            .map(|x| training_step_flops(&m, &freeze_blocks(&m, x).unwrap(), 1).unwrap())
            .collect();
        assert!(costs.windows(2).all(|w| w[0] >= w[1]), "{costs:?}");
        assert_eq!(
            training_step_flops(&m, &freeze_blocks(&m, 0).unwrap(), 32).unwrap(),
            32 * costs[0]
        );
    }

    #[test]
    fn frozen_model_costs_forward_only() {
        let m = toy();
        let r = flop_report(&m, &TrainabilityConfig::frozen(&m)).unwrap();
        assert_eq!(r.flops_per_example, r.totals.forward);
        assert_eq!(r.totals.forward, inference_flops(&m));
    }

    #[test]
    fn csv_has_fixed_header() {
        let m = toy();
        let csv = flop_report(&m, &TrainabilityConfig::full(&m)).unwrap().to_csv();
        assert!(csv.starts_with("layer,forward,backward_input,backward_weight\n"));
        assert!(csv.trim_end().lines().last().unwrap().starts_with("total,"));
    }
}

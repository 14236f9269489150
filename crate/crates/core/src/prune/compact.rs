//! Keep-sets and the two executable forms of a pruned model: a dense model
//! with pruned entries zeroed and masked, and a physically smaller one.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::Granularity;
use crate::model::{ConvLayer, Model};
use crate::ops::FilterLayout;
use crate::tensor::Tensor;

/// Surviving items of one layer. Indices are flat: a weight index, a filter
/// index `out * in_channels + in`, or an output channel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeepSet {
    pub layer: String,
    pub granularity: Granularity,
    /// Number of items before pruning.
    pub total: usize,
    pub kept: Vec<usize>,
}

impl KeepSet {
    pub fn full(layer: &str, granularity: Granularity, total: usize) -> Self {
        Self {
            layer: layer.to_string(),
            granularity,
            total,
            kept: (0..total).collect(),
        }
    }

    pub fn is_full(&self) -> bool {
        self.kept.len() == self.total
    }

    /// Sorted, duplicate-free, in range and non-empty.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidKeepSet {
            layer: self.layer.clone(),
            reason,
        };
        if self.kept.is_empty() {
            return Err(bad("keeps nothing".into()));
        }
        if !self.kept.windows(2).all(|w| w[0] < w[1]) {
            return Err(bad("indices must be strictly increasing".into()));
        }
        if let Some(&last) = self.kept.last() {
            if last >= self.total {
                return Err(bad(format!("index {last} out of range for {} items", self.total)));
            }
        }
        Ok(())
    }
}

fn layer_mut<'a>(model: &'a mut Model, id: &str) -> Result<&'a mut ConvLayer> {
    model.convs_mut().find(|c| c.id == id).ok_or_else(|| Error::InvalidKeepSet {
        layer: id.to_string(),
        reason: "no such layer".into(),
    })
}

fn dense_weight<'a>(layer: &'a ConvLayer) -> Result<&'a Tensor> {
    if layer.layout.is_some() {
        return Err(Error::InvalidKeepSet {
            layer: layer.id.clone(),
            reason: "layer is already compacted".into(),
        });
    }
    Ok(&layer.weight.value)
}

fn expect_total(ks: &KeepSet, total: usize) -> Result<()> {
    if ks.total != total {
        return Err(Error::InvalidKeepSet {
            layer: ks.layer.clone(),
            reason: format!("keep-set covers {} items, layer has {total}", ks.total),
        });
    }
    Ok(())
}

/// 0/1 mask over a dense `[out, in, K, K]` weight.
fn weight_mask(ks: &KeepSet, shape: &[usize]) -> Result<Vec<f64>> {
    let (o, i, k2) = (shape[0], shape[1], shape[2] * shape[3]);
    let numel = o * i * k2;
    let mut mask = vec![0.0; numel];
    match ks.granularity {
        Granularity::Weight => {
            expect_total(ks, numel)?;
            ks.kept.iter().for_each(|&j| mask[j] = 1.0);
        }
        Granularity::Filter => {
            expect_total(ks, o * i)?;
            for &f in &ks.kept {
                mask[f * k2..(f + 1) * k2].iter_mut().for_each(|m| *m = 1.0);
            }
        }
        Granularity::Channel => {
            expect_total(ks, o)?;
            for &c in &ks.kept {
                mask[c * i * k2..(c + 1) * i * k2].iter_mut().for_each(|m| *m = 1.0);
            }
        }
    }
    Ok(mask)
}

/// Dense reference form: pruned entries zeroed and masked so finetuning
/// keeps them at zero. For channel keep-sets the consuming `conv2` input
/// slices are masked too.
pub fn mask_model(model: &Model, keep_sets: &[KeepSet]) -> Result<Model> {
    let mut out = model.clone();
    for ks in keep_sets {
        ks.validate()?;
        if ks.is_full() {
            continue;
        }
        let consumer = match ks.granularity {
            Granularity::Channel => Some(consumer_of(&ks.layer)?),
            _ => None,
        };
        let layer = layer_mut(&mut out, &ks.layer)?;
        let mask = weight_mask(ks, dense_weight(layer)?.shape())?;
        apply_mask(&mut layer.weight, mask);
        if let Some(consumer) = consumer {
            let layer = layer_mut(&mut out, &consumer)?;
            let s = dense_weight(layer)?.shape().to_vec();
            let k2 = s[2] * s[3];
            let mut mask = vec![0.0; layer.weight.value.numel()];
            for o in 0..s[0] {
                for &c in &ks.kept {
                    let base = (o * s[1] + c) * k2;
                    mask[base..base + k2].iter_mut().for_each(|m| *m = 1.0);
                }
            }
            apply_mask(&mut layer.weight, mask);
        }
    }
    Ok(out)
}

fn apply_mask(param: &mut crate::model::Param, mask: Vec<f64>) {
    let merged = match param.mask.take() {
        Some(old) => old.iter().zip(&mask).map(|(a, b)| a * b).collect(),
        None => mask,
    };
    param.value.data_mut().iter_mut().zip(&merged).for_each(|(w, m)| *w *= m);
    param.mask = Some(merged);
}

/// `block{b}.conv1` feeds `block{b}.conv2`; no other layer's channels may
/// be removed.
fn consumer_of(layer: &str) -> Result<String> {
    layer
        .strip_suffix(".conv1")
        .filter(|b| b.starts_with("block"))
        .map(|b| format!("{b}.conv2"))
        .ok_or_else(|| Error::InvalidKeepSet {
            layer: layer.to_string(),
            reason: "only block-internal channels (conv1 outputs) can be removed".into(),
        })
}

fn block_index(layer: &str) -> Option<usize> {
    layer.strip_prefix("block")?.split('.').next()?.parse().ok()
}

/// Rows `keep` of a `[out, ...]` tensor.
pub fn gather_out_channels(w: &Tensor, keep: &[usize]) -> Tensor {
    let row = w.numel() / w.shape()[0];
    let mut shape = w.shape().to_vec();
    shape[0] = keep.len();
    let data = keep.iter().flat_map(|&o| w.data()[o * row..(o + 1) * row].iter().copied()).collect();
    Tensor::new(shape, data).expect("gathered shape matches data")
}

/// Input slices `keep` of a `[out, in, K, K]` tensor.
pub fn gather_in_channels(w: &Tensor, keep: &[usize]) -> Tensor {
    let s = w.shape();
    let k2 = s[2] * s[3];
    let mut data = Vec::with_capacity(s[0] * keep.len() * k2);
    for o in 0..s[0] {
        for &i in keep {
            let base = (o * s[1] + i) * k2;
            data.extend_from_slice(&w.data()[base..base + k2]);
        }
    }
    Tensor::new(vec![s[0], keep.len(), s[2], s[3]], data).expect("gathered shape matches data")
}

/// Kernels listed by `layout`, stacked `[pairs, K, K]` in layout order.
pub fn gather_filters(w: &Tensor, layout: &FilterLayout) -> Tensor {
    let s = w.shape();
    let k2 = s[2] * s[3];
    let mut data = Vec::with_capacity(layout.pairs() * k2);
    for (o, i) in layout.pair_list() {
        let base = (o * s[1] + i) * k2;
        data.extend_from_slice(&w.data()[base..base + k2]);
    }
    Tensor::new(vec![layout.pairs(), s[2], s[3]], data).expect("gathered shape matches data")
}

/// Physically removes the pruned mid channels of each listed block: `conv1`
/// keeps only the surviving output channels and `conv2` gathers the matching
/// input slices. Block input and output widths are untouched.
pub fn compact_channels(model: &Model, keep_sets: &[KeepSet]) -> Result<Model> {
    let mut out = model.clone();
    let mut changed = false;
    for ks in keep_sets {
        ks.validate()?;
        if ks.granularity != Granularity::Channel {
            return Err(Error::InvalidKeepSet {
                layer: ks.layer.clone(),
                reason: format!("expected a channel keep-set, got {}", ks.granularity.as_str()),
            });
        }
        let consumer = consumer_of(&ks.layer)?;
        let b = block_index(&ks.layer).expect("conv1 ids carry a block index");
        let producer = layer_mut(&mut out, &ks.layer)?;
        expect_total(ks, producer.geometry.out_channels)?;
        if ks.is_full() {
            continue;
        }
        let w = gather_out_channels(dense_weight(producer)?, &ks.kept);
        producer.weight.mask = producer.weight.mask.take().map(|m| {
            let t = Tensor::new(producer.weight.value.shape().to_vec(), m).expect("mask matches weight");
            gather_out_channels(&t, &ks.kept).into_data()
        });
        producer.weight.value = w;
        producer.geometry.out_channels = ks.kept.len();
        let consumer = layer_mut(&mut out, &consumer)?;
        let w = gather_in_channels(dense_weight(consumer)?, &ks.kept);
        consumer.weight.mask = consumer.weight.mask.take().map(|m| {
            let t = Tensor::new(consumer.weight.value.shape().to_vec(), m).expect("mask matches weight");
            gather_in_channels(&t, &ks.kept).into_data()
        });
        consumer.weight.value = w;
        consumer.geometry.in_channels = ks.kept.len();
        out.arch.model.blocks[b].mid_channels = ks.kept.len();
        changed = true;
    }
    out.arch.pruned |= changed;
    Ok(out)
}

/// Stores each listed layer as per-output lists of `(input, kernel)` pairs;
/// the forward pass gathers the referenced inputs. Full keep-sets leave the
/// layer dense.
pub fn compact_filters(model: &Model, keep_sets: &[KeepSet]) -> Result<Model> {
    let mut out = model.clone();
    let mut changed = false;
    for ks in keep_sets {
        ks.validate()?;
        if ks.granularity != Granularity::Filter {
            return Err(Error::InvalidKeepSet {
                layer: ks.layer.clone(),
                reason: format!("expected a filter keep-set, got {}", ks.granularity.as_str()),
            });
        }
        let layer = layer_mut(&mut out, &ks.layer)?;
        let (o, i) = (layer.geometry.out_channels, layer.geometry.in_channels);
        expect_total(ks, o * i)?;
        if ks.is_full() {
            continue;
        }
        let mut inputs = vec![Vec::new(); o];
        for &f in &ks.kept {
            inputs[f / i].push(f % i);
        }
        if let Some(empty) = inputs.iter().position(Vec::is_empty) {
            return Err(Error::InvalidKeepSet {
                layer: ks.layer.clone(),
                reason: format!("output channel {empty} keeps no filter"),
            });
        }
        let layout = FilterLayout::new(o, i, inputs)?;
        let w = gather_filters(dense_weight(layer)?, &layout);
        layer.weight.mask = layer.weight.mask.take().map(|m| {
            let t = Tensor::new(layer.weight.value.shape().to_vec(), m).expect("mask matches weight");
            gather_filters(&t, &layout).into_data()
        });
        layer.weight.value = w;
        layer.layout = Some(Arc::new(layout));
        changed = true;
    }
    out.arch.pruned |= changed;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelSpec;

    fn model() -> Model {
        Model::build(&ModelSpec::default(), 2).unwrap()
    }

    fn input(n: usize) -> Tensor {
        Tensor::from_fn(&[n, 1, 32, 32], |i| ((i * 7919) % 1000) as f64 / 1000.0)
    }

    #[test]
    fn keep_set_validation() {
        let mut ks = KeepSet::full("block0.conv1", Granularity::Channel, 4);
        assert!(ks.validate().is_ok());
        ks.kept = vec![1, 1];
        assert!(ks.validate().is_err());
        ks.kept = vec![4];
        assert!(ks.validate().is_err());
        ks.kept = vec![];
        assert!(ks.validate().is_err());
    }

    #[test]
    fn full_keep_sets_change_nothing() {
        let m = model();
        let ch = [KeepSet::full("block1.conv1", Granularity::Channel, 16)];
        assert_eq!(compact_channels(&m, &ch).unwrap(), m);
        let f = [KeepSet::full("block1.conv2", Granularity::Filter, 16 * 16)];
        assert_eq!(compact_filters(&m, &f).unwrap(), m);
        assert_eq!(mask_model(&m, &f).unwrap(), m);
    }

    #[test]
    fn channel_compaction_matches_masking() {
        let m = model();
        let ks = [
            KeepSet { layer: "block1.conv1".into(), granularity: Granularity::Channel, total: 16, kept: vec![0, 3, 4, 9, 10, 11, 14, 15] },
            KeepSet { layer: "block3.conv1".into(), granularity: Granularity::Channel, total: 64, kept: (0..64).step_by(3).collect() },
        ];
        let compact = compact_channels(&m, &ks).unwrap();
        assert_eq!(compact.conv("block1.conv1").unwrap().geometry.out_channels, 8);
        assert_eq!(compact.conv("block1.conv2").unwrap().geometry.in_channels, 8);
        assert_eq!(compact.spec().blocks[1].mid_channels, 8);
        let masked = mask_model(&m, &ks).unwrap();
        let x = input(2);
        let d = compact.logits(&x).unwrap().max_abs_diff(&masked.logits(&x).unwrap());
        assert!(d <= 1e-12, "{d}");
    }

    #[test]
    fn boundary_channels_rejected() {
        let m = model();
        for layer in ["block1.conv2", "stem.conv", "block2.proj"] {
            let ks = [KeepSet { layer: layer.into(), granularity: Granularity::Channel, total: 8, kept: vec![0] }];
            assert!(matches!(compact_channels(&m, &ks), Err(Error::InvalidKeepSet { .. })), "{layer}");
        }
    }

    #[test]
    fn filter_compaction_matches_masking() {
        let m = model();
        let kept: Vec<usize> = (0..16 * 32).filter(|f| f % 3 != 1).collect();
        let ks = [KeepSet { layer: "block2.conv1".into(), granularity: Granularity::Filter, total: 16 * 32, kept }];
        let compact = compact_filters(&m, &ks).unwrap();
        let masked = mask_model(&m, &ks).unwrap();
        let x = input(2);
        let d = compact.logits(&x).unwrap().max_abs_diff(&masked.logits(&x).unwrap());
        assert!(d <= 1e-12, "{d}");
        assert!(compact.is_pruned());
    }

    #[test]
    fn empty_output_channel_rejected() {
        let m = model();
        // output 0 of block0.conv1 (8 inputs) keeps nothing
        let ks = [KeepSet { layer: "block0.conv1".into(), granularity: Granularity::Filter, total: 64, kept: (8..64).collect() }];
        assert!(matches!(compact_filters(&m, &ks), Err(Error::InvalidKeepSet { .. })));
    }
}

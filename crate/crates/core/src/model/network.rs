use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::flops::{LayerDesc, LayerKind, Source};
use crate::model::spec::{ModelSpec, NUM_BLOCKS};
use crate::model::trainability::{ParamGroup, TrainabilityConfig};
use crate::ops::{ConvGeometry, FilterLayout};
use crate::rng::{self, name_hash};
use crate::tensor::Tensor;

/// Everything needed to rebuild a model skeleton: the (possibly
/// channel-compacted) spec plus the surgery applied to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub model: ModelSpec,
    /// Number of leading blocks kept (4 unless truncated).
    pub depth: usize,
    pub adapters: bool,
    pub pruned: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    /// 0/1 mask for weight-masked layers; gradients are masked with it so
    /// pruned weights stay at zero during finetuning.
    pub mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub id: String,
    pub geometry: ConvGeometry,
    /// Present for filter-compacted layers; `weight` is then `[pairs, K, K]`.
    pub layout: Option<Arc<FilterLayout>>,
    pub weight: Param,
}

impl ConvLayer {
    fn new(id: String, group: ParamGroup, geometry: ConvGeometry, value: Tensor) -> Self {
        Self {
            weight: Param {
                name: format!("{id}.weight"),
                group,
                value,
                mask: None,
            },
            id,
            geometry,
            layout: None,
        }
    }

    /// Surviving `(out, in)` filter count.
    pub fn filters(&self) -> usize {
        self.layout.as_ref().map_or(
            self.geometry.out_channels * self.geometry.in_channels,
            |l| l.pairs(),
        )
    }

    fn record(&self, tape: &mut Tape, input: Var, trainable: bool) -> Result<(Var, Var)> {
        let w = tape.leaf(self.weight.value.clone(), trainable);
        let out = match &self.layout {
            Some(layout) => tape.filter_conv2d(input, w, layout.clone(), self.geometry)?,
            None => tape.conv2d(input, w, None, self.geometry)?,
        };
        tape.label(out, self.id.as_str());
        Ok((out, w))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub index: usize,
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub proj: Option<ConvLayer>,
    pub adapter: Option<ConvLayer>,
}

impl Block {
    pub fn convs(&self) -> impl Iterator<Item = &ConvLayer> {
        [Some(&self.conv1), Some(&self.conv2), self.proj.as_ref(), self.adapter.as_ref()]
            .into_iter()
            .flatten()
    }

    fn convs_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer> {
        [Some(&mut self.conv1), Some(&mut self.conv2), self.proj.as_mut(), self.adapter.as_mut()]
            .into_iter()
            .flatten()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub(crate) arch: Architecture,
    pub stem: ConvLayer,
    pub blocks: Vec<Block>,
    /// Linear classifier `[classes, width]`, no bias.
    pub head: Param,
}

/// Leaf variables for every parameter recorded by one forward pass, in
/// [`Model::params`] order.
#[derive(Debug, Clone)]
pub struct BoundParams(Vec<Var>);

pub(crate) fn he_uniform(shape: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = rng::rng(seed, &[name_hash(name)]);
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

pub(crate) fn head_init(classes: usize, width: usize, seed: u64) -> Tensor {
    let bound = (3.0 / width as f64).sqrt();
    let mut rng = rng::rng(seed, &[name_hash("head.weight")]);
    Tensor::from_fn(&[classes, width], |_| rng.gen_range(-bound..bound))
}

fn init_conv(id: String, group: ParamGroup, geometry: ConvGeometry, seed: u64) -> ConvLayer {
    let fan_in = geometry.in_channels * geometry.kernel * geometry.kernel;
    let name = format!("{id}.weight");
    let value = he_uniform(&geometry.weight_shape(), fan_in, seed, &name);
    ConvLayer::new(id, group, geometry, value)
}

pub(crate) fn adapter_layer(block: usize, channels: usize) -> ConvLayer {
    let geometry = ConvGeometry::new(channels, channels, 1, 1, 0);
    ConvLayer::new(
        format!("block{block}.adapter"),
        ParamGroup::Adapter(block),
        geometry,
        Tensor::zeros(&geometry.weight_shape()),
    )
}

impl Model {
    /// Fan-in scaled uniform initialisation, deterministic per seed. Each
    /// parameter draws from its own stream keyed by its name.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let stem = init_conv(
            "stem.conv".into(),
            ParamGroup::Stem,
            ConvGeometry::new(spec.input_channels, spec.blocks[0].in_channels, 3, 1, 1),
            seed,
        );
        let blocks = spec
            .blocks
            .iter()
            .enumerate()
            .map(|(b, bs)| {
                let stride = if bs.downsample { 2 } else { 1 };
                let group = ParamGroup::Block(b);
                Block {
                    index: b,
                    conv1: init_conv(
                        format!("block{b}.conv1"),
                        group,
                        ConvGeometry::new(bs.in_channels, bs.mid_channels, 3, stride, 1),
                        seed,
                    ),
                    conv2: init_conv(
                        format!("block{b}.conv2"),
                        group,
                        ConvGeometry::new(bs.mid_channels, bs.out_channels, 3, 1, 1),
                        seed,
                    ),
                    proj: bs.has_projection().then(|| {
                        init_conv(
                            format!("block{b}.proj"),
                            group,
                            ConvGeometry::new(bs.in_channels, bs.out_channels, 1, stride, 0),
                            seed,
                        )
                    }),
                    adapter: None,
                }
            })
            .collect();
        let width = spec.blocks[NUM_BLOCKS - 1].out_channels;
        Ok(Self {
            arch: Architecture {
                model: spec.clone(),
                depth: NUM_BLOCKS,
                adapters: false,
                pruned: false,
            },
            stem,
            blocks,
            head: Param {
                name: "head.weight".into(),
                group: ParamGroup::Head,
                value: head_init(spec.head_classes, width, seed),
                mask: None,
            },
        })
    }

    /// Zero-filled model with the structure `arch` describes; dense layers
    /// only (filter layouts are restored by the checkpoint reader).
    pub(crate) fn skeleton(arch: &Architecture) -> Result<Self> {
        if !(1..=NUM_BLOCKS).contains(&arch.depth) {
            return Err(Error::InvalidSpec(format!("depth {} outside 1..=4", arch.depth)));
        }
        let mut m = Self::build(&arch.model, 0)?;
        m.blocks.truncate(arch.depth);
        for p in m.params_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let width = m.blocks[arch.depth - 1].conv2.geometry.out_channels;
        m.head.value = Tensor::zeros(&[arch.model.head_classes, width]);
        if arch.adapters {
            for block in &mut m.blocks {
                block.adapter = Some(adapter_layer(block.index, block.conv2.geometry.out_channels));
            }
        }
        m.arch = arch.clone();
        Ok(m)
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.arch.model
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn head_classes(&self) -> usize {
        self.head.value.shape()[0]
    }

    pub fn feature_width(&self) -> usize {
        self.head.value.shape()[1]
    }

    pub fn has_adapters(&self) -> bool {
        self.arch.adapters
    }

    pub fn is_pruned(&self) -> bool {
        self.arch.pruned
    }

    pub fn convs(&self) -> impl Iterator<Item = &ConvLayer> {
        std::iter::once(&self.stem).chain(self.blocks.iter().flat_map(|b| b.convs()))
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = &mut ConvLayer> {
        std::iter::once(&mut self.stem).chain(self.blocks.iter_mut().flat_map(|b| b.convs_mut()))
    }

    pub fn conv(&self, id: &str) -> Option<&ConvLayer> {
        self.convs().find(|c| c.id == id)
    }

    pub fn params(&self) -> Vec<&Param> {
        self.convs().map(|c| &c.weight).chain(std::iter::once(&self.head)).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let Model { stem, blocks, head, .. } = self;
        std::iter::once(&mut stem.weight)
            .chain(blocks.iter_mut().flat_map(|b| b.convs_mut().map(|c| &mut c.weight)))
            .chain(std::iter::once(head))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.value.numel()).sum()
    }

    /// Records a forward pass. Leaves are marked trainable per `train`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        images: &Tensor,
        train: &TrainabilityConfig,
    ) -> Result<(Var, BoundParams)> {
        let spec = self.spec();
        let expect = [spec.input_channels, spec.input_size, spec.input_size];
        if images.rank() != 4 || images.shape()[1..] != expect {
            return Err(Error::shape(
                "model.forward",
                format!("images {:?}, model expects [N, {}, {}, {}]", images.shape(), expect[0], expect[1], expect[2]),
            ));
        }
        let mut bound = Vec::new();
        let x = tape.leaf(images.clone(), false);
        let (h, w) = self.stem.record(tape, x, train.is_trainable(ParamGroup::Stem))?;
        bound.push(w);
        let h = tape.relu(h);
        tape.label(h, "stem.relu");
        let mut h = tape.max_pool(h, 2, 2)?;
        tape.label(h, "stem.pool");
        for block in &self.blocks {
            let b = block.index;
            let trainable = train.is_trainable(ParamGroup::Block(b));
            let (a, w1) = block.conv1.record(tape, h, trainable)?;
            let a = tape.relu(a);
            tape.label(a, format!("block{b}.relu1"));
            let (a, w2) = block.conv2.record(tape, a, trainable)?;
            bound.extend([w1, w2]);
            let skip = match &block.proj {
                Some(proj) => {
                    let (s, wp) = proj.record(tape, h, trainable)?;
                    bound.push(wp);
                    s
                }
                None => h,
            };
            let sum = tape.add(a, skip)?;
            tape.label(sum, format!("block{b}.add"));
            h = tape.relu(sum);
            tape.label(h, format!("block{b}.relu2"));
            if let Some(adapter) = &block.adapter {
                let (t, wa) = adapter.record(tape, h, train.is_trainable(ParamGroup::Adapter(b)))?;
                bound.push(wa);
                h = tape.add(h, t)?;
                tape.label(h, format!("block{b}.adapter_add"));
            }
        }
        let pooled = tape.global_avg_pool(h)?;
        tape.label(pooled, "pool");
        let wh = tape.leaf(self.head.value.clone(), train.is_trainable(ParamGroup::Head));
        bound.push(wh);
        let logits = tape.linear(pooled, wh, None)?;
        tape.label(logits, "head");
        Ok((logits, BoundParams(bound)))
    }

    /// Parameter gradients after `tape.backward`, aligned with
    /// [`Model::params`]; masked entries are zeroed.
    pub fn gradients(&self, tape: &Tape, bound: &BoundParams) -> Vec<Option<Vec<f64>>> {
        self.params()
            .iter()
            .zip(&bound.0)
            .map(|(p, &v)| {
                tape.grad(v).map(|g| match &p.mask {
                    Some(m) => g.iter().zip(m).map(|(a, b)| a * b).collect(),
                    None => g.to_vec(),
                })
            })
            .collect()
    }

    /// Logits for a batch with nothing marked trainable.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let frozen = TrainabilityConfig::frozen(self);
        let (logits, _) = self.forward(&mut tape, images, &frozen)?;
        Ok(tape.value(logits).clone())
    }

    /// Static layer graph (batch of one) in execution order, with the same
    /// ids the forward pass uses as tape labels.
    pub fn layers(&self) -> Vec<LayerDesc> {
        let spec = self.spec();
        let sizes = spec.spatial_sizes();
        let mut layers: Vec<LayerDesc> = Vec::new();
        let push = |layers: &mut Vec<LayerDesc>, id: String, kind: LayerKind, inputs: Vec<Source>, group| {
            layers.push(LayerDesc {
                id,
                kind,
                inputs,
                group,
            });
            Source::Layer(layers.len() - 1)
        };
        let conv_kind = |c: &ConvLayer, out: usize| LayerKind::Conv {
            geometry: c.geometry,
            h_out: out,
            w_out: out,
            filters: c.filters(),
            bias: false,
        };
        let stem_out = spec.input_size;
        let stem_c = self.stem.geometry.out_channels;
        let s = push(&mut layers, self.stem.id.clone(), conv_kind(&self.stem, stem_out), vec![Source::Input], Some(ParamGroup::Stem));
        let s = push(&mut layers, "stem.relu".into(), LayerKind::Relu { elements: stem_c * stem_out * stem_out }, vec![s], None);
        let mut h = push(&mut layers, "stem.pool".into(), LayerKind::MaxPool { outputs: stem_c * sizes[0] * sizes[0] }, vec![s], None);
        for block in &self.blocks {
            let b = block.index;
            let group = Some(ParamGroup::Block(b));
            let out = sizes[b + 1];
            let mid = block.conv1.geometry.out_channels;
            let c_out = block.conv2.geometry.out_channels;
            let a = push(&mut layers, block.conv1.id.clone(), conv_kind(&block.conv1, out), vec![h], group);
            let a = push(&mut layers, format!("block{b}.relu1"), LayerKind::Relu { elements: mid * out * out }, vec![a], None);
            let a = push(&mut layers, block.conv2.id.clone(), conv_kind(&block.conv2, out), vec![a], group);
            let skip = match &block.proj {
                Some(p) => push(&mut layers, p.id.clone(), conv_kind(p, out), vec![h], group),
                None => h,
            };
            let elements = c_out * out * out;
            let sum = push(&mut layers, format!("block{b}.add"), LayerKind::Add { elements }, vec![a, skip], None);
            h = push(&mut layers, format!("block{b}.relu2"), LayerKind::Relu { elements }, vec![sum], None);
            if let Some(adapter) = &block.adapter {
                let t = push(&mut layers, adapter.id.clone(), conv_kind(adapter, out), vec![h], Some(ParamGroup::Adapter(b)));
                h = push(&mut layers, format!("block{b}.adapter_add"), LayerKind::Add { elements }, vec![h, t], None);
            }
        }
        let last = sizes[self.depth()];
        let width = self.feature_width();
        let p = push(&mut layers, "pool".into(), LayerKind::GlobalAvgPool { inputs: width * last * last }, vec![h], None);
        push(
            &mut layers,
            "head".into(),
            LayerKind::Linear {
                fan_in: width,
                fan_out: self.head_classes(),
                bias: false,
            },
            vec![p],
            Some(ParamGroup::Head),
        );
        layers
    }
}

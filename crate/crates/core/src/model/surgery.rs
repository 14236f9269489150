//! Architectural baselines: freeze a prefix of blocks, keep only a prefix of
//! blocks, or train residual 1x1 adapters on a frozen backbone.

use crate::error::{Error, Result};
use crate::model::network::{adapter_layer, head_init, Model};
use crate::model::spec::NUM_BLOCKS;
use crate::model::trainability::{ParamGroup, Trainability, TrainabilityConfig};

pub fn ft_block_name(first_trainable: usize) -> String {
    format!("ft_block_{first_trainable}to3")
}

pub fn truncate_name(keep: usize) -> String {
    format!("block_0to{keep}_ft_all")
}

pub const ADAPTER_NAME: &str = "adp1x1";

/// Blocks `< first_trainable` (and the stem, when block 0 is frozen) are
/// frozen; later blocks and the head train. `first_trainable == 4` is a
/// linear probe.
pub fn freeze_blocks(model: &Model, first_trainable: usize) -> Result<TrainabilityConfig> {
    if first_trainable > NUM_BLOCKS {
        return Err(Error::OutOfRange {
            what: "first_trainable_block",
            value: first_trainable.to_string(),
            allowed: "0..=4",
        });
    }
    Ok(TrainabilityConfig::with(model, &ft_block_name(first_trainable), |g| {
        let frozen = match g {
            ParamGroup::Stem => first_trainable > 0,
            ParamGroup::Block(b) | ParamGroup::Adapter(b) => b < first_trainable,
            ParamGroup::Head => false,
        };
        if frozen {
            Trainability::Frozen
        } else {
            Trainability::Trainable
        }
    }))
}

/// Keeps blocks `0..keep` with their pretrained weights and attaches a fresh
/// head on block `keep - 1`'s output width. Everything trains.
pub fn truncate_blocks(model: &Model, keep: usize, new_head_classes: usize, seed: u64) -> Result<(Model, TrainabilityConfig)> {
    if !(1..=NUM_BLOCKS).contains(&keep) {
        return Err(Error::OutOfRange {
            what: "keep_blocks",
            value: keep.to_string(),
            allowed: "1..=4",
        });
    }
    if keep > model.depth() {
        return Err(Error::InvalidSpec(format!(
            "cannot keep {keep} blocks of a {}-block model",
            model.depth()
        )));
    }
    check_classes(new_head_classes)?;
    let mut out = model.clone();
    out.blocks.truncate(keep);
    out.arch.depth = keep;
    out.arch.model.head_classes = new_head_classes;
    let width = out.blocks[keep - 1].conv2.geometry.out_channels;
    out.head.value = head_init(new_head_classes, width, seed);
    out.head.mask = None;
    let train = TrainabilityConfig::with(&out, &truncate_name(keep), |_| Trainability::Trainable);
    Ok((out, train))
}

/// Inserts `y = h + conv1x1(h)` after every block, zero-initialised so the
/// network's outputs are unchanged. The backbone is frozen; adapters and
/// the head train.
pub fn attach_adapters(model: &Model) -> Result<(Model, TrainabilityConfig)> {
    if model.is_pruned() {
        return Err(Error::InvalidSpec("adapters attach to unpruned models only".into()));
    }
    if model.has_adapters() {
        return Err(Error::InvalidSpec("model already has adapters".into()));
    }
    let mut out = model.clone();
    for block in &mut out.blocks {
        block.adapter = Some(adapter_layer(block.index, block.conv2.geometry.out_channels));
    }
    out.arch.adapters = true;
    let train = TrainabilityConfig::with(&out, ADAPTER_NAME, |g| match g {
        ParamGroup::Adapter(_) | ParamGroup::Head => Trainability::Trainable,
        _ => Trainability::Frozen,
    });
    Ok((out, train))
}

/// Fresh randomly initialised head of the requested width.
pub fn replace_head(model: &Model, classes: usize, seed: u64) -> Result<Model> {
    check_classes(classes)?;
    let mut out = model.clone();
    out.head.value = head_init(classes, model.feature_width(), seed);
    out.head.mask = None;
    out.arch.model.head_classes = classes;
    Ok(out)
}

fn check_classes(classes: usize) -> Result<()> {
    if classes < 2 {
        return Err(Error::OutOfRange {
            what: "head classes",
            value: classes.to_string(),
            allowed: ">= 2",
        });
    }
    Ok(())
}

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::network::Model;
use crate::model::spec::NUM_BLOCKS;

/// Parameters are frozen, trained or removed a group at a time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Stem,
    Block(usize),
    Adapter(usize),
    Head,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamGroup::Stem => write!(f, "stem"),
            ParamGroup::Block(b) => write!(f, "block{b}"),
            ParamGroup::Adapter(b) => write!(f, "adapter{b}"),
            ParamGroup::Head => write!(f, "head"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trainability {
    Trainable,
    Frozen,
    Absent,
}

/// Per-group flags plus the method name they encode (`ft_block_2to3`, ...).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainabilityConfig {
    pub name: String,
    flags: BTreeMap<ParamGroup, Trainability>,
}

fn all_groups() -> impl Iterator<Item = ParamGroup> {
    std::iter::once(ParamGroup::Stem)
        .chain((0..NUM_BLOCKS).map(ParamGroup::Block))
        .chain((0..NUM_BLOCKS).map(ParamGroup::Adapter))
        .chain(std::iter::once(ParamGroup::Head))
}

fn present(model: &Model, group: ParamGroup) -> bool {
    match group {
        ParamGroup::Stem | ParamGroup::Head => true,
        ParamGroup::Block(b) => b < model.depth(),
        ParamGroup::Adapter(b) => model.blocks.get(b).is_some_and(|bl| bl.adapter.is_some()),
    }
}

impl TrainabilityConfig {
    fn from_fn(model: &Model, name: &str, mut flag: impl FnMut(ParamGroup) -> Trainability) -> Self {
        let flags = all_groups()
            .map(|g| {
                let t = if present(model, g) { flag(g) } else { Trainability::Absent };
                (g, t)
            })
            .collect();
        Self {
            name: name.to_string(),
            flags,
        }
    }

    /// Every present group trainable.
    pub fn full(model: &Model) -> Self {
        Self::from_fn(model, "dense_finetune", |_| Trainability::Trainable)
    }

    /// Every present group frozen (inference).
    pub fn frozen(model: &Model) -> Self {
        Self::from_fn(model, "frozen", |_| Trainability::Frozen)
    }

    pub(crate) fn with(model: &Model, name: &str, flag: impl FnMut(ParamGroup) -> Trainability) -> Self {
        Self::from_fn(model, name, flag)
    }

    pub fn get(&self, group: ParamGroup) -> Trainability {
        self.flags.get(&group).copied().unwrap_or(Trainability::Absent)
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        self.get(group) == Trainability::Trainable
    }

    pub fn groups(&self) -> impl Iterator<Item = (ParamGroup, Trainability)> + '_ {
        self.flags.iter().map(|(g, t)| (*g, *t))
    }

    /// Flags must agree with the model's structure and the head is never absent.
    pub fn validate_for(&self, model: &Model) -> Result<()> {
        if self.get(ParamGroup::Head) == Trainability::Absent {
            return Err(Error::InvalidSpec("the head can never be absent".into()));
        }
        for g in all_groups() {
            let absent = self.get(g) == Trainability::Absent;
            if absent == present(model, g) {
                return Err(Error::InvalidSpec(format!(
                    "trainability `{}` marks {g} as {:?} but the model {} it",
                    self.name,
                    self.get(g),
                    if present(model, g) { "contains" } else { "lacks" }
                )));
            }
        }
        Ok(())
    }

    /// Number of scalar parameters this configuration trains on `model`.
    pub fn trainable_param_count(&self, model: &Model) -> usize {
        model
            .params()
            .iter()
            .filter(|p| self.is_trainable(p.group))
            .map(|p| p.value.numel())
            .sum()
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    /// Stride-2 first conv.
    pub downsample: bool,
}

impl BlockSpec {
    /// The skip path needs a 1x1 projection when the shape changes.
    pub fn has_projection(&self) -> bool {
        self.in_channels != self.out_channels || self.downsample
    }
}

/// Four labelled residual blocks between a conv stem and a linear head.
///
/// Stem: 3x3 conv to `blocks[0].in_channels`, ReLU, 2x2 max pool. Each
/// block: conv3x3 (stride 2 if downsampling) -> ReLU -> conv3x3 -> add skip
/// -> ReLU. Head: global average pool then a linear classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub input_channels: usize,
    pub input_size: usize,
    pub blocks: Vec<BlockSpec>,
    pub head_classes: usize,
}

pub const NUM_BLOCKS: usize = 4;

impl Default for ModelSpec {
    fn default() -> Self {
        Self::with_widths(1, 32, [8, 16, 32, 64], 10)
    }
}

impl ModelSpec {
    /// Block `b` maps `widths[b-1] -> widths[b]` (block 0 keeps `widths[0]`);
    /// blocks 1..3 downsample.
    pub fn with_widths(input_channels: usize, input_size: usize, widths: [usize; 4], head_classes: usize) -> Self {
        let blocks = (0..NUM_BLOCKS)
            .map(|b| BlockSpec {
                in_channels: if b == 0 { widths[0] } else { widths[b - 1] },
                mid_channels: widths[b],
                out_channels: widths[b],
                downsample: b > 0,
            })
            .collect();
        Self {
            input_channels,
            input_size,
            blocks,
            head_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != NUM_BLOCKS {
            return Err(Error::InvalidSpec(format!(
                "expected exactly {NUM_BLOCKS} blocks labelled 0..3, got {}",
                self.blocks.len()
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::InvalidSpec("input_channels must be positive".into()));
        }
        if self.input_size < 2 {
            return Err(Error::InvalidSpec(format!(
                "input_size {} too small for the 2x2 stem pool",
                self.input_size
            )));
        }
        if self.head_classes < 2 {
            return Err(Error::InvalidSpec(format!("head_classes {} < 2", self.head_classes)));
        }
        for (b, block) in self.blocks.iter().enumerate() {
            if block.in_channels == 0 || block.mid_channels == 0 || block.out_channels == 0 {
                return Err(Error::InvalidSpec(format!("block {b} has a zero channel count")));
            }
            if let Some(next) = self.blocks.get(b + 1) {
                if next.in_channels != block.out_channels {
                    return Err(Error::InvalidSpec(format!(
                        "block {b} outputs {} channels but block {} expects {}",
                        block.out_channels,
                        b + 1,
                        next.in_channels
                    )));
                }
            }
        }
        Ok(())
    }

    /// Spatial extent entering block 0, then after each block.
    pub fn spatial_sizes(&self) -> [usize; NUM_BLOCKS + 1] {
        let mut sizes = [0; NUM_BLOCKS + 1];
        sizes[0] = (self.input_size - 2) / 2 + 1;
        for (b, block) in self.blocks.iter().enumerate() {
            sizes[b + 1] = if block.downsample {
                (sizes[b] - 1) / 2 + 1
            } else {
                sizes[b]
            };
        }
        sizes
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model spec serialises")
    }
}

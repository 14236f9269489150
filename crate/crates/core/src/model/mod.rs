mod network;
mod spec;
pub mod surgery;
mod trainability;

pub use network::{Architecture, Block, BoundParams, ConvLayer, Model, Param};
pub use spec::{BlockSpec, ModelSpec, NUM_BLOCKS};
pub use surgery::{attach_adapters, freeze_blocks, replace_head, truncate_blocks};
pub use trainability::{ParamGroup, Trainability, TrainabilityConfig};

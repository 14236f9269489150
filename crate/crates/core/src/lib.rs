//! Zero-shot structured pruning of small pretrained residual CNNs under
//! explicit FLOP budgets, together with the freezing, truncation and adapter
//! baselines it is compared against, a deterministic synthetic task stream,
//! and a harness that turns training runs into accuracy-versus-compute
//! tradeoff curves.

pub mod autograd;
pub mod data;
pub mod error;
pub mod flops;
pub mod harness;
pub mod io;
pub mod model;
pub mod ops;
pub mod optim;
pub mod par;
pub mod prune;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

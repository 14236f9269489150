//! Layer kernels. Each forward and backward routine reports the FLOPs it ran
//! so the tape can keep an execution-side tally independent of the static
//! cost model.

pub mod conv;
pub(crate) mod dense;
mod loss;
mod pool;

pub use conv::{conv2d, ConvDims, ConvGeometry, ConvKernel, FilterLayout, WeightsRef};
pub use dense::{linear, linear_backward, linear_forward, relu, relu_backward, relu_forward, residual_add};
pub use loss::{softmax_cross_entropy, softmax_cross_entropy_parts};
pub use pool::{
    global_avg_pool, global_avg_pool_backward, global_avg_pool_forward, max_pool, max_pool_backward,
    max_pool_forward, PoolDims,
};

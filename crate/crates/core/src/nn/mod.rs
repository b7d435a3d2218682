//! Small dense-tensor toolkit with hand-written backward passes.
//!
//! Activations are row-major `[tokens, channels]` matrices; 3D token grids
//! use x-major ordering (see [`grid_index`]).

mod attention;
mod layers;
mod optim;
pub(crate) mod tensor;

pub use attention::{AttnCache, WindowAttention, WindowLayout};
pub use layers::{gelu, gelu_backward, grid_index, relu, relu_backward, DepthwiseConv3, LayerNorm, Linear, LnCache};
pub use optim::{AdamW, AdamWConfig};
pub use tensor::{add_scaled, copy_params, matmul, Parameterized, Real, Tensor};

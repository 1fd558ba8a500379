//! Standard CNN kernels shared by every layer type.

pub mod activation;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod pool;

pub use activation::{relu, relu_backward, Dropout};
pub use conv::{conv2d, conv2d_backward, conv2d_forward, ConvCache, ConvGeometry, ConvGrads};
pub use linear::{linear_backward, linear_forward, LinearGrads};
pub use loss::{softmax, softmax_cross_entropy};
pub use pool::{global_maxpool_forward, maxpool2, maxpool2_forward, pool_backward, PoolIndices};

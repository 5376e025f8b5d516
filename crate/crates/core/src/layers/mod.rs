//! Plain layers with analytic backward passes. Each forward returns an
//! explicit cache that its backward consumes.

pub mod activation;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod pool;

pub use activation::{relu_backward, relu_forward, ReluCache};
pub use conv::{conv_apply, conv_backward, conv_forward, ConvCache, ConvGeometry, ConvGrads};
pub use linear::{linear_backward, linear_forward, LinearCache, LinearGrads};
pub use loss::{argmax_rows, softmax_xent};
pub use pool::{
    global_avg_pool_backward, global_avg_pool_forward, maxpool_backward, maxpool_forward, GapCache, MaxPoolCache, PoolGeometry,
};

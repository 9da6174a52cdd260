//! Neural-network kernels: each forward has a matching backward over plain tensors.

pub mod activation;
pub mod adaptive;
pub mod conv;
pub mod deform;
pub mod norm;
pub mod pool;
pub mod unfold;
pub mod upsample;

pub use activation::{activate, sigmoid, softmax_channels, Activation, LEAKY_SLOPE};
pub use adaptive::{adaptive_conv_apply, AdaptiveGeometry};
pub use conv::{conv2d, ConvSpec};
pub use deform::{deform_conv2d, DeformSpec};
pub use norm::{batch_norm, BN_EPS, BN_MOMENTUM};
pub use pool::{adaptive_avg_pool, pool_channel, PoolMode};
pub use unfold::unfold_dilated;
pub use upsample::{upsample, UpsampleMode};

//! Small neural-network toolkit: dense, conv2d, instance norm, relu and
//! softmax layers with forward and backward passes.

mod layer;
mod network;
mod persist;

pub use layer::{Conv2dSpec, Layer, LayerKind, DEFAULT_NORM_EPS};
pub use network::{Gradients, Network};
pub use persist::{load_network, read_network, save_network, write_network};

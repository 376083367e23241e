//! Fully dense 3-D classifier built from wavelet convolutions.

pub mod checkpoint;
mod config;
mod graph;
mod model;
mod params;

pub use config::NetworkConfig;
pub use graph::{LayerGraph, Node, NodeKind};
pub use model::{
    backward, backward_from_cache, forward, forward_mode, forward_train, softmax_cross_entropy,
    split_batch, update_running_stats, ForwardCache, Mode,
};
pub use params::{bottleneck_groups, layer_wtconv_config, NetworkParams, ParamEntry};

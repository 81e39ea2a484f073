//! Learned blocks and the assembled registration forward pass.

mod config;
mod layers;
mod pipeline;

pub use config::{ModelConfig, NormMode};
pub use layers::{
    attention_weights, channel_norm, correction_walk, dgcnn_forward, edge_conv, init_params, layer_norm,
    multi_head_attention, transformer_attend,
};
pub use pipeline::{
    forward_matching, forward_pose, vrnet_register, ForwardNodes, Model, PoseNodes, RegisterOptions,
    RegistrationResult,
};

pub(crate) use pipeline::cloud_tensor;

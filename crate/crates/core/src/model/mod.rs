//! GPT-2 weights, the instrumented forward pass and per-head matrices.

mod cache;
mod config;
mod forward;
mod heads;
mod weights;

pub(crate) use cache::resolve_position;
pub use cache::{ActivationCache, NodeId, PatchSpec, Site};
pub use config::{ModelConfig, GPT2_HEAD_DIM, GPT2_LN_EPSILON};
pub use forward::{
    attention_input, forward_pass_count, forward_with_cache, mlp_forward, run, unembed,
    unembed_rows, Interventions, LogitsScope, MlpReplacement,
};
pub(crate) use forward::{check_node_shape, head_at};
pub use heads::{head_output, ov_apply, HeadWeights};
pub use weights::{
    load_weights, load_weights_with, parse_weights, to_safetensors, LayerWeights, LoadOptions,
    LoadReport, Norm, Weights,
};

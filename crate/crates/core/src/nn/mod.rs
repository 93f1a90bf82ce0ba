//! Neural building blocks with hand-written backward passes.

pub mod layer;
pub mod norm;
pub mod ops;
pub mod param;

pub use layer::{
    aggregate, attention_scores, attention_weights, deepnorm_alpha, deepnorm_beta, ffn, layer_backward,
    layer_forward, message_adjacency, AttentionSettings, AttentionTopology, DropKeyMask, LayerCache, LayerParams,
};
pub use norm::{BatchNorm, Mode, Norm, NormKind};
pub use ops::Activation;
pub use param::{ParamKind, Parameters};

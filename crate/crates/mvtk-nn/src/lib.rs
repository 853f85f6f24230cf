//! Layers and MobileViT blocks composed from mvtk-tensor ops.

pub mod blocks;
pub mod ctx;
pub mod layers;

pub use blocks::{
    ConcatSource, FusionConfig, FusionKernel, GlobalRep, MobileVitBlock, MobileVitBlockSpec,
    Mv2Block, Mv2Spec,
};
pub use ctx::{BnUpdate, Cx, EvalCx, TrainCx, NORM_EPS};
pub use layers::{
    Act, AffineNorm, AttentionKind, BnParams, ConvUnit, Ffn, LinearLayer, MultiHeadAttention,
    Params, PatchSpec, Scope, SeparableAttention, TokenMixer, TokenNorm, TransformerLayer,
    param_count,
};

//! Segmented recurrent cross attention.
//!
//! Each decoder step attends exactly to one segment of the encoder output and
//! receives a linear-attention summary of the remaining segments, gated by a
//! RAF unit that advances once per segment change.

mod config;
mod cost;
mod infer;
mod train;

pub use config::{
    Ablation, BiasMode, CrossAttnConfig, CrossVariant, SigmaMode, DEFAULT_CLAMP_BOUND,
};
pub use cost::{measured_cost, theoretical_cost, CostModel, MeasuredCost};
pub use infer::{cross_attn_infer_step, slice_bias, InferCache};
pub use train::{
    cross_attn_block, cross_attn_train, multi_head_block, BlockTrace, HeadVars, TrainOutput,
};

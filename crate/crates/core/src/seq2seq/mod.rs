//! Toy encoder-decoder used to compare cross-attention variants on synthetic
//! compression tasks.

mod config;
mod data;
mod decode;
mod experiment;
mod model;
mod rouge;
mod train;

pub use config::{ModelConfig, TrainConfig};
pub use data::{
    load_jsonl, make_synthetic, save_jsonl, SynthPair, Task, BOS, EOS, FIRST_CONTENT, MARK, PAD,
};
pub use decode::{greedy_decode, greedy_decode_with_logits, stepwise_logits};
pub use experiment::{median, Experiment, RunResult};
pub use model::{
    batch_loss, decode_teacher, encode, forward_loss, loss_and_grads, sinusoidal, teacher_logits,
    ParamVars, Params,
};
pub use rouge::{lcs_len, mean_scores, rouge_n, rouge_scores, RougeScores};
pub use train::{
    content, evaluate, fresh_checkpoint, train, train_from, AdamState, Checkpoint, EpochMetrics,
    TrainTrace, CHECKPOINT_VERSION,
};

use serde::{Deserialize, Serialize};

use crate::attention::AttnDims;
use crate::error::{Error, Result};
use crate::srformer::{Ablation, CrossAttnConfig, CrossVariant, SigmaMode};

/// Shape and attention choices of the toy encoder-decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub ffn_dim: usize,
    /// Source length `k_tok`.
    pub src_len: usize,
    /// Number of content tokens in a target, `q_tok`. The decoder runs for
    /// `tgt_len + 1` steps so it can also emit the end marker.
    pub tgt_len: usize,
    pub segment_size: usize,
    pub variant: CrossVariant,
    pub ablation: Ablation,
    pub sigma_mode: SigmaMode,
    /// Clamp the key-value products in the recurrent branch.
    pub use_clamp: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 32,
            d_model: 64,
            heads: 2,
            layers_enc: 2,
            layers_dec: 2,
            ffn_dim: 128,
            src_len: 256,
            tgt_len: 32,
            segment_size: 8,
            variant: CrossVariant::Srformer,
            ablation: Ablation::FullSr,
            sigma_mode: SigmaMode::UnitSum,
            use_clamp: false,
        }
    }
}

impl ModelConfig {
    /// Decoder steps: one per content token plus the end marker.
    pub fn dec_len(&self) -> usize {
        self.tgt_len + 1
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn cross_dims(&self) -> Result<AttnDims> {
        AttnDims::new(
            self.dec_len(),
            self.src_len,
            self.d_head(),
            self.segment_size,
        )
    }

    pub fn cross_config(&self) -> Result<CrossAttnConfig> {
        let mut cfg = CrossAttnConfig::new(self.cross_dims()?)
            .with_ablation(self.ablation)
            .with_sigma(self.sigma_mode);
        cfg.use_clamp = self.use_clamp;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Param(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab_size <= super::data::FIRST_CONTENT {
            return Err(Error::Param(format!(
                "vocab_size {} leaves no content tokens",
                self.vocab_size
            )));
        }
        if self.layers_dec == 0 || self.ffn_dim == 0 || self.tgt_len == 0 {
            return Err(Error::Param(
                "layers_dec, ffn_dim and tgt_len must be positive".into(),
            ));
        }
        let dims = self.cross_dims()?;
        if self.dec_len() < dims.m() {
            return Err(Error::Param(format!(
                "decoder length {} is shorter than the {} segments",
                self.dec_len(),
                dims.m()
            )));
        }
        Ok(())
    }
}

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Parameters whose name starts with any of these prefixes are not updated.
    pub frozen: Vec<String>,
    /// Run greedy evaluation every this many epochs (and after the last).
    /// Zero disables evaluation.
    pub eval_every: usize,
    /// Global gradient-norm clip; zero disables.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            epochs: 30,
            batch_size: 8,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            frozen: Vec::new(),
            eval_every: 1,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Param(format!(
                "learning rate must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Param("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }
}

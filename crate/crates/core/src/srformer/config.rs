use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::AttnDims;
use crate::error::{Error, Result};

/// How the segment and recurrent outputs are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaMode {
    /// `O = O_S + O_R`.
    #[default]
    UnitSum,
    /// `O = σ·O_S + (1−σ)·O_R` with one learnable σ per head.
    Learnable,
    /// σ = c_s/c computed exactly from the full scores. Oracle only; σ is
    /// treated as a constant by the tape.
    ExactOracle,
}

/// Which terms of the recurrent compensation are kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// `O_S + Q·RAF(K_R·V_R)/norm(K)`.
    #[default]
    FullSr,
    /// (I) recurrent term only, no segment attention.
    RecurrentOnly,
    /// (II) no division by `norm(K)`.
    NoNorm,
    /// (III) remainder product used directly, no gate.
    NoRaf,
    /// (IV) gate fed the segment product `K_S·V_S` instead of the remainder.
    SegmentProduct,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::FullSr,
        Ablation::RecurrentOnly,
        Ablation::NoNorm,
        Ablation::NoRaf,
        Ablation::SegmentProduct,
    ];

    pub fn uses_segment_attention(self) -> bool {
        self != Ablation::RecurrentOnly
    }

    pub fn uses_norm(self) -> bool {
        self != Ablation::NoNorm
    }

    pub fn uses_raf(self) -> bool {
        self != Ablation::NoRaf
    }

    pub fn label(self) -> &'static str {
        match self {
            Ablation::FullSr => "full-sr",
            Ablation::RecurrentOnly => "I",
            Ablation::NoNorm => "II",
            Ablation::NoRaf => "III",
            Ablation::SegmentProduct => "IV",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "full-sr" | "full" => Ok(Ablation::FullSr),
            "I" | "i" | "recurrent-only" => Ok(Ablation::RecurrentOnly),
            "II" | "ii" | "no-norm" => Ok(Ablation::NoNorm),
            "III" | "iii" | "no-raf" => Ok(Ablation::NoRaf),
            "IV" | "iv" | "segment-product" => Ok(Ablation::SegmentProduct),
            other => Err(Error::Param(format!("unknown ablation '{other}'"))),
        }
    }
}

/// How positional information and padding reach cross attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BiasMode {
    /// No bias may be supplied.
    #[default]
    None,
    /// Additive `q×k` score bias, sliced per segment (T5 style).
    AdditiveQk,
    /// Positions were added to the inputs upstream; a supplied bias only
    /// masks padded keys in the segment softmax (BART style).
    InputAdded,
}

/// Cross-attention flavour used by a decoder block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrossVariant {
    Full,
    Segmented,
    Srformer,
}

impl fmt::Display for CrossVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CrossVariant::Full => "full",
            CrossVariant::Segmented => "segmented",
            CrossVariant::Srformer => "srformer",
        })
    }
}

impl FromStr for CrossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" | "transformer" => Ok(CrossVariant::Full),
            "segmented" | "segmented-only" => Ok(CrossVariant::Segmented),
            "srformer" | "sr" => Ok(CrossVariant::Srformer),
            other => Err(Error::Param(format!("unknown variant '{other}'"))),
        }
    }
}

pub const DEFAULT_CLAMP_BOUND: f64 = 1e4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossAttnConfig {
    pub dims: AttnDims,
    pub sigma_mode: SigmaMode,
    pub ablation: Ablation,
    pub clamp_bound: f64,
    pub bias_mode: BiasMode,
    /// Clamp `KᵀV` and every `P` before the recurrent term.
    pub use_clamp: bool,
    /// Oracle: replace the recurrent term by the exact remainder softmax.
    pub exact_remainder: bool,
}

impl CrossAttnConfig {
    pub fn new(dims: AttnDims) -> Self {
        CrossAttnConfig {
            dims,
            sigma_mode: SigmaMode::UnitSum,
            ablation: Ablation::FullSr,
            clamp_bound: DEFAULT_CLAMP_BOUND,
            bias_mode: BiasMode::None,
            use_clamp: false,
            exact_remainder: false,
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn with_sigma(mut self, sigma_mode: SigmaMode) -> Self {
        self.sigma_mode = sigma_mode;
        self
    }

    pub fn with_bias_mode(mut self, bias_mode: BiasMode) -> Self {
        self.bias_mode = bias_mode;
        self
    }

    pub fn with_clamp(mut self, bound: f64) -> Self {
        self.use_clamp = true;
        self.clamp_bound = bound;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.clamp_bound.is_nan() || self.clamp_bound <= 0.0 {
            return Err(Error::Param(format!(
                "clamp bound must be positive, got {}",
                self.clamp_bound
            )));
        }
        AttnDims::new(self.dims.q, self.dims.k, self.dims.d, self.dims.s)?;
        Ok(())
    }
}

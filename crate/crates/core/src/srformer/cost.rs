//! Closed-form and ledger-measured cost of one cross-attention block.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{tags, AttnDims};
use crate::error::Result;
use crate::numkit::{ledger, Mat};
use crate::raf::RafParams;

use super::config::{CrossAttnConfig, CrossVariant};
use super::train::run_on_constants;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub variant: CrossVariant,
    pub macs: u64,
    pub mem_elems: u64,
}

/// Closed-form counts for the three variants, in the order full, segmented,
/// srformer. Only the score product is counted, as in the usual complexity
/// tables.
pub fn theoretical_cost(dims: &AttnDims) -> [CostModel; 3] {
    let (q, k, d, s, m) = (
        dims.q as u64,
        dims.k as u64,
        dims.d as u64,
        dims.s as u64,
        dims.m() as u64,
    );
    [
        CostModel {
            variant: CrossVariant::Full,
            macs: q * k * d,
            mem_elems: q * k,
        },
        CostModel {
            variant: CrossVariant::Segmented,
            macs: q * s * d,
            mem_elems: q * s,
        },
        CostModel {
            variant: CrossVariant::Srformer,
            macs: q * s * d + k * d * d,
            mem_elems: q * s + m * d * d,
        },
    ]
}

/// Ledger readings from one block evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasuredCost {
    pub variant: CrossVariant,
    /// Every MAC recorded, including the value product and the gate.
    pub total_macs: u64,
    /// The terms the closed form counts: scores, plus the segment products
    /// for srformer.
    pub dominant_macs: u64,
    pub peak_elems: u64,
    pub by_tag: BTreeMap<String, u64>,
}

impl MeasuredCost {
    pub fn tag(&self, tag: &str) -> u64 {
        self.by_tag.get(tag).copied().unwrap_or(0)
    }
}

/// Runs the block once on random inputs under a fresh ledger.
pub fn measured_cost(
    variant: CrossVariant,
    cfg: &CrossAttnConfig,
    seed: u64,
) -> Result<MeasuredCost> {
    let dims = cfg.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = Mat::randn(dims.q, dims.d, 1.0, &mut rng);
    let k = Mat::randn(dims.k, dims.d, 1.0, &mut rng);
    let v = Mat::randn(dims.k, dims.d, 1.0, &mut rng);
    let raf = RafParams::init(dims.d, &mut rng);
    let sigma = Some(0.5);
    let (res, led) =
        ledger::scoped(|| run_on_constants(variant, cfg, Some(&raf), sigma, &q, &k, &v, None));
    res?;
    let dominant_macs = match variant {
        CrossVariant::Srformer => led.tagged(tags::SCORES) + led.tagged(tags::KV_SEGMENT),
        _ => led.tagged(tags::SCORES),
    };
    Ok(MeasuredCost {
        variant,
        total_macs: led.macs,
        dominant_macs,
        peak_elems: led.peak_elems,
        by_tag: led
            .by_tag
            .iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect(),
    })
}

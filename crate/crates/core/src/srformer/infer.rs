//! Step-by-step cross attention for autoregressive decoding.

use crate::attention::{
    self, full_attention, pad_rows, segment_bias, segment_index, segment_rows, tags,
};
use crate::error::{Error, Result};
use crate::numkit::{
    clamp_mat, frob_norm, ledger, matmul, matmul_nt, matmul_tn, softmax_rows, Mat,
};
use crate::raf::{raf_reset, raf_step, RafParams, RafState};

use super::config::{Ablation, CrossAttnConfig, CrossVariant, SigmaMode};
use super::train::{check_bias, one_minus_value};

/// Per-sequence state carried between decoding steps of one head.
#[derive(Clone, Debug, Default)]
pub struct InferCache {
    /// Next expected step.
    pub step: usize,
    kp: Option<Mat>,
    vp: Option<Mat>,
    kv: Option<Mat>,
    norm: f64,
    raf_state: Option<RafState>,
    prev_segment: Option<usize>,
    p_active: Option<Mat>,
    /// Segments at which the gate ran, in order.
    pub raf_segments: Vec<usize>,
}

impl InferCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn raf_state(&self) -> Option<&RafState> {
        self.raf_state.as_ref()
    }

    pub fn prev_segment(&self) -> Option<usize> {
        self.prev_segment
    }
}

/// Columns `[i·s, (i+1)·s)` of a `q×k` bias, clipped to `k` for a short final
/// segment.
pub fn slice_bias(bias: &Mat, i: usize, s: usize) -> Result<Mat> {
    if s == 0 {
        return Err(Error::Param("segment size must be positive".into()));
    }
    let m = bias.cols().div_ceil(s);
    if i >= m {
        return Err(Error::Index {
            op: "slice_bias",
            index: i,
            limit: m,
        });
    }
    let (start, end) = segment_rows(i, s, bias.cols());
    bias.slice_cols(start, end)
}

/// Output row for query step `t`. `bias_row` is row `t` of the `q×k` bias.
/// Steps must arrive in order; `t = 0` starts a fresh sequence.
#[allow(clippy::too_many_arguments)]
pub fn cross_attn_infer_step(
    variant: CrossVariant,
    cfg: &CrossAttnConfig,
    raf: Option<&RafParams>,
    sigma: Option<f64>,
    q_t: &Mat,
    t: usize,
    k: &Mat,
    v: &Mat,
    cache: &mut InferCache,
    bias_row: Option<&Mat>,
) -> Result<Mat> {
    let dims = cfg.dims;
    if t == 0 {
        cache.reset();
    } else if t != cache.step {
        return Err(Error::Sequencing {
            expected: cache.step,
            got: t,
        });
    }
    if q_t.shape() != (1, dims.d) || k.shape() != (dims.k, dims.d) || v.rows() != dims.k {
        return Err(Error::shape(
            "cross_attn_infer_step",
            q_t.shape(),
            k.shape(),
        ));
    }
    if let Some(b) = bias_row {
        if b.shape() != (1, dims.k) {
            return Err(Error::shape(
                "cross_attn_infer_step bias",
                b.shape(),
                (1, dims.k),
            ));
        }
        check_bias(cfg, Some(&Mat::zeros(dims.q, dims.k)))?;
    }
    let i = segment_index(t, dims.q, dims.m())?;
    let out = match variant {
        CrossVariant::Full => full_attention(q_t, k, v, bias_row)?,
        CrossVariant::Segmented => segment_row(cfg, q_t, k, v, i, cache, bias_row)?,
        CrossVariant::Srformer => srformer_row(cfg, raf, sigma, q_t, k, v, i, cache, bias_row)?,
    };
    cache.step = t + 1;
    Ok(out)
}

fn ensure_padded(cfg: &CrossAttnConfig, k: &Mat, v: &Mat, cache: &mut InferCache) -> Result<()> {
    if cache.kp.is_none() {
        cache.kp = Some(pad_rows(k, cfg.dims.padded_k())?);
        cache.vp = Some(pad_rows(v, cfg.dims.padded_k())?);
    }
    Ok(())
}

fn segment_row(
    cfg: &CrossAttnConfig,
    q_t: &Mat,
    k: &Mat,
    v: &Mat,
    i: usize,
    cache: &mut InferCache,
    bias_row: Option<&Mat>,
) -> Result<Mat> {
    ensure_padded(cfg, k, v, cache)?;
    let s = cfg.dims.s;
    let kp = cache.kp.as_ref().expect("padded keys");
    let vp = cache.vp.as_ref().expect("padded values");
    let ks = kp.slice_rows(i * s, (i + 1) * s)?;
    let vs = vp.slice_rows(i * s, (i + 1) * s)?;
    let mut sc = ledger::with_tag(tags::SCORES, || matmul_nt(q_t, &ks))?;
    if let Some(sb) = segment_bias(bias_row, 1, i, &cfg.dims)? {
        sc = sc.add(&sb)?;
    }
    ledger::alloc(s as u64);
    let w = softmax_rows(&sc)?;
    let out = ledger::with_tag(tags::VALUES, || matmul(&w, &vs))?;
    ledger::free(s as u64);
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn srformer_row(
    cfg: &CrossAttnConfig,
    raf: Option<&RafParams>,
    sigma: Option<f64>,
    q_t: &Mat,
    k: &Mat,
    v: &Mat,
    i: usize,
    cache: &mut InferCache,
    bias_row: Option<&Mat>,
) -> Result<Mat> {
    let dims = cfg.dims;
    let ablation = cfg.ablation;
    let o_s = if ablation.uses_segment_attention() {
        Some(segment_row(cfg, q_t, k, v, i, cache, bias_row)?)
    } else {
        ensure_padded(cfg, k, v, cache)?;
        None
    };

    let o_r = if cfg.exact_remainder {
        exact_remainder_row(cfg, q_t, k, v, i, bias_row)?
    } else {
        if cache.raf_state.is_none() {
            cache.norm = frob_norm(k);
            cache.raf_state = Some(raf_reset(dims.d));
            if ablation != Ablation::SegmentProduct {
                let kp = cache.kp.as_ref().expect("padded keys");
                let vp = cache.vp.as_ref().expect("padded values");
                let kv = ledger::with_tag(tags::KV_FULL, || matmul_tn(kp, vp))?;
                cache.kv = Some(if cfg.use_clamp {
                    clamp_mat(&kv, cfg.clamp_bound)?
                } else {
                    kv
                });
                ledger::alloc((dims.d * dims.d) as u64);
            }
        }
        if cache.prev_segment != Some(i) {
            let s = dims.s;
            let kp = cache.kp.as_ref().expect("padded keys");
            let vp = cache.vp.as_ref().expect("padded values");
            let ks = kp.slice_rows(i * s, (i + 1) * s)?;
            let vs = vp.slice_rows(i * s, (i + 1) * s)?;
            let ksvs = ledger::with_tag(tags::KV_SEGMENT, || matmul_tn(&ks, &vs))?;
            let p = match &cache.kv {
                Some(kv) => kv.sub(&ksvs)?,
                None => ksvs,
            };
            let p = if cfg.use_clamp {
                clamp_mat(&p, cfg.clamp_bound)?
            } else {
                p
            };
            let p = if ablation.uses_raf() {
                let params =
                    raf.ok_or_else(|| Error::Param("srformer step needs RAF parameters".into()))?;
                let state = cache.raf_state.as_ref().expect("gate state");
                let step = raf_step(params, state, &p)?;
                cache.raf_state = Some(step.state);
                cache.raf_segments.push(i);
                step.out
            } else {
                p
            };
            if cache.p_active.is_none() {
                ledger::alloc((dims.d * dims.d) as u64);
            }
            cache.p_active = Some(p);
            cache.prev_segment = Some(i);
        }
        let p = cache.p_active.as_ref().expect("active product");
        let qp = ledger::with_tag(tags::QUERY_REMAINDER, || matmul(q_t, p))?;
        if ablation.uses_norm() {
            if cache.norm.is_nan() || cache.norm <= 0.0 {
                return Err(Error::domain("cross_attn_infer_step", "norm(K) is zero"));
            }
            qp.map(|x| x / cache.norm)
        } else {
            qp
        }
    };

    let Some(o_s) = o_s else {
        return Ok(o_r);
    };
    match cfg.sigma_mode {
        SigmaMode::UnitSum => o_s.add(&o_r),
        SigmaMode::Learnable => {
            let sigma = sigma
                .ok_or_else(|| Error::Param("learnable sigma mode needs a sigma value".into()))?;
            o_s.scale(sigma).add(&o_r.scale(one_minus_value(sigma)))
        }
        SigmaMode::ExactOracle => {
            let sigma = attention::exact_sigma(q_t, k, i, dims.s, bias_row)?;
            o_s.scale(sigma).add(&o_r.scale(1.0 - sigma))
        }
    }
}

fn exact_remainder_row(
    cfg: &CrossAttnConfig,
    q_t: &Mat,
    k: &Mat,
    v: &Mat,
    i: usize,
    bias_row: Option<&Mat>,
) -> Result<Mat> {
    let (start, end) = segment_rows(i, cfg.dims.s, cfg.dims.k);
    if end - start == cfg.dims.k {
        return Ok(Mat::zeros(1, cfg.dims.d));
    }
    let (kr, vr) = attention::remainder_rows(k, v, i, cfg.dims.s)?;
    let mut sc = ledger::with_tag(tags::EXACT_REMAINDER, || matmul_nt(q_t, &kr))?;
    if let Some(b) = bias_row {
        sc = sc.add(&Mat::concat_cols(&[
            &b.slice_cols(0, start)?,
            &b.slice_cols(end, cfg.dims.k)?,
        ])?)?;
    }
    let w = softmax_rows(&sc)?;
    ledger::with_tag(tags::EXACT_REMAINDER, || matmul(&w, &vr))
}

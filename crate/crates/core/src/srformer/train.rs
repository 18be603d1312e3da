//! Whole-sequence cross attention, recorded on a tape.
//!
//! Queries are processed in runs that share a segment. Segment scores are
//! computed per run; the full product `KᵀV` once; one remainder product per
//! segment; then a single pass over the runs applies the gate whenever the
//! segment changes and adds the recurrent term.

use crate::attention::{self, segment_bias, segment_rows, segment_runs, tags, AttnDims};
use crate::error::{Error, Result};
use crate::numkit::{ledger, Mat, Tape, Var};
use crate::raf::{raf_step_tape, RafParams, RafVars};

use super::config::{Ablation, BiasMode, CrossAttnConfig, CrossVariant, SigmaMode};

/// Learnable per-head parameters of a cross-attention block.
#[derive(Clone, Copy, Debug, Default)]
pub struct HeadVars {
    pub raf: Option<RafVars>,
    pub sigma: Option<Var>,
}

/// What happened inside one block evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BlockTrace {
    /// Segments at which the gate was applied, in order.
    pub raf_segments: Vec<usize>,
    /// Smallest `|y|` seen by the gate (distance to the fire discontinuity).
    pub min_margin: f64,
}

pub(crate) fn check_bias(cfg: &CrossAttnConfig, bias: Option<&Mat>) -> Result<()> {
    match (cfg.bias_mode, bias) {
        (BiasMode::None, Some(_)) => {
            Err(Error::Param("bias supplied but bias_mode is none".into()))
        }
        (_, Some(b)) if b.shape() != (cfg.dims.q, cfg.dims.k) => Err(Error::shape(
            "cross attention bias",
            b.shape(),
            (cfg.dims.q, cfg.dims.k),
        )),
        _ => Ok(()),
    }
}

fn one_minus(tape: &mut Tape, s: Var) -> Var {
    let neg = tape.scale(s, -1.0);
    tape.add_scalar(neg, 1.0)
}

/// `1 − σ` on plain values, in the same operation order as the tape path.
pub(crate) fn one_minus_value(s: f64) -> f64 {
    -s + 1.0
}

/// Records one head of cross attention. `q` is `q×d`, `k`/`v` are `k×d`
/// (unpadded). Returns the `q×d` output.
#[allow(clippy::too_many_arguments)]
pub fn cross_attn_block(
    tape: &mut Tape,
    variant: CrossVariant,
    cfg: &CrossAttnConfig,
    head: &HeadVars,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<&Mat>,
) -> Result<(Var, BlockTrace)> {
    let dims = cfg.dims;
    let (qs, ks, vs) = (
        tape.value(q).shape(),
        tape.value(k).shape(),
        tape.value(v).shape(),
    );
    if qs != (dims.q, dims.d) || ks != (dims.k, dims.d) || vs.0 != dims.k {
        return Err(Error::shape("cross_attn_block", qs, ks));
    }
    check_bias(cfg, bias)?;
    match variant {
        CrossVariant::Full => full_block(tape, q, k, v, bias),
        CrossVariant::Segmented | CrossVariant::Srformer => {
            segmented_recurrent_block(tape, variant, cfg, head, q, k, v, bias)
        }
    }
}

fn full_block(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<&Mat>,
) -> Result<(Var, BlockTrace)> {
    let mut scores = ledger::with_tag(tags::SCORES, || tape.matmul_nt(q, k))?;
    let area = tape.value(scores).len() as u64;
    if let Some(b) = bias {
        let bv = tape.constant(b.clone());
        scores = tape.add(scores, bv)?;
    }
    ledger::alloc(area);
    let w = tape.softmax_rows(scores)?;
    let out = ledger::with_tag(tags::VALUES, || tape.matmul(w, v))?;
    ledger::free(area);
    ledger::alloc(tape.value(out).len() as u64);
    Ok((out, BlockTrace::default()))
}

fn pad(tape: &mut Tape, x: Var, rows: usize) -> Result<Var> {
    let (r, c) = tape.value(x).shape();
    if r == rows {
        return Ok(x);
    }
    let z = tape.constant(Mat::zeros(rows - r, c));
    tape.concat_rows(&[x, z])
}

#[allow(clippy::too_many_arguments)]
fn segmented_recurrent_block(
    tape: &mut Tape,
    variant: CrossVariant,
    cfg: &CrossAttnConfig,
    head: &HeadVars,
    q: Var,
    k: Var,
    v: Var,
    bias: Option<&Mat>,
) -> Result<(Var, BlockTrace)> {
    let dims = cfg.dims;
    let (s, m, d) = (dims.s, dims.m(), dims.d);
    let recurrent = variant == CrossVariant::Srformer;
    let ablation = if recurrent {
        cfg.ablation
    } else {
        Ablation::FullSr
    };
    let runs = segment_runs(dims.q, m);
    let kp = pad(tape, k, dims.padded_k())?;
    let vp = pad(tape, v, dims.padded_k())?;

    let mut segs: Vec<Option<(Var, Var)>> = vec![None; m];
    let mut seg = |tape: &mut Tape, i: usize| -> Result<(Var, Var)> {
        if let Some(pair) = segs[i] {
            return Ok(pair);
        }
        let pair = (
            tape.slice_rows(kp, i * s, (i + 1) * s)?,
            tape.slice_rows(vp, i * s, (i + 1) * s)?,
        );
        segs[i] = Some(pair);
        Ok(pair)
    };

    // Segment attention per run of queries.
    let mut o_s: Vec<Option<Var>> = vec![None; runs.len()];
    let mut q_blocks = Vec::with_capacity(runs.len());
    let a_elems = (dims.q * s) as u64;
    ledger::alloc(a_elems);
    for (r, &(i, t0, t1)) in runs.iter().enumerate() {
        let qb = tape.slice_rows(q, t0, t1)?;
        q_blocks.push(qb);
        if !(ablation.uses_segment_attention() || !recurrent) {
            continue;
        }
        let (ksi, vsi) = seg(tape, i)?;
        let mut sc = ledger::with_tag(tags::SCORES, || tape.matmul_nt(qb, ksi))?;
        let b = bias.map(|b| b.slice_rows(t0, t1)).transpose()?;
        if let Some(sb) = segment_bias(b.as_ref(), t1 - t0, i, &dims)? {
            let sb = tape.constant(sb);
            sc = tape.add(sc, sb)?;
        }
        let w = tape.softmax_rows(sc)?;
        o_s[r] = Some(ledger::with_tag(tags::VALUES, || tape.matmul(w, vsi))?);
    }

    let mut trace = BlockTrace {
        raf_segments: Vec::new(),
        min_margin: f64::INFINITY,
    };
    let mut o_r: Vec<Option<Var>> = vec![None; runs.len()];
    let mut kv_elems = 0u64;
    if recurrent && cfg.exact_remainder {
        for (r, &(i, t0, t1)) in runs.iter().enumerate() {
            o_r[r] = exact_remainder_rows(tape, &dims, q_blocks[r], k, v, i, t0, t1, bias)?;
        }
    } else if recurrent {
        let norm = if ablation.uses_norm() {
            Some(tape.frob_norm(k))
        } else {
            None
        };
        let kv = if ablation == Ablation::SegmentProduct {
            None
        } else {
            let kv = ledger::with_tag(tags::KV_FULL, || tape.matmul_tn(kp, vp))?;
            kv_elems += (d * d) as u64;
            ledger::alloc((d * d) as u64);
            Some(if cfg.use_clamp {
                tape.clamp(kv, cfg.clamp_bound)?
            } else {
                kv
            })
        };
        let mut products = Vec::with_capacity(m);
        for j in 0..m {
            let (ksj, vsj) = seg(tape, j)?;
            let ksvs = ledger::with_tag(tags::KV_SEGMENT, || tape.matmul_tn(ksj, vsj))?;
            let p = match kv {
                Some(kv) => tape.sub(kv, ksvs)?,
                None => ksvs,
            };
            products.push(if cfg.use_clamp {
                tape.clamp(p, cfg.clamp_bound)?
            } else {
                p
            });
        }
        kv_elems += (m * d * d) as u64;
        ledger::alloc((m * d * d) as u64);

        let raf = if ablation.uses_raf() {
            Some(
                head.raf
                    .ok_or_else(|| Error::Param("srformer block needs RAF parameters".into()))?,
            )
        } else {
            None
        };
        let mut mem = tape.constant(Mat::zeros(d, d));
        let mut prev: Option<usize> = None;
        for (r, &(i, _, _)) in runs.iter().enumerate() {
            if prev != Some(i) {
                if let Some(raf) = &raf {
                    let (out, mem2, margin) = raf_step_tape(tape, raf, mem, products[i])?;
                    products[i] = out;
                    mem = mem2;
                    trace.raf_segments.push(i);
                    trace.min_margin = trace.min_margin.min(margin);
                }
            }
            let qp = ledger::with_tag(tags::QUERY_REMAINDER, || {
                tape.matmul(q_blocks[r], products[i])
            })?;
            o_r[r] = Some(match norm {
                Some(n) => tape.div_by(qp, n)?,
                None => qp,
            });
            prev = Some(i);
        }
    }

    let mut rows = Vec::with_capacity(runs.len());
    for (r, &(i, t0, t1)) in runs.iter().enumerate() {
        let row = match (o_s[r], o_r[r]) {
            (Some(os), None) => os,
            (None, Some(or)) => or,
            (Some(os), Some(or)) => {
                combine(tape, cfg, head, os, or, q_blocks[r], k, i, t0, t1, bias)?
            }
            (None, None) => unreachable!("every run has at least one branch"),
        };
        rows.push(row);
    }
    let out = tape.concat_rows(&rows)?;
    ledger::free(a_elems + kv_elems);
    ledger::alloc(tape.value(out).len() as u64);
    Ok((out, trace))
}

#[allow(clippy::too_many_arguments)]
fn combine(
    tape: &mut Tape,
    cfg: &CrossAttnConfig,
    head: &HeadVars,
    os: Var,
    or: Var,
    qb: Var,
    k: Var,
    i: usize,
    t0: usize,
    t1: usize,
    bias: Option<&Mat>,
) -> Result<Var> {
    match cfg.sigma_mode {
        SigmaMode::UnitSum => tape.add(os, or),
        SigmaMode::Learnable => {
            let sigma = head.sigma.ok_or_else(|| {
                Error::Param("learnable sigma mode needs a sigma parameter".into())
            })?;
            let a = tape.scale_by(os, sigma)?;
            let rest = one_minus(tape, sigma);
            let b = tape.scale_by(or, rest)?;
            tape.add(a, b)
        }
        SigmaMode::ExactOracle => {
            let d = cfg.dims.d;
            let qv = tape.value(qb).clone();
            let kv = tape.value(k).clone();
            let mut w_s = Mat::zeros(t1 - t0, d);
            let mut w_r = Mat::zeros(t1 - t0, d);
            for r in 0..t1 - t0 {
                let b = bias.map(|b| b.row(t0 + r));
                let sigma = attention::exact_sigma(&qv.row(r), &kv, i, cfg.dims.s, b.as_ref())?;
                for c in 0..d {
                    w_s.set(r, c, sigma);
                    w_r.set(r, c, 1.0 - sigma);
                }
            }
            let a = tape.mask(os, w_s)?;
            let b = tape.mask(or, w_r)?;
            tape.add(a, b)
        }
    }
}

/// Exact remainder softmax for a run of queries, or `None`-equivalent zeros
/// when the remainder is empty.
#[allow(clippy::too_many_arguments)]
fn exact_remainder_rows(
    tape: &mut Tape,
    dims: &AttnDims,
    qb: Var,
    k: Var,
    v: Var,
    i: usize,
    t0: usize,
    t1: usize,
    bias: Option<&Mat>,
) -> Result<Option<Var>> {
    let (start, end) = segment_rows(i, dims.s, dims.k);
    let rows = t1 - t0;
    if end - start == dims.k {
        return Ok(Some(tape.constant(Mat::zeros(rows, dims.d))));
    }
    let split = |tape: &mut Tape, x: Var| -> Result<Var> {
        let head = tape.slice_rows(x, 0, start)?;
        let tail = tape.slice_rows(x, end, dims.k)?;
        tape.concat_rows(&[head, tail])
    };
    let kr = split(tape, k)?;
    let vr = split(tape, v)?;
    let mut sc = ledger::with_tag(tags::EXACT_REMAINDER, || tape.matmul_nt(qb, kr))?;
    if let Some(b) = bias {
        let br = b.slice_rows(t0, t1)?;
        let br = Mat::concat_cols(&[&br.slice_cols(0, start)?, &br.slice_cols(end, dims.k)?])?;
        let bv = tape.constant(br);
        sc = tape.add(sc, bv)?;
    }
    let w = tape.softmax_rows(sc)?;
    Ok(Some(ledger::with_tag(tags::EXACT_REMAINDER, || {
        tape.matmul(w, vr)
    })?))
}

/// Multi-head wrapper: column block `h` of `q`, `k`, `v` goes to head `h`
/// with its own gate; head outputs are concatenated. `cfg.dims.d` is the
/// per-head width.
#[allow(clippy::too_many_arguments)]
pub fn multi_head_block(
    tape: &mut Tape,
    variant: CrossVariant,
    cfg: &CrossAttnConfig,
    heads: &[HeadVars],
    q: Var,
    k: Var,
    v: Var,
    bias: Option<&Mat>,
) -> Result<(Var, Vec<BlockTrace>)> {
    let d = cfg.dims.d;
    let mut outs = Vec::with_capacity(heads.len());
    let mut traces = Vec::with_capacity(heads.len());
    for (h, head) in heads.iter().enumerate() {
        let qh = tape.slice_cols(q, h * d, (h + 1) * d)?;
        let kh = tape.slice_cols(k, h * d, (h + 1) * d)?;
        let vh = tape.slice_cols(v, h * d, (h + 1) * d)?;
        let (o, tr) = cross_attn_block(tape, variant, cfg, head, qh, kh, vh, bias)?;
        outs.push(o);
        traces.push(tr);
    }
    Ok((tape.concat_cols(&outs)?, traces))
}

/// Value-level result of the whole-sequence algorithm.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub out: Mat,
    pub trace: BlockTrace,
}

/// Whole-sequence SR cross attention on plain values (one head).
pub fn cross_attn_train(
    cfg: &CrossAttnConfig,
    raf: Option<&RafParams>,
    sigma: Option<f64>,
    q: &Mat,
    k: &Mat,
    v: &Mat,
    bias: Option<&Mat>,
) -> Result<TrainOutput> {
    run_on_constants(CrossVariant::Srformer, cfg, raf, sigma, q, k, v, bias)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn run_on_constants(
    variant: CrossVariant,
    cfg: &CrossAttnConfig,
    raf: Option<&RafParams>,
    sigma: Option<f64>,
    q: &Mat,
    k: &Mat,
    v: &Mat,
    bias: Option<&Mat>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let head = HeadVars {
        raf: raf.map(|p| RafVars::constants(&mut tape, p)),
        sigma: sigma.map(|s| tape.constant(Mat::scalar(s))),
    };
    let qv = tape.constant(q.clone());
    let kv = tape.constant(k.clone());
    let vv = tape.constant(v.clone());
    let (out, trace) = cross_attn_block(&mut tape, variant, cfg, &head, qv, kv, vv, bias)?;
    Ok(TrainOutput {
        out: tape.value(out).clone(),
        trace,
    })
}

//! Greedy autoregressive decoding with cached decoder keys/values and
//! stepwise cross attention.

use crate::error::{Error, Result};
use crate::numkit::{Mat, Tape, Var};
use crate::raf::RafParams;
use crate::srformer::{cross_attn_infer_step, InferCache};

use super::config::ModelConfig;
use super::data::{BOS, EOS};
use super::model::{
    dec_prefix, encode, ffn, key, linear, norm, project_qkv, softmax_heads, ParamVars, Params,
};

struct LayerState {
    self_k: Option<Mat>,
    self_v: Option<Mat>,
    cross_k: Vec<Mat>,
    cross_v: Vec<Mat>,
    caches: Vec<InferCache>,
    rafs: Vec<RafParams>,
    sigmas: Vec<Option<f64>>,
}

fn append_rows(acc: &mut Option<Mat>, row: &Mat) -> Result<()> {
    *acc = Some(match acc.take() {
        None => row.clone(),
        Some(m) => Mat::concat_rows(&[&m, row])?,
    });
    Ok(())
}

/// Runs the decoder step by step. With `forced`, those tokens are fed as
/// inputs instead of the argmax; otherwise decoding stops after `EOS`.
/// Returns emitted tokens and the logits row of every step.
fn run(
    params: &Params,
    cfg: &ModelConfig,
    src: &[usize],
    max_len: usize,
    forced: Option<&[usize]>,
) -> Result<(Vec<usize>, Vec<Mat>)> {
    cfg.validate()?;
    let cross = cfg.cross_config()?;
    let dh = cfg.d_head();
    let steps = max_len.min(cfg.dec_len());
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, params, |_| false);
    let enc = encode(&mut tape, &pv, cfg, src)?;

    let mut layers = Vec::with_capacity(cfg.layers_dec);
    for l in 0..cfg.layers_dec {
        let p = dec_prefix(l);
        let k = key(&mut tape, &pv, enc, &format!("{p}.cross"))?;
        let v = linear(&mut tape, &pv, enc, &format!("{p}.cross.v"))?;
        let (k, v) = (tape.value(k).clone(), tape.value(v).clone());
        layers.push(LayerState {
            self_k: None,
            self_v: None,
            cross_k: (0..cfg.heads)
                .map(|h| k.slice_cols(h * dh, (h + 1) * dh))
                .collect::<Result<_>>()?,
            cross_v: (0..cfg.heads)
                .map(|h| v.slice_cols(h * dh, (h + 1) * dh))
                .collect::<Result<_>>()?,
            caches: (0..cfg.heads).map(|_| InferCache::new()).collect(),
            rafs: (0..cfg.heads)
                .map(|h| params.raf(l, h))
                .collect::<Result<_>>()?,
            sigmas: (0..cfg.heads).map(|h| params.sigma(l, h)).collect(),
        });
    }

    let mut tokens = Vec::with_capacity(steps);
    let mut logits = Vec::with_capacity(steps);
    let mut prev = BOS;
    for t in 0..steps {
        let e = tape.gather(pv.get("emb")?, &[prev])?;
        let pos = tape.slice_rows(pv.get("pos.dec")?, t, t + 1)?;
        let mut y = tape.add(e, pos)?;
        for (l, st) in layers.iter_mut().enumerate() {
            let p = dec_prefix(l);
            let a = norm(&mut tape, &pv, y, &format!("{p}.ln1"))?;
            let (q, k, v) = project_qkv(&mut tape, &pv, cfg, a, a, &format!("{p}.self"))?;
            append_rows(&mut st.self_k, tape.value(k))?;
            append_rows(&mut st.self_v, tape.value(v))?;
            let kc = tape.constant(st.self_k.clone().expect("cached keys"));
            let vc = tape.constant(st.self_v.clone().expect("cached values"));
            let o = softmax_heads(&mut tape, cfg, q, kc, vc, None)?;
            let o = linear(&mut tape, &pv, o, &format!("{p}.self.o"))?;
            y = tape.add(y, o)?;

            let a = norm(&mut tape, &pv, y, &format!("{p}.ln2"))?;
            let q = linear(&mut tape, &pv, a, &format!("{p}.cross.q"))?;
            let q = tape.scale(q, 1.0 / (dh as f64).sqrt());
            let qv = tape.value(q).clone();
            let mut heads = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let qh = qv.slice_cols(h * dh, (h + 1) * dh)?;
                heads.push(cross_attn_infer_step(
                    cfg.variant,
                    &cross,
                    Some(&st.rafs[h]),
                    st.sigmas[h],
                    &qh,
                    t,
                    &st.cross_k[h],
                    &st.cross_v[h],
                    &mut st.caches[h],
                    None,
                )?);
            }
            let o = tape.constant(Mat::concat_cols(&heads.iter().collect::<Vec<_>>())?);
            let o = linear(&mut tape, &pv, o, &format!("{p}.cross.o"))?;
            y = tape.add(y, o)?;

            let a = norm(&mut tape, &pv, y, &format!("{p}.ln3"))?;
            let f = ffn(&mut tape, &pv, a, &p)?;
            y = tape.add(y, f)?;
        }
        let y = norm(&mut tape, &pv, y, "dec.ln")?;
        let z: Var = linear(&mut tape, &pv, y, "out")?;
        let row = tape.value(z).clone();
        let next = row.argmax_row(0);
        logits.push(row);
        tokens.push(next);
        match forced {
            Some(f) => {
                if t + 1 < steps {
                    prev = *f
                        .get(t + 1)
                        .ok_or_else(|| Error::Param("forced input shorter than max_len".into()))?;
                }
            }
            None => {
                if next == EOS {
                    break;
                }
                prev = next;
            }
        }
    }
    Ok((tokens, logits))
}

/// Argmax decoding from `BOS`, at most `min(max_len, dec_len)` tokens,
/// stopping after the end marker.
pub fn greedy_decode(
    params: &Params,
    cfg: &ModelConfig,
    src: &[usize],
    max_len: usize,
) -> Result<Vec<usize>> {
    Ok(run(params, cfg, src, max_len, None)?.0)
}

/// Like [`greedy_decode`] but also returns each step's logits row.
pub fn greedy_decode_with_logits(
    params: &Params,
    cfg: &ModelConfig,
    src: &[usize],
    max_len: usize,
) -> Result<(Vec<usize>, Vec<Mat>)> {
    run(params, cfg, src, max_len, None)
}

/// Stepwise logits when the decoder is fed `inputs` (starting with `BOS`).
pub fn stepwise_logits(
    params: &Params,
    cfg: &ModelConfig,
    src: &[usize],
    inputs: &[usize],
) -> Result<Vec<Mat>> {
    if inputs.first() != Some(&BOS) {
        return Err(Error::Param("forced inputs must start with BOS".into()));
    }
    Ok(run(params, cfg, src, inputs.len(), Some(inputs))?.1)
}

//! Encoder-decoder transformer over a shared token embedding. Self attention
//! is always full; decoder cross attention uses the configured variant.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::MASK_NEG;
use crate::error::{Error, Result};
use crate::numkit::{Mat, Tape, Var};
use crate::raf::{RafParams, RafVars};
use crate::srformer::{multi_head_block, BlockTrace, CrossAttnConfig, HeadVars, SigmaMode};

use super::config::ModelConfig;
use super::data::SynthPair;

pub(crate) const LN_EPS: f64 = 1e-5;
const SIGMA_INIT: f64 = 0.5;

/// Named parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub tensors: BTreeMap<String, Mat>,
}

pub(crate) fn enc_prefix(l: usize) -> String {
    format!("enc.{l}")
}

pub(crate) fn dec_prefix(l: usize) -> String {
    format!("dec.{l}")
}

pub(crate) fn raf_prefix(l: usize, h: usize) -> String {
    format!("dec.{l}.cross.raf{h}")
}

pub(crate) fn sigma_name(l: usize, h: usize) -> String {
    format!("dec.{l}.cross.sigma{h}")
}

/// Sinusoidal table, `rows×d`.
pub fn sinusoidal(rows: usize, d: usize) -> Mat {
    let mut m = Mat::zeros(rows, d);
    for p in 0..rows {
        for i in 0..d {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = p as f64 * freq;
            m.set(p, i, if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    m
}

struct Init<'a> {
    rng: ChaCha8Rng,
    out: &'a mut BTreeMap<String, Mat>,
}

impl Init<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let w = Mat::randn(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), &mut self.rng);
        self.out.insert(format!("{name}.w"), w);
        self.out.insert(format!("{name}.b"), Mat::zeros(1, fan_out));
    }

    fn norm(&mut self, name: &str, d: usize) {
        self.out.insert(format!("{name}.g"), Mat::filled(1, d, 1.0));
        self.out.insert(format!("{name}.b"), Mat::zeros(1, d));
    }

    /// Keys carry no bias: softmax cancels it, leaving a parameter with an
    /// identically zero gradient.
    fn attention(&mut self, name: &str, d: usize) {
        for p in ["q", "k", "v", "o"] {
            self.linear(&format!("{name}.{p}"), d, d);
        }
        self.out.remove(&format!("{name}.k.b"));
    }

    fn ffn(&mut self, name: &str, d: usize, hidden: usize) {
        self.linear(&format!("{name}.ff1"), d, hidden);
        self.linear(&format!("{name}.ff2"), hidden, d);
    }
}

impl Params {
    /// Deterministic initialization; tensors are drawn in a fixed order.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut tensors = BTreeMap::new();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            out: &mut tensors,
        };
        let emb = Mat::randn(cfg.vocab_size, d, 1.0, &mut init.rng);
        init.out.insert("emb".into(), emb);
        init.out
            .insert("pos.enc".into(), sinusoidal(cfg.src_len, d));
        init.out
            .insert("pos.dec".into(), sinusoidal(cfg.dec_len(), d));
        for l in 0..cfg.layers_enc {
            let p = enc_prefix(l);
            init.norm(&format!("{p}.ln1"), d);
            init.attention(&format!("{p}.self"), d);
            init.norm(&format!("{p}.ln2"), d);
            init.ffn(&p, d, cfg.ffn_dim);
        }
        init.norm("enc.ln", d);
        for l in 0..cfg.layers_dec {
            let p = dec_prefix(l);
            init.norm(&format!("{p}.ln1"), d);
            init.attention(&format!("{p}.self"), d);
            init.norm(&format!("{p}.ln2"), d);
            init.attention(&format!("{p}.cross"), d);
            for h in 0..cfg.heads {
                let raf = RafParams::init(cfg.d_head(), &mut init.rng);
                let rp = raf_prefix(l, h);
                init.out.insert(format!("{rp}.w"), raf.w);
                init.out.insert(format!("{rp}.leak"), Mat::scalar(raf.leak));
                init.out.insert(format!("{rp}.thre"), Mat::scalar(raf.thre));
                if cfg.sigma_mode == SigmaMode::Learnable {
                    init.out.insert(sigma_name(l, h), Mat::scalar(SIGMA_INIT));
                }
            }
            init.norm(&format!("{p}.ln3"), d);
            init.ffn(&p, d, cfg.ffn_dim);
        }
        init.norm("dec.ln", d);
        init.linear("out", d, cfg.vocab_size);
        Ok(Params { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Mat> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Param(format!("missing parameter '{name}'")))
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Mat::len).sum()
    }

    pub fn raf(&self, l: usize, h: usize) -> Result<RafParams> {
        let p = raf_prefix(l, h);
        Ok(RafParams {
            w: self.get(&format!("{p}.w"))?.clone(),
            leak: self.get(&format!("{p}.leak"))?.get(0, 0),
            thre: self.get(&format!("{p}.thre"))?.get(0, 0),
        })
    }

    pub fn sigma(&self, l: usize, h: usize) -> Option<f64> {
        self.tensors.get(&sigma_name(l, h)).map(|m| m.get(0, 0))
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Mat::is_finite)
    }
}

/// Tape handles for every parameter, keyed by name.
#[derive(Clone, Debug, Default)]
pub struct ParamVars(pub BTreeMap<String, Var>);

impl ParamVars {
    /// Binds every tensor; those for which `trainable` holds become
    /// parameters, the rest constants.
    pub fn bind(tape: &mut Tape, params: &Params, trainable: impl Fn(&str) -> bool) -> Self {
        ParamVars(
            params
                .tensors
                .iter()
                .map(|(n, m)| {
                    let v = if trainable(n) {
                        tape.param(m.clone())
                    } else {
                        tape.constant(m.clone())
                    };
                    (n.clone(), v)
                })
                .collect(),
        )
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Param(format!("missing parameter '{name}'")))
    }

    pub(crate) fn heads(&self, cfg: &ModelConfig, l: usize) -> Result<Vec<HeadVars>> {
        (0..cfg.heads)
            .map(|h| {
                let p = raf_prefix(l, h);
                Ok(HeadVars {
                    raf: Some(RafVars {
                        w: self.get(&format!("{p}.w"))?,
                        leak: self.get(&format!("{p}.leak"))?,
                        thre: self.get(&format!("{p}.thre"))?,
                    }),
                    sigma: self.0.get(&sigma_name(l, h)).copied(),
                })
            })
            .collect()
    }
}

pub(crate) fn linear(tape: &mut Tape, pv: &ParamVars, x: Var, name: &str) -> Result<Var> {
    let y = tape.matmul(x, pv.get(&format!("{name}.w"))?)?;
    tape.add_row(y, pv.get(&format!("{name}.b"))?)
}

pub(crate) fn key(tape: &mut Tape, pv: &ParamVars, x: Var, attn: &str) -> Result<Var> {
    tape.matmul(x, pv.get(&format!("{attn}.k.w"))?)
}

pub(crate) fn norm(tape: &mut Tape, pv: &ParamVars, x: Var, name: &str) -> Result<Var> {
    let n = tape.layer_norm(x, LN_EPS);
    let g = tape.mul_row(n, pv.get(&format!("{name}.g"))?)?;
    tape.add_row(g, pv.get(&format!("{name}.b"))?)
}

pub(crate) fn ffn(tape: &mut Tape, pv: &ParamVars, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(tape, pv, x, &format!("{prefix}.ff1"))?;
    let h = tape.relu(h);
    linear(tape, pv, h, &format!("{prefix}.ff2"))
}

/// `(q, k, v)` projections with the query pre-scaled by `1/√d_head`.
pub(crate) fn project_qkv(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    xq: Var,
    xkv: Var,
    name: &str,
) -> Result<(Var, Var, Var)> {
    let q = linear(tape, pv, xq, &format!("{name}.q"))?;
    let q = tape.scale(q, 1.0 / (cfg.d_head() as f64).sqrt());
    let k = key(tape, pv, xkv, name)?;
    let v = linear(tape, pv, xkv, &format!("{name}.v"))?;
    Ok((q, k, v))
}

/// Multi-head softmax attention over already projected `q`, `k`, `v`.
pub(crate) fn softmax_heads(
    tape: &mut Tape,
    cfg: &ModelConfig,
    q: Var,
    k: Var,
    v: Var,
    mask: Option<&Mat>,
) -> Result<Var> {
    let dh = cfg.d_head();
    let mut outs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dh, (h + 1) * dh)?;
        let kh = tape.slice_cols(k, h * dh, (h + 1) * dh)?;
        let vh = tape.slice_cols(v, h * dh, (h + 1) * dh)?;
        let mut s = tape.matmul_nt(qh, kh)?;
        if let Some(m) = mask {
            let m = tape.constant(m.clone());
            s = tape.add(s, m)?;
        }
        let w = tape.softmax_rows(s)?;
        outs.push(tape.matmul(w, vh)?);
    }
    tape.concat_cols(&outs)
}

fn causal_mask(n: usize) -> Mat {
    let mut m = Mat::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            m.set(i, j, MASK_NEG);
        }
    }
    m
}

fn check_tokens(cfg: &ModelConfig, tokens: &[usize], len: usize, what: &str) -> Result<()> {
    if tokens.len() != len {
        return Err(Error::Param(format!(
            "{what} has length {}, expected {len}",
            tokens.len()
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Index {
            op: "embedding",
            index: t,
            limit: cfg.vocab_size,
        });
    }
    Ok(())
}

/// Encoder output, `src_len×d_model`.
pub fn encode(tape: &mut Tape, pv: &ParamVars, cfg: &ModelConfig, src: &[usize]) -> Result<Var> {
    check_tokens(cfg, src, cfg.src_len, "source")?;
    let e = tape.gather(pv.get("emb")?, src)?;
    let mut x = tape.add(e, pv.get("pos.enc")?)?;
    for l in 0..cfg.layers_enc {
        let p = enc_prefix(l);
        let a = norm(tape, pv, x, &format!("{p}.ln1"))?;
        let (q, k, v) = project_qkv(tape, pv, cfg, a, a, &format!("{p}.self"))?;
        let o = softmax_heads(tape, cfg, q, k, v, None)?;
        let o = linear(tape, pv, o, &format!("{p}.self.o"))?;
        x = tape.add(x, o)?;
        let a = norm(tape, pv, x, &format!("{p}.ln2"))?;
        let f = ffn(tape, pv, a, &p)?;
        x = tape.add(x, f)?;
    }
    norm(tape, pv, x, "enc.ln")
}

/// Teacher-forced decoder logits (`dec_len×vocab`) for decoder inputs `inputs`.
pub fn decode_teacher(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    cross: &CrossAttnConfig,
    enc: Var,
    inputs: &[usize],
) -> Result<(Var, Vec<BlockTrace>)> {
    check_tokens(cfg, inputs, cfg.dec_len(), "decoder input")?;
    let e = tape.gather(pv.get("emb")?, inputs)?;
    let mut y = tape.add(e, pv.get("pos.dec")?)?;
    let mask = causal_mask(cfg.dec_len());
    let mut traces = Vec::new();
    for l in 0..cfg.layers_dec {
        let p = dec_prefix(l);
        let a = norm(tape, pv, y, &format!("{p}.ln1"))?;
        let (q, k, v) = project_qkv(tape, pv, cfg, a, a, &format!("{p}.self"))?;
        let o = softmax_heads(tape, cfg, q, k, v, Some(&mask))?;
        let o = linear(tape, pv, o, &format!("{p}.self.o"))?;
        y = tape.add(y, o)?;

        let a = norm(tape, pv, y, &format!("{p}.ln2"))?;
        let (q, k, v) = project_qkv(tape, pv, cfg, a, enc, &format!("{p}.cross"))?;
        let heads = pv.heads(cfg, l)?;
        let (o, tr) = multi_head_block(tape, cfg.variant, cross, &heads, q, k, v, None)?;
        traces.extend(tr);
        let o = linear(tape, pv, o, &format!("{p}.cross.o"))?;
        y = tape.add(y, o)?;

        let a = norm(tape, pv, y, &format!("{p}.ln3"))?;
        let f = ffn(tape, pv, a, &p)?;
        y = tape.add(y, f)?;
    }
    let y = norm(tape, pv, y, "dec.ln")?;
    Ok((linear(tape, pv, y, "out")?, traces))
}

/// Records the mean token cross-entropy of a batch. Returns the loss and the
/// cross-attention traces of every sample.
pub fn batch_loss(
    tape: &mut Tape,
    pv: &ParamVars,
    cfg: &ModelConfig,
    batch: &[SynthPair],
) -> Result<(Var, Vec<BlockTrace>)> {
    if batch.is_empty() {
        return Err(Error::Param("empty batch".into()));
    }
    let cross = cfg.cross_config()?;
    let mut logits = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len() * cfg.dec_len());
    let mut traces = Vec::new();
    for pair in batch {
        let (inputs, tgt) = pair.teacher_forcing(cfg.dec_len())?;
        let enc = encode(tape, pv, cfg, &pair.src)?;
        let (z, tr) = decode_teacher(tape, pv, cfg, &cross, enc, &inputs)?;
        logits.push(z);
        targets.extend(tgt);
        traces.extend(tr);
    }
    let all = tape.concat_rows(&logits)?;
    Ok((tape.cross_entropy(all, &targets)?, traces))
}

/// Mean token cross-entropy over the non-pad target positions of `batch`.
pub fn forward_loss(params: &Params, cfg: &ModelConfig, batch: &[SynthPair]) -> Result<f64> {
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, params, |_| false);
    let (loss, _) = batch_loss(&mut tape, &pv, cfg, batch)?;
    Ok(tape.scalar_value(loss))
}

/// Loss and gradients of the trainable tensors.
pub fn loss_and_grads(
    params: &Params,
    cfg: &ModelConfig,
    batch: &[SynthPair],
    trainable: impl Fn(&str) -> bool,
) -> Result<(f64, BTreeMap<String, Mat>)> {
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, params, &trainable);
    let (loss, _) = batch_loss(&mut tape, &pv, cfg, batch)?;
    let grads = tape.vjp(loss, &Mat::scalar(1.0))?;
    let mut out = BTreeMap::new();
    for (name, &v) in &pv.0 {
        if trainable(name) {
            out.insert(name.clone(), grads.get_or_zeros(v, tape.value(v)));
        }
    }
    Ok((tape.scalar_value(loss), out))
}

/// Teacher-forced logits for one pair, `dec_len×vocab`.
pub fn teacher_logits(
    params: &Params,
    cfg: &ModelConfig,
    src: &[usize],
    inputs: &[usize],
) -> Result<Mat> {
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, params, |_| false);
    let cross = cfg.cross_config()?;
    let enc = encode(&mut tape, &pv, cfg, src)?;
    let (z, _) = decode_teacher(&mut tape, &pv, cfg, &cross, enc, inputs)?;
    Ok(tape.value(z).clone())
}

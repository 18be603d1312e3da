//! AdamW training with a linear learning-rate decay, deterministic batching
//! and epoch-boundary checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::Mat;
use crate::raf::clamp_threshold;

use super::config::{ModelConfig, TrainConfig};
use super::data::{SynthPair, EOS};
use super::decode::greedy_decode;
use super::model::{loss_and_grads, Params};
use super::rouge::{mean_scores, rouge_scores, RougeScores};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval: Option<RougeScores>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochMetrics>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Mat>,
    pub v: BTreeMap<String, Mat>,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: Params,
    pub adam: AdamState,
    /// Epochs completed.
    pub epoch: usize,
    pub trace: TrainTrace,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::Param(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                c.version
            )));
        }
        for (name, m) in &c.params.tensors {
            if m.len() != m.rows() * m.cols() {
                return Err(Error::Param(format!(
                    "tensor '{name}' has inconsistent shape"
                )));
            }
        }
        Ok(c)
    }
}

/// Tokens up to (excluding) the first end marker; a bare end marker stands
/// for itself so the reference is never empty.
pub fn content(tokens: &[usize]) -> Vec<usize> {
    let body: Vec<usize> = tokens.iter().copied().take_while(|&t| t != EOS).collect();
    if body.is_empty() {
        vec![EOS]
    } else {
        body
    }
}

/// Mean ROUGE of greedy decodes against the targets.
pub fn evaluate(params: &Params, cfg: &ModelConfig, data: &[SynthPair]) -> Result<RougeScores> {
    let scores = data
        .iter()
        .map(|p| {
            let pred = greedy_decode(params, cfg, &p.src, cfg.dec_len())?;
            rouge_scores(&content(&pred), &content(&p.tgt))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_scores(&scores))
}

fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn adamw_step(
    params: &mut Params,
    grads: &BTreeMap<String, Mat>,
    adam: &mut AdamState,
    tc: &TrainConfig,
    lr: f64,
) {
    adam.step += 1;
    let t = adam.step as i32;
    let (b1, b2) = (tc.beta1, tc.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let scale = if tc.grad_clip > 0.0 {
        let norm = grads
            .values()
            .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > tc.grad_clip {
            tc.grad_clip / norm
        } else {
            1.0
        }
    } else {
        1.0
    };
    for (name, g) in grads {
        let p = params
            .tensors
            .get_mut(name)
            .expect("gradient for a known tensor");
        let m = adam
            .m
            .entry(name.clone())
            .or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
        let v = adam
            .v
            .entry(name.clone())
            .or_insert_with(|| Mat::zeros(g.rows(), g.cols()));
        let decay = if name.ends_with(".b") || name.ends_with(".g") {
            0.0
        } else {
            tc.weight_decay
        };
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            let gi = gi * scale;
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let update = (*mi / c1) / ((*vi / c2).sqrt() + tc.adam_eps);
            *pi -= lr * (update + decay * *pi);
        }
        if name.ends_with(".thre") {
            let th = clamp_threshold(p.get(0, 0));
            p.set(0, 0, th);
        }
    }
}

/// Trains from scratch; see [`train_from`].
pub fn train(
    model: &ModelConfig,
    tc: &TrainConfig,
    train_set: &[SynthPair],
    eval_set: &[SynthPair],
) -> Result<(Params, TrainTrace)> {
    let start = fresh_checkpoint(model, tc)?;
    let ck = train_from(start, train_set, eval_set, tc.epochs)?;
    Ok((ck.params, ck.trace))
}

pub fn fresh_checkpoint(model: &ModelConfig, tc: &TrainConfig) -> Result<Checkpoint> {
    model.validate()?;
    tc.validate()?;
    Ok(Checkpoint {
        version: CHECKPOINT_VERSION,
        model: model.clone(),
        train: tc.clone(),
        params: Params::init(model, tc.seed)?,
        adam: AdamState::default(),
        epoch: 0,
        trace: TrainTrace::default(),
    })
}

/// Continues `ck` until `until_epoch` epochs are complete (capped at the
/// configured total). Stopping and resuming at any epoch boundary gives the
/// same result as an uninterrupted run.
pub fn train_from(
    mut ck: Checkpoint,
    train_set: &[SynthPair],
    eval_set: &[SynthPair],
    until_epoch: usize,
) -> Result<Checkpoint> {
    if train_set.is_empty() {
        return Err(Error::Param("training set is empty".into()));
    }
    let model = ck.model.clone();
    let tc = ck.train.clone();
    let per_epoch = train_set.len().div_ceil(tc.batch_size);
    let total_steps = (per_epoch * tc.epochs).max(1);
    let trainable = |n: &str| !tc.is_frozen(n);
    let any_trainable = ck.params.tensors.keys().any(|n| trainable(n));
    let end = until_epoch.min(tc.epochs);
    while ck.epoch < end {
        let epoch = ck.epoch;
        let order = epoch_order(tc.seed, epoch, train_set.len());
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
            let step = epoch * per_epoch + b;
            let mut members = chunk.to_vec();
            members.sort_unstable();
            let batch: Vec<SynthPair> = members.iter().map(|&i| train_set[i].clone()).collect();
            let (loss, grads) = match loss_and_grads(&ck.params, &model, &batch, trainable) {
                Err(Error::Domain { .. }) => {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        loss: f64::NAN,
                    })
                }
                other => other?,
            };
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            if any_trainable {
                let lr = tc.lr * (1.0 - step as f64 / total_steps as f64);
                adamw_step(&mut ck.params, &grads, &mut ck.adam, &tc, lr);
                if !ck.params.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        loss: f64::NAN,
                    });
                }
            }
            ck.trace.step_losses.push(loss);
            sum += loss;
        }
        ck.epoch += 1;
        let eval_now = tc.eval_every > 0
            && !eval_set.is_empty()
            && (ck.epoch.is_multiple_of(tc.eval_every) || ck.epoch == tc.epochs);
        let eval = if eval_now {
            Some(evaluate(&ck.params, &model, eval_set)?)
        } else {
            None
        };
        ck.trace.epochs.push(EpochMetrics {
            epoch,
            train_loss: sum / per_epoch as f64,
            eval,
        });
    }
    Ok(ck)
}

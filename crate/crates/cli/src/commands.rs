//! Bench, train, ablate and decode.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use srformer_core::attention::AttnDims;
use srformer_core::seq2seq::{
    content, evaluate, forward_loss, fresh_checkpoint, greedy_decode, median, rouge_scores,
    train_from, Checkpoint, Experiment, RougeScores, TrainConfig,
};
use srformer_core::srformer::{
    measured_cost, theoretical_cost, Ablation, CrossAttnConfig, CrossVariant,
};

use crate::error::CliError;
use crate::output::{save_rows, tokens};
use crate::spec::{BenchPoint, Emit};

/// Column schema of `bench.csv`.
#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub q: usize,
    pub k: usize,
    pub d: usize,
    pub s: usize,
    pub variant: CrossVariant,
    pub theoretical_macs: u64,
    pub measured_macs: u64,
    pub mem_elems: u64,
    pub wall_time_s: f64,
}

pub fn bench(points: &[BenchPoint], only: Option<CrossVariant>) -> Result<Vec<BenchRow>, CliError> {
    if points.is_empty() {
        return Err(CliError::Usage("bench sweep is empty".into()));
    }
    let mut rows = Vec::new();
    for p in points {
        let dims = AttnDims::new(p.q, p.k, p.d, p.s)?;
        let cfg = CrossAttnConfig::new(dims);
        for theory in theoretical_cost(&dims) {
            if only.is_some_and(|v| v != theory.variant) {
                continue;
            }
            let t = Instant::now();
            let measured = measured_cost(theory.variant, &cfg, 0)?;
            rows.push(BenchRow {
                q: p.q,
                k: p.k,
                d: p.d,
                s: p.s,
                variant: theory.variant,
                theoretical_macs: theory.macs,
                measured_macs: measured.dominant_macs,
                mem_elems: theory.mem_elems,
                wall_time_s: t.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(rows)
}

/// Column schema of `metrics.csv`: one row per (seed, epoch).
#[derive(Clone, Debug, Serialize)]
pub struct MetricRow {
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub rouge1: Option<f64>,
    pub rouge2: Option<f64>,
    #[serde(rename = "rougeL")]
    pub rouge_l: Option<f64>,
}

/// Column schema of `summary.csv` and `ablation_runs.csv`.
#[derive(Clone, Debug, Serialize)]
pub struct RunRow {
    pub mode: &'static str,
    pub variant: CrossVariant,
    pub segment_size: usize,
    pub seed: u64,
    pub train_loss: f64,
    pub eval_loss: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
}

struct SeedRun {
    metrics: Vec<MetricRow>,
    summary: RunRow,
}

fn run_seed(exp: &Experiment, seed: u64, ckpt_dir: Option<&Path>) -> Result<SeedRun, CliError> {
    let (train_set, eval_set) = exp.datasets()?;
    let tc = TrainConfig {
        seed,
        ..exp.train.clone()
    };
    let start = fresh_checkpoint(&exp.model, &tc)?;
    let ck = train_from(start, &train_set, &eval_set, tc.epochs)?;
    if let Some(dir) = ckpt_dir {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        ck.save(&dir.join(format!("checkpoint_seed{seed}.json")))?;
    }
    let metrics = ck
        .trace
        .epochs
        .iter()
        .map(|e| MetricRow {
            seed,
            epoch: e.epoch,
            train_loss: e.train_loss,
            rouge1: e.eval.as_ref().map(|r| r.rouge1),
            rouge2: e.eval.as_ref().map(|r| r.rouge2),
            rouge_l: e.eval.as_ref().map(|r| r.rouge_l),
        })
        .collect();
    let eval = if eval_set.is_empty() {
        RougeScores {
            rouge1: f64::NAN,
            rouge2: f64::NAN,
            rouge_l: f64::NAN,
        }
    } else {
        evaluate(&ck.params, &exp.model, &eval_set)?
    };
    let eval_loss = if eval_set.is_empty() {
        f64::NAN
    } else {
        forward_loss(&ck.params, &exp.model, &eval_set)?
    };
    let m = &exp.model;
    Ok(SeedRun {
        metrics,
        summary: RunRow {
            mode: m.ablation.label(),
            variant: m.variant,
            segment_size: m.segment_size,
            seed,
            train_loss: ck.trace.epochs.last().map_or(f64::NAN, |e| e.train_loss),
            eval_loss,
            rouge1: eval.rouge1,
            rouge2: eval.rouge2,
            rouge_l: eval.rouge_l,
        },
    })
}

pub fn train(
    exp: &Experiment,
    seeds: &[u64],
    out: &Path,
    emit: Emit,
) -> Result<Vec<RunRow>, CliError> {
    let mut metrics = Vec::new();
    let mut summary = Vec::new();
    for &seed in seeds {
        let r = run_seed(exp, seed, Some(out))?;
        eprintln!(
            "seed {seed}: train loss {:.4}, eval rouge1 {:.4}",
            r.summary.train_loss, r.summary.rouge1
        );
        metrics.extend(r.metrics);
        summary.push(r.summary);
    }
    save_rows(out, "metrics", emit, &metrics)?;
    save_rows(out, "summary", emit, &summary)?;
    Ok(summary)
}

/// Column schema of `ablation.csv`.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub mode: &'static str,
    pub seeds: usize,
    pub median_rouge1: f64,
    pub median_rouge2: f64,
    #[serde(rename = "median_rougeL")]
    pub median_rouge_l: f64,
    pub median_eval_loss: f64,
    /// 1 is the highest median rouge1.
    pub rank: usize,
}

pub fn ablate(
    exp: &Experiment,
    seeds: &[u64],
    out: &Path,
    emit: Emit,
) -> Result<Vec<AblationRow>, CliError> {
    let mut runs = Vec::new();
    let mut table = Vec::new();
    for mode in Ablation::ALL {
        let e = exp.clone().with_ablation(mode);
        let rows: Vec<RunRow> = seeds
            .iter()
            .map(|&seed| run_seed(&e, seed, None).map(|r| r.summary))
            .collect::<Result<_, _>>()?;
        let med = |f: fn(&RunRow) -> f64| median(&rows.iter().map(f).collect::<Vec<_>>());
        table.push(AblationRow {
            mode: mode.label(),
            seeds: rows.len(),
            median_rouge1: med(|r| r.rouge1),
            median_rouge2: med(|r| r.rouge2),
            median_rouge_l: med(|r| r.rouge_l),
            median_eval_loss: med(|r| r.eval_loss),
            rank: 0,
        });
        eprintln!(
            "{mode}: median rouge1 {:.4}",
            table.last().map_or(f64::NAN, |r| r.median_rouge1)
        );
        runs.extend(rows);
    }
    for i in 0..table.len() {
        let mine = table[i].median_rouge1;
        table[i].rank = 1 + table.iter().filter(|r| r.median_rouge1 > mine).count();
    }
    save_rows(out, "ablation_runs", emit, &runs)?;
    save_rows(out, "ablation", emit, &table)?;
    Ok(table)
}

/// Column schema of `decoded.csv`.
#[derive(Clone, Debug, Serialize)]
pub struct DecodedRow {
    pub index: usize,
    pub prediction: String,
    pub reference: String,
    pub rouge1: f64,
}

pub fn decode(
    exp: &Experiment,
    checkpoint: &Path,
    samples: usize,
    out: &Path,
    emit: Emit,
) -> Result<Vec<DecodedRow>, CliError> {
    if !checkpoint.is_file() {
        return Err(CliError::Runtime(format!(
            "checkpoint not found: {}",
            checkpoint.display()
        )));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let data = Experiment {
        n_eval: samples,
        model: ck.model.clone(),
        ..exp.clone()
    };
    let eval_set = data.eval_set()?;
    let mut rows = Vec::new();
    for (index, pair) in eval_set.iter().enumerate() {
        let pred = greedy_decode(&ck.params, &ck.model, &pair.src, ck.model.dec_len())?;
        let reference = content(&pair.tgt);
        rows.push(DecodedRow {
            index,
            prediction: tokens(&pred),
            reference: tokens(&pair.tgt),
            rouge1: rouge_scores(&content(&pred), &reference)?.rouge1,
        });
    }
    save_rows(out, "decoded", emit, &rows)?;
    Ok(rows)
}

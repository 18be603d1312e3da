//! Synthetic compression tasks with a fixed token layout.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MARK: usize = 3;
pub const FIRST_CONTENT: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Target is the token after each marker, in order.
    MarkedCopy,
    /// Target is every `(src_len / tgt_len)`-th source token.
    StridedPick,
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "marked-copy" => Ok(Task::MarkedCopy),
            "strided-pick" => Ok(Task::StridedPick),
            other => Err(Error::Param(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthPair {
    pub src: Vec<usize>,
    /// Content tokens followed by [`EOS`].
    pub tgt: Vec<usize>,
}

impl SynthPair {
    /// Decoder inputs (`BOS` then the target shifted right) and per-step
    /// targets, both padded to `dec_len`. Padded steps have no target.
    pub fn teacher_forcing(&self, dec_len: usize) -> Result<(Vec<usize>, Vec<Option<usize>>)> {
        if self.tgt.len() > dec_len {
            return Err(Error::shape(
                "teacher_forcing",
                (self.tgt.len(), 1),
                (dec_len, 1),
            ));
        }
        let mut inputs = Vec::with_capacity(dec_len);
        inputs.push(BOS);
        inputs.extend_from_slice(&self.tgt[..self.tgt.len() - 1]);
        inputs.resize(dec_len, PAD);
        let mut targets: Vec<Option<usize>> = self.tgt.iter().map(|&t| Some(t)).collect();
        targets.resize(dec_len, None);
        Ok((inputs, targets))
    }
}

impl Task {
    /// Applies the task rule to a source sequence.
    pub fn target(self, src: &[usize], tgt_len: usize) -> Result<Vec<usize>> {
        let mut tgt = match self {
            Task::StridedPick => {
                if tgt_len == 0 || src.len() < tgt_len {
                    return Err(Error::Param(format!(
                        "strided-pick needs tgt_len in 1..={}, got {tgt_len}",
                        src.len()
                    )));
                }
                let stride = src.len() / tgt_len;
                (0..tgt_len).map(|j| src[j * stride + stride - 1]).collect()
            }
            Task::MarkedCopy => src
                .windows(2)
                .filter(|w| w[0] == MARK)
                .map(|w| w[1])
                .take(tgt_len)
                .collect::<Vec<_>>(),
        };
        tgt.push(EOS);
        Ok(tgt)
    }

    fn sample_src(
        self,
        rng: &mut ChaCha8Rng,
        src_len: usize,
        tgt_len: usize,
        vocab: usize,
    ) -> Vec<usize> {
        let mut src: Vec<usize> = (0..src_len)
            .map(|_| rng.gen_range(FIRST_CONTENT..vocab))
            .collect();
        if self == Task::MarkedCopy && src_len >= 2 {
            let wanted = rng.gen_range(0..=tgt_len);
            let mut positions: Vec<usize> = (0..src_len - 1).collect();
            positions.shuffle(rng);
            let mut taken = vec![false; src_len];
            let mut placed = 0;
            for p in positions {
                if placed == wanted {
                    break;
                }
                let clear = !taken[p] && !taken[p + 1] && (p == 0 || !taken[p - 1]);
                if clear {
                    taken[p] = true;
                    src[p] = MARK;
                    placed += 1;
                }
            }
        }
        src
    }
}

/// `n` pairs, deterministic in `(task, seed, index)`: sample `j` draws from
/// its own ChaCha stream, so prefixes of larger datasets agree.
pub fn make_synthetic(
    task: Task,
    seed: u64,
    n: usize,
    src_len: usize,
    tgt_len: usize,
    vocab: usize,
) -> Result<Vec<SynthPair>> {
    if n == 0 {
        return Err(Error::Param("dataset size must be at least 1".into()));
    }
    if vocab <= FIRST_CONTENT {
        return Err(Error::Param(format!(
            "vocab {vocab} leaves no content tokens"
        )));
    }
    (0..n)
        .map(|j| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(j as u64);
            let src = task.sample_src(&mut rng, src_len, tgt_len, vocab);
            let tgt = task.target(&src, tgt_len)?;
            Ok(SynthPair { src, tgt })
        })
        .collect()
}

/// One JSON object per line.
pub fn save_jsonl(path: &Path, pairs: &[SynthPair]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_jsonl(path: &Path) -> Result<Vec<SynthPair>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

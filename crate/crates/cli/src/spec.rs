//! Run specifications and the manifests written beside every output.

use std::fs;
use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use srformer_core::seq2seq::Experiment;

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Verify,
    Bench,
    Train,
    Ablate,
    Decode,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Verify => "verify",
            Command::Bench => "bench",
            Command::Train => "train",
            Command::Ablate => "ablate",
            Command::Decode => "decode",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Emit {
    #[default]
    Csv,
    Json,
}

impl Emit {
    pub fn extension(self) -> &'static str {
        match self {
            Emit::Csv => "csv",
            Emit::Json => "json",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    /// Decomposition, error and partition identities.
    Identity,
    /// Whole-sequence vs stepwise cross attention.
    Equivalence,
    /// Tape gradients vs central differences.
    Gradient,
    /// Closed-form and measured MAC counts.
    Cost,
    /// Accumulate-and-fire hand trace.
    Raf,
    /// ROUGE hand cases.
    Rouge,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Identity,
        Suite::Equivalence,
        Suite::Gradient,
        Suite::Cost,
        Suite::Raf,
        Suite::Rouge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Identity => "identity",
            Suite::Equivalence => "equivalence",
            Suite::Gradient => "gradient",
            Suite::Cost => "cost",
            Suite::Raf => "raf",
            Suite::Rouge => "rouge",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchPoint {
    pub q: usize,
    pub k: usize,
    pub d: usize,
    pub s: usize,
}

/// The cost-table reference point, a segment-size sweep around it, and two
/// small shapes.
pub fn default_bench_points() -> Vec<BenchPoint> {
    let mut points = vec![BenchPoint {
        q: 128,
        k: 1024,
        d: 64,
        s: 64,
    }];
    for s in [8, 16] {
        points.push(BenchPoint {
            q: 128,
            k: 1024,
            d: 64,
            s,
        });
    }
    points.push(BenchPoint {
        q: 16,
        k: 64,
        d: 8,
        s: 8,
    });
    points.push(BenchPoint {
        q: 32,
        k: 256,
        d: 16,
        s: 8,
    });
    points
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Versions {
    pub cli: String,
    pub core: String,
}

impl Versions {
    pub fn current() -> Self {
        Versions {
            cli: env!("CARGO_PKG_VERSION").to_string(),
            core: srformer_core::VERSION.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSpec {
    pub command: Option<Command>,
    pub experiment: Experiment,
    /// Empty means the command's default (`[0]`, or `[0, 1, 2]` for ablate).
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub emit: Emit,
    /// Verify suites to run; empty means all.
    pub suites: Vec<Suite>,
    /// Corrupts every verify measurement so the suites must fail.
    pub inject_fault: bool,
    /// Bench sweep; empty means [`default_bench_points`].
    pub bench: Vec<BenchPoint>,
    pub checkpoint: Option<PathBuf>,
    pub decode_samples: usize,
    /// Filled in when the spec is written as a manifest.
    pub versions: Option<Versions>,
}

impl Default for RunSpec {
    fn default() -> Self {
        RunSpec {
            command: None,
            experiment: Experiment::desk_scale(),
            seeds: Vec::new(),
            out: None,
            emit: Emit::Csv,
            suites: Vec::new(),
            inject_fault: false,
            bench: Vec::new(),
            checkpoint: None,
            decode_samples: 8,
            versions: None,
        }
    }
}

impl RunSpec {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    /// Fills every defaulted field so the manifest alone reproduces the run.
    pub fn resolve(&mut self, command: Command) {
        self.command = Some(command);
        if self.seeds.is_empty() {
            self.seeds = match command {
                Command::Ablate => vec![0, 1, 2],
                _ => vec![0],
            };
        }
        if command == Command::Verify && self.suites.is_empty() {
            self.suites = Suite::ALL.to_vec();
        }
        if command == Command::Bench && self.bench.is_empty() {
            self.bench = default_bench_points();
        }
        self.versions = Some(Versions::current());
    }

    pub fn write_manifest(&self, dir: &Path) -> Result<PathBuf, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join("manifest.json");
        let text =
            serde_json::to_string_pretty(self).map_err(|e| CliError::Runtime(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_fields_rejected() {
        let err = serde_json::from_str::<RunSpec>(r#"{"seedz": [1]}"#).unwrap_err();
        assert!(err.to_string().contains("seedz"));
        assert!(serde_json::from_str::<RunSpec>(r#"{"experiment": {"modell": {}}}"#).is_err());
    }

    #[test]
    fn resolved_spec_round_trips() {
        let mut spec = RunSpec::default();
        spec.resolve(Command::Bench);
        assert_eq!(spec.seeds, vec![0]);
        assert_eq!(
            spec.bench[0],
            BenchPoint {
                q: 128,
                k: 1024,
                d: 64,
                s: 64
            }
        );
        let text = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<RunSpec>(&text).unwrap(), spec);
    }

    #[test]
    fn ablate_defaults_to_three_seeds() {
        let mut spec = RunSpec::default();
        spec.resolve(Command::Ablate);
        assert_eq!(spec.seeds, vec![0, 1, 2]);
    }
}

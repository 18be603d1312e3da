//! `srformer`: verification suites, cost benchmarks, training, ablation
//! sweeps and decoding for segmented recurrent cross-attention.
//!
//! Exit codes: 0 success, 1 a verify suite failed, 2 usage or config error,
//! 3 runtime error.

mod commands;
mod error;
mod output;
mod spec;
mod verify;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use srformer_core::srformer::{Ablation, CrossVariant};

use crate::error::CliError;
use crate::spec::{Command, Emit, RunSpec, Suite};

#[derive(Debug, Parser)]
#[command(
    name = "srformer",
    version,
    about = "Segmented recurrent cross-attention toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,

    /// JSON run spec; flags given on the command line override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the spec's seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; a manifest.json is written there too.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    emit: Option<Emit>,
    /// full, segmented or srformer.
    #[arg(long, global = true)]
    variant: Option<String>,
    #[arg(long, global = true)]
    segment_size: Option<usize>,
    /// I, II, III, IV or none.
    #[arg(long, global = true)]
    ablation: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run the invariant suites; exits 1 if any fails.
    Verify {
        /// Restrict to these suites (repeatable).
        #[arg(long, value_enum)]
        suite: Vec<Suite>,
        /// Corrupt every measurement; used to check that failures surface.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Closed-form vs measured MACs over a dimension sweep.
    Bench,
    /// Train the toy model and write checkpoints and metrics.
    Train,
    /// Train every ablation mode on the same data and seeds.
    Ablate,
    /// Greedy-decode held-out samples from a checkpoint.
    Decode {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Re-execute the command recorded in a manifest (`--config`).
    Run,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("srformer: {e}");
            e.exit_code()
        }
    }
}

fn build_spec(cli: &Cli) -> Result<(Command, RunSpec), CliError> {
    let mut spec = match &cli.config {
        Some(p) => RunSpec::load(p)?,
        None => RunSpec::default(),
    };
    let command = match &cli.command {
        Cmd::Verify { .. } => Command::Verify,
        Cmd::Bench => Command::Bench,
        Cmd::Train => Command::Train,
        Cmd::Ablate => Command::Ablate,
        Cmd::Decode { .. } => Command::Decode,
        Cmd::Run => spec.command.ok_or_else(|| {
            CliError::Usage("`run` needs a --config whose spec names a command".into())
        })?,
    };
    if let Some(recorded) = spec.command {
        if recorded != command {
            return Err(CliError::Usage(format!(
                "config is for `{}` but `{}` was requested",
                recorded.name(),
                command.name()
            )));
        }
    }
    match &cli.command {
        Cmd::Verify {
            suite,
            inject_fault,
        } => {
            if !suite.is_empty() {
                spec.suites = suite.clone();
            }
            spec.inject_fault |= inject_fault;
        }
        Cmd::Decode {
            checkpoint,
            samples,
        } => {
            if let Some(c) = checkpoint {
                spec.checkpoint = Some(c.clone());
            }
            if let Some(n) = samples {
                spec.decode_samples = *n;
            }
        }
        _ => {}
    }
    if let Some(seed) = cli.seed {
        spec.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        spec.out = Some(out.clone());
    }
    if let Some(emit) = cli.emit {
        spec.emit = emit;
    }
    let model = &mut spec.experiment.model;
    if let Some(v) = &cli.variant {
        model.variant = v
            .parse::<CrossVariant>()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(s) = cli.segment_size {
        model.segment_size = s;
        for p in &mut spec.bench {
            p.s = s;
        }
    }
    if let Some(a) = &cli.ablation {
        model.ablation = a
            .parse::<Ablation>()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if command == Command::Ablate
        && (cli.ablation.is_some() || model.variant != CrossVariant::Srformer)
    {
        return Err(CliError::Usage(
            "ablate sweeps every mode of the srformer variant".into(),
        ));
    }
    if matches!(command, Command::Train | Command::Ablate | Command::Decode) {
        spec.experiment
            .model
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        spec.experiment
            .train
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    spec.resolve(command);
    if command == Command::Bench && cli.segment_size.is_some() {
        let s = spec.experiment.model.segment_size;
        spec.bench.iter_mut().for_each(|p| p.s = s);
        spec.bench.dedup();
    }
    Ok((command, spec))
}

fn require_out(spec: &RunSpec) -> Result<&Path, CliError> {
    spec.out
        .as_deref()
        .ok_or_else(|| CliError::Usage("this command needs --out (or `out` in the config)".into()))
}

fn dispatch(cli: Cli) -> Result<ExitCode, CliError> {
    let (command, spec) = build_spec(&cli)?;
    if let Some(out) = &spec.out {
        spec.write_manifest(out)?;
    }
    match command {
        Command::Verify => {
            let reports: Vec<_> = spec
                .suites
                .iter()
                .map(|&s| verify::run_suite(s, spec.inject_fault))
                .collect();
            for r in &reports {
                for c in &r.checks {
                    println!(
                        "{} {}/{}: {}",
                        if c.passed { "PASS" } else { "FAIL" },
                        c.suite,
                        c.check,
                        c.detail
                    );
                }
            }
            let rows: Vec<_> = reports.iter().flat_map(|r| r.checks.clone()).collect();
            let summary: Vec<_> = reports
                .iter()
                .map(|r| serde_json::json!({ "suite": r.suite, "passed": r.passed }))
                .collect();
            println!("{}", serde_json::to_string(&summary)?);
            if let Some(out) = &spec.out {
                output::save_rows(out, "verify", spec.emit, &rows)?;
            }
            let ok = reports.iter().all(|r| r.passed);
            Ok(if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            })
        }
        Command::Bench => {
            let only = cli
                .variant
                .is_some()
                .then_some(spec.experiment.model.variant);
            let rows = commands::bench(&spec.bench, only)?;
            match &spec.out {
                Some(out) => {
                    let path = output::save_rows(out, "bench", spec.emit, &rows)?;
                    eprintln!("wrote {}", path.display());
                }
                None => output::print_rows(spec.emit, &rows)?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Train => {
            let out = require_out(&spec)?;
            commands::train(&spec.experiment, &spec.seeds, out, spec.emit)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate => {
            let out = require_out(&spec)?;
            let table = commands::ablate(&spec.experiment, &spec.seeds, out, spec.emit)?;
            println!("mode      median_rouge1  rank");
            for r in &table {
                println!("{:<9} {:>13.4}  {}", r.mode, r.median_rouge1, r.rank);
            }
            let best = table
                .iter()
                .find(|r| r.mode == Ablation::FullSr.label())
                .is_some_and(|r| r.rank == 1);
            println!("full-sr best: {best}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Decode => {
            let out = require_out(&spec)?;
            let ckpt = spec
                .checkpoint
                .as_deref()
                .ok_or_else(|| CliError::Usage("decode needs --checkpoint".into()))?;
            let rows =
                commands::decode(&spec.experiment, ckpt, spec.decode_samples, out, spec.emit)?;
            eprintln!("decoded {} samples", rows.len());
            Ok(ExitCode::SUCCESS)
        }
    }
}

//! Row output in CSV (header row, LF endings) or JSON (an array of objects
//! with the same keys).

use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::CliError;
use crate::spec::Emit;

pub fn write_rows<T: Serialize>(w: impl Write, emit: Emit, rows: &[T]) -> Result<(), CliError> {
    match emit {
        Emit::Csv => {
            let mut wr = csv::WriterBuilder::new()
                .terminator(csv::Terminator::Any(b'\n'))
                .from_writer(w);
            for r in rows {
                wr.serialize(r)?;
            }
            wr.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
        }
        Emit::Json => {
            let mut w = w;
            serde_json::to_writer_pretty(&mut w, rows)?;
            writeln!(w).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
    }
    Ok(())
}

/// Writes `rows` to `dir/stem.{csv,json}` and returns the path.
pub fn save_rows<T: Serialize>(
    dir: &Path,
    stem: &str,
    emit: Emit,
    rows: &[T],
) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let path = dir.join(format!("{stem}.{}", emit.extension()));
    let f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    write_rows(io::BufWriter::new(f), emit, rows)?;
    Ok(path)
}

pub fn print_rows<T: Serialize>(emit: Emit, rows: &[T]) -> Result<(), CliError> {
    write_rows(io::stdout().lock(), emit, rows)
}

/// Space-separated token ids.
pub fn tokens(ts: &[usize]) -> String {
    ts.iter()
        .map(|t| t.to_string())
        .collect::<Vec<_>>()
        .join(" ")
}

//! Per-round ledger, floats-to-target metric and CSV export.

use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

/// Column names of the exported CSV, in order.
pub const CSV_COLUMNS: [&str; 7] = [
    "round",
    "train_loss",
    "train_acc",
    "grad_norm",
    "up_floats",
    "down_floats",
    "ms",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundRecord {
    pub round: u32,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub grad_norm: f64,
    pub cumulative_upload_floats: u64,
    pub cumulative_download_floats: u64,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoundLedger {
    rows: Vec<RoundRecord>,
}

impl RoundLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a row; rounds must strictly increase and counters must not decrease.
    pub fn push(&mut self, row: RoundRecord) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.round <= last.round
                || row.cumulative_upload_floats < last.cumulative_upload_floats
                || row.cumulative_download_floats < last.cumulative_download_floats
            {
                return Err(Error::Validation(format!(
                    "ledger row for round {} breaks monotonicity after round {}",
                    row.round, last.round
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[RoundRecord] {
        &self.rows
    }

    pub fn last(&self) -> Option<&RoundRecord> {
        self.rows.last()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Target {
    /// Reached at the first row with `train_loss <= value`.
    Loss(f64),
    /// Reached at the first row with `train_acc >= value`.
    Accuracy(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FloatsToTarget {
    Reached(u64),
    Never,
}

impl FloatsToTarget {
    pub fn as_f64(self) -> f64 {
        match self {
            FloatsToTarget::Reached(n) => n as f64,
            FloatsToTarget::Never => f64::INFINITY,
        }
    }
}

impl fmt::Display for FloatsToTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FloatsToTarget::Reached(n) => write!(f, "{n}"),
            FloatsToTarget::Never => f.write_str("inf"),
        }
    }
}

/// Cumulative upload floats at the first row meeting `target`.
pub fn floats_to_target(ledger: &RoundLedger, target: Target) -> Result<FloatsToTarget> {
    if ledger.is_empty() {
        return Err(Error::EmptyLedger);
    }
    let hit = ledger.rows().iter().find(|r| match target {
        Target::Loss(v) => r.train_loss <= v,
        Target::Accuracy(a) => r.train_accuracy >= a,
    });
    Ok(hit.map_or(FloatsToTarget::Never, |r| {
        FloatsToTarget::Reached(r.cumulative_upload_floats)
    }))
}

/// 17 significant digits; always '.' as the decimal point.
pub fn format_float(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

pub fn write_ledger<W: std::io::Write>(ledger: &RoundLedger, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| Error::Validation(format!("csv write failed: {e}"));
    w.write_record(CSV_COLUMNS).map_err(io)?;
    for r in ledger.rows() {
        w.write_record([
            r.round.to_string(),
            format_float(r.train_loss),
            format_float(r.train_accuracy),
            format_float(r.grad_norm),
            r.cumulative_upload_floats.to_string(),
            r.cumulative_download_floats.to_string(),
            r.wall_time_ms.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush()
        .map_err(|e| Error::Validation(format!("csv flush failed: {e}")))
}

pub fn export_csv(ledger: &RoundLedger, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_ledger(ledger, std::io::BufWriter::new(file))
}

pub fn ledger_to_string(ledger: &RoundLedger) -> Result<String> {
    let mut buf = Vec::new();
    write_ledger(ledger, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is ASCII"))
}

pub fn import_csv(path: impl AsRef<Path>) -> Result<RoundLedger> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Parse {
        line: 0,
        message: e.to_string(),
    })?;
    let header = rdr
        .headers()
        .map_err(|e| Error::Parse { line: 1, message: e.to_string() })?
        .clone();
    if header.iter().ne(CSV_COLUMNS) {
        return Err(Error::Parse {
            line: 1,
            message: format!("unexpected ledger header {header:?}"),
        });
    }
    let mut ledger = RoundLedger::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        let field = |k: usize| -> Result<&str> {
            rec.get(k).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing column {}", CSV_COLUMNS[k]),
            })
        };
        let bad = |k: usize| Error::Parse {
            line,
            message: format!("bad value in column {}", CSV_COLUMNS[k]),
        };
        let float = |k: usize| -> Result<f64> { field(k)?.parse().map_err(|_| bad(k)) };
        let int = |k: usize| -> Result<u64> { field(k)?.parse().map_err(|_| bad(k)) };
        ledger.push(RoundRecord {
            round: int(0)? as u32,
            train_loss: float(1)?,
            train_accuracy: float(2)?,
            grad_norm: float(3)?,
            cumulative_upload_floats: int(4)?,
            cumulative_download_floats: int(5)?,
            wall_time_ms: int(6)?,
        })?;
    }
    Ok(ledger)
}

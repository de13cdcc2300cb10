//! CSV datasets, grid specifications and atomic file output.

use std::io::Write;
use std::path::Path;

use ggpm::efd::{LikelihoodFamily, Support};
use nalgebra::DMatrix;

use crate::config::UNIT_CLAMP;
use crate::error::CliError;

/// Name of the output column.
pub const OUTPUT_COLUMN: &str = "y";
/// Latent column written by `sample`; skipped on load.
pub const LATENT_COLUMN: &str = "eta";

/// Inputs and (optionally) outputs loaded from a CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Input column names in file order.
    pub columns: Vec<String>,
    pub x: DMatrix<f64>,
    pub y: Option<Vec<f64>>,
    /// File line of each data row.
    pub lines: Vec<u64>,
    pub source: String,
}

impl Dataset {
    /// Reads a CSV with a header row. Every column except `y` and `eta` is an
    /// input; all entries must parse as finite numbers.
    pub fn load(path: &str) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::Validation(format!("{path}: {e}")))?;
        Self::parse(&bytes, path)
    }

    pub fn parse(bytes: &[u8], source: &str) -> Result<Self, CliError> {
        let invalid = |msg: String| CliError::Validation(format!("{source}: {msg}"));
        let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(bytes);
        let header = reader.headers().map_err(|e| invalid(e.to_string()))?.clone();
        if header.iter().all(|h| h.is_empty()) {
            return Err(invalid("missing header row".into()));
        }
        let mut columns = Vec::new();
        let mut input_idx = Vec::new();
        let mut y_idx = None;
        for (j, name) in header.iter().enumerate() {
            if name.is_empty() {
                return Err(invalid(format!("line 1: column {} has an empty name", j + 1)));
            }
            if header.iter().take(j).any(|h| h == name) {
                return Err(invalid(format!("line 1: duplicate column '{name}'")));
            }
            match name {
                OUTPUT_COLUMN => y_idx = Some(j),
                LATENT_COLUMN => {}
                _ => {
                    columns.push(name.to_string());
                    input_idx.push(j);
                }
            }
        }
        let mut rows = Vec::new();
        let mut ys = Vec::new();
        let mut lines = Vec::new();
        for (r, record) in reader.records().enumerate() {
            let record = record.map_err(|e| invalid(e.to_string()))?;
            let line = record.position().map_or(r as u64 + 2, |p| p.line());
            let field = |j: usize| -> Result<f64, CliError> {
                let text = record.get(j).unwrap_or("");
                match text.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(invalid(format!(
                        "line {line} (row {}): column '{}' value '{text}' is not a finite number",
                        r + 1,
                        &header[j]
                    ))),
                }
            };
            if record.len() != header.len() {
                return Err(invalid(format!(
                    "line {line} (row {}): expected {} fields, found {}",
                    r + 1,
                    header.len(),
                    record.len()
                )));
            }
            rows.push(input_idx.iter().map(|&j| field(j)).collect::<Result<Vec<f64>, _>>()?);
            if let Some(j) = y_idx {
                ys.push(field(j)?);
            }
            lines.push(line);
        }
        let x = DMatrix::from_fn(rows.len(), columns.len(), |i, j| rows[i][j]);
        Ok(Self { columns, x, y: y_idx.map(|_| ys), lines, source: source.to_string() })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Outputs, or a validation error when the file has no `y` column.
    pub fn outputs(&self) -> Result<&[f64], CliError> {
        self.y.as_deref().ok_or_else(|| CliError::Validation(format!("{}: no '{OUTPUT_COLUMN}' column", self.source)))
    }

    /// Checks every output against the likelihood's support, optionally
    /// clamping unit-interval outputs into [1e-6, 1 - 1e-6] first.
    pub fn validate_outputs(
        &mut self,
        lik: &LikelihoodFamily,
        clamp_unit: bool,
        lik_name: &str,
    ) -> Result<(), CliError> {
        let source = self.source.clone();
        let Some(y) = self.y.as_mut() else {
            return Ok(());
        };
        for (r, v) in y.iter_mut().enumerate() {
            if clamp_unit && lik.support() == Support::UnitInterval {
                *v = v.clamp(UNIT_CLAMP, 1.0 - UNIT_CLAMP);
            }
            if lik.check_support(*v).is_err() {
                return Err(CliError::Validation(format!(
                    "{source}: line {} (row {}): y = {v} is outside the support of {lik_name} ({})",
                    self.lines[r],
                    r + 1,
                    lik.support().describe()
                )));
            }
        }
        Ok(())
    }

    /// Input columns reordered to `names`; a missing column is a schema
    /// mismatch.
    pub fn inputs_for(&self, names: &[String]) -> Result<DMatrix<f64>, CliError> {
        let extra: Vec<&String> = self.columns.iter().filter(|c| !names.contains(c)).collect();
        let mut idx = Vec::with_capacity(names.len());
        for name in names {
            match self.columns.iter().position(|c| c == name) {
                Some(j) => idx.push(j),
                None => {
                    return Err(CliError::Validation(format!(
                        "{}: schema mismatch: model expects input columns [{}], data has [{}]",
                        self.source,
                        names.join(", "),
                        self.columns.join(", ")
                    )))
                }
            }
        }
        if !extra.is_empty() {
            return Err(CliError::Validation(format!(
                "{}: schema mismatch: unexpected input columns [{}]",
                self.source,
                extra.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(DMatrix::from_fn(self.len(), idx.len(), |i, j| self.x[(i, idx[j])]))
    }
}

/// Evenly spaced points `lo:hi:n`, both ends included.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn parse(spec: &str) -> Result<Self, CliError> {
        let bad = |why: &str| CliError::Validation(format!("invalid grid '{spec}': {why} (expected lo:hi:n)"));
        let parts: Vec<&str> = spec.trim().split(':').collect();
        if parts.len() != 3 {
            return Err(bad("wrong number of fields"));
        }
        let lo: f64 = parts[0].trim().parse().map_err(|_| bad("lo is not a number"))?;
        let hi: f64 = parts[1].trim().parse().map_err(|_| bad("hi is not a number"))?;
        let n: usize = parts[2].trim().parse().map_err(|_| bad("n is not a positive integer"))?;
        if !lo.is_finite() || !hi.is_finite() {
            return Err(bad("bounds must be finite"));
        }
        if n == 0 {
            return Err(bad("n must be positive"));
        }
        if n == 1 && lo != hi {
            return Err(bad("a single point needs lo = hi"));
        }
        if n > 1 && !(lo < hi) {
            return Err(bad("lo must be below hi"));
        }
        Ok(Self { lo, hi, n })
    }

    pub fn points(&self) -> Vec<f64> {
        if self.n == 1 {
            return vec![self.lo];
        }
        let step = (self.hi - self.lo) / (self.n - 1) as f64;
        (0..self.n).map(|i| if i + 1 == self.n { self.hi } else { self.lo + step * i as f64 }).collect()
    }

    pub fn step(&self) -> f64 {
        if self.n == 1 {
            0.0
        } else {
            (self.hi - self.lo) / (self.n - 1) as f64
        }
    }
}

/// Product grid from comma-separated axes; the last axis varies fastest.
pub fn parse_grid(spec: &str) -> Result<DMatrix<f64>, CliError> {
    let axes = spec.split(',').map(Axis::parse).collect::<Result<Vec<_>, _>>()?;
    let pts: Vec<Vec<f64>> = axes.iter().map(|a| a.points()).collect();
    let total = axes.iter().try_fold(1usize, |acc, a| acc.checked_mul(a.n));
    let total = match total {
        Some(t) if t <= 1_000_000 => t,
        _ => return Err(CliError::Validation(format!("invalid grid '{spec}': more than 10^6 points"))),
    };
    let d = axes.len();
    let mut x = DMatrix::zeros(total, d);
    for i in 0..total {
        let mut rem = i;
        for j in (0..d).rev() {
            x[(i, j)] = pts[j][rem % axes[j].n];
            rem /= axes[j].n;
        }
    }
    Ok(x)
}

/// Serializes a table as CSV with a header row.
pub fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| CliError::Numerical(format!("writing CSV: {e}"));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(r).map_err(fail)?;
    }
    w.into_inner().map_err(|e| CliError::Numerical(format!("writing CSV: {e}")))
}

/// Shortest representation that parses back to the same value.
pub fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Writes to a temporary file in the destination directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let fail = |e: std::io::Error| CliError::Validation(format!("{}: {e}", path.display()));
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(fail)?;
    tmp.write_all(bytes).map_err(fail)?;
    tmp.as_file().sync_all().map_err(fail)?;
    tmp.persist(path).map_err(|e| fail(e.error))?;
    Ok(())
}

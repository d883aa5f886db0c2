//! On-disk formats: rate tables (`n,lambda_tau` plus a JSON sidecar),
//! distributions (`n,prob`) and simulation traces.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use evcharge_core::sim::TraceRow;
use evcharge_core::{CountDistribution, RateTable, SynthesisSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const TABLE_HEADER: [&str; 2] = ["n", "lambda_tau"];
pub const DISTRIBUTION_HEADER: [&str; 2] = ["n", "prob"];
pub const TRACE_HEADER: [&str; 5] = ["replica", "interval", "boundary_count", "interval_max", "time_avg"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableMetadata {
    pub capacity: usize,
    pub overload_budget: f64,
    pub mu_tau: f64,
    pub artifact_version: String,
}

impl TableMetadata {
    pub fn from_spec(spec: &SynthesisSpec) -> Self {
        Self {
            capacity: spec.n_capacity(),
            overload_budget: spec.overload_budget(),
            mu_tau: spec.mu_tau(),
            artifact_version: evcharge_core::ARTIFACT_VERSION.to_string(),
        }
    }

    pub fn spec(&self) -> CliResult<SynthesisSpec> {
        Ok(SynthesisSpec::new(self.capacity, self.overload_budget, self.mu_tau)?)
    }
}

/// `table.csv` keeps its metadata in `table.json`.
pub fn sidecar_path(table: &Path) -> PathBuf {
    table.with_extension("json")
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    let line = e.position().map(|p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        kind => {
            let at = line.map(|l| format!(" line {l}")).unwrap_or_default();
            CliError::Validation(format!("{}:{at}: malformed CSV: {kind:?}", path.display()))
        }
    }
}

fn write_rows<I, R>(path: &Path, header: &[&str], rows: I) -> CliResult<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = csv::Writer::from_writer(create(path)?);
    let fail = |e: csv::Error| csv_error(path, e);
    w.write_record(header).map_err(fail)?;
    for row in rows {
        w.write_record(row.into_iter().collect::<Vec<_>>()).map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Reads a two-column CSV with the given header, requiring the first column
/// to count up from zero.
fn read_indexed_column(path: &Path, header: [&str; 2]) -> CliResult<Vec<f64>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let got = r.headers().map_err(|e| csv_error(path, e))?.clone();
    if got.iter().collect::<Vec<_>>() != header {
        return Err(CliError::Validation(format!(
            "{}: line 1: expected header `{}`, found `{}`",
            path.display(),
            header.join(","),
            got.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut values = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let bad = |what: &str| CliError::Validation(format!("{}: line {line}: {what}", path.display()));
        if record.len() != 2 {
            return Err(bad(&format!("expected 2 fields, found {}", record.len())));
        }
        let n: usize = record[0].parse().map_err(|_| bad(&format!("bad index `{}`", &record[0])))?;
        if n != values.len() {
            return Err(bad(&format!("expected index {}, found {n}", values.len())));
        }
        let x: f64 = record[1].parse().map_err(|_| bad(&format!("bad number `{}`", &record[1])))?;
        if !x.is_finite() {
            return Err(bad(&format!("non-finite value `{}`", &record[1])));
        }
        values.push(x);
    }
    if values.is_empty() {
        return Err(CliError::Validation(format!("{}: no data rows", path.display())));
    }
    Ok(values)
}

/// Seventeen significant digits, enough to round-trip any `f64`.
pub fn fmt_exact(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_rate_table(path: &Path, table: &RateTable, meta: &TableMetadata) -> CliResult<()> {
    write_rows(
        path,
        &TABLE_HEADER,
        table.rates().iter().enumerate().map(|(n, &r)| [n.to_string(), fmt_exact(r)]),
    )?;
    write_json(&sidecar_path(path), meta)
}

pub fn read_rate_table(path: &Path) -> CliResult<RateTable> {
    let rates = read_indexed_column(path, TABLE_HEADER)?;
    RateTable::new(rates).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

/// Sidecar metadata, if the file exists.
pub fn read_metadata(table: &Path) -> CliResult<Option<TableMetadata>> {
    let path = sidecar_path(table);
    match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text)
            .map(Some)
            .map_err(|e| CliError::Validation(format!("{}: line {}: {e}", path.display(), e.line()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(CliError::io(path, e)),
    }
}

pub fn write_distribution(path: &Path, dist: &CountDistribution) -> CliResult<()> {
    write_rows(
        path,
        &DISTRIBUTION_HEADER,
        dist.probs().iter().enumerate().map(|(n, &p)| [n.to_string(), p.to_string()]),
    )
}

pub fn read_distribution(path: &Path) -> CliResult<CountDistribution> {
    let probs = read_indexed_column(path, DISTRIBUTION_HEADER)?;
    CountDistribution::new(probs).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub fn write_trace(path: &Path, rows: impl IntoIterator<Item = TraceRow>) -> CliResult<()> {
    write_rows(
        path,
        &TRACE_HEADER,
        rows.into_iter().map(|t| {
            [
                t.replica.to_string(),
                t.interval.to_string(),
                t.boundary_count.to_string(),
                t.interval_max.to_string(),
                t.time_avg.to_string(),
            ]
        }),
    )
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut w = create(path)?;
    writeln!(w, "{}", to_json(value)).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

//! CSV ingestion and output: observation files (`t,c1..`), label files
//! (`t,label`) and ELBO traces.

use std::fs::File;
use std::path::Path;

use csv::{ReaderBuilder, StringRecord, Trim};
use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::ObservationSet;

/// One observation file: timestamps and the `T × d_z` payload.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeries {
    pub t: Vec<f64>,
    pub z: DMatrix<f64>,
    pub channels: Vec<String>,
}

impl TimeSeries {
    /// Samples per unit of `t`, from the first and last timestamps.
    pub fn sample_rate(&self) -> Option<f64> {
        let n = self.t.len();
        if n < 2 {
            return None;
        }
        let span = self.t[n - 1] - self.t[0];
        (span > 0.0).then(|| (n - 1) as f64 / span)
    }
}

fn open(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path)
        .map_err(|e| Error::InvalidInput(format!("cannot open {}: {e}", path.display())))?;
    Ok(ReaderBuilder::new()
        .trim(Trim::All)
        .flexible(true)
        .from_reader(file))
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line: line as usize,
        message: format!("{}: {}", path.display(), message.into()),
    }
}

fn record_line(rec: &StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn read_header(rdr: &mut csv::Reader<File>, path: &Path) -> Result<StringRecord> {
    let header = rdr
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if header.is_empty() || header.iter().all(str::is_empty) {
        return Err(Error::InvalidInput(format!("{} is empty", path.display())));
    }
    if &header[0] != "t" {
        return Err(parse_err(
            path,
            1,
            format!("first column must be `t`, got `{}`", &header[0]),
        ));
    }
    Ok(header)
}

/// Reads a data file with header `t,<channel>...`. Timestamps must be
/// strictly increasing; every cell must be a finite number.
pub fn load_csv(path: &Path) -> Result<TimeSeries> {
    let mut rdr = open(path)?;
    let header = read_header(&mut rdr, path)?;
    let d = header.len() - 1;
    if d == 0 {
        return Err(parse_err(path, 1, "no data channels after `t`"));
    }
    let mut t = Vec::new();
    let mut values = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record_line(&rec);
        if rec.len() != d + 1 {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", d + 1, rec.len()),
            ));
        }
        let mut row = Vec::with_capacity(d + 1);
        for (col, cell) in rec.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| {
                    parse_err(
                        path,
                        line,
                        format!("column `{}` is not a finite number: `{cell}`", &header[col]),
                    )
                })?;
            row.push(v);
        }
        if let Some(&prev) = t.last() {
            if !(row[0] > prev) {
                return Err(parse_err(
                    path,
                    line,
                    format!("timestamp {} does not increase on {prev}", row[0]),
                ));
            }
        }
        t.push(row[0]);
        values.extend_from_slice(&row[1..]);
    }
    if t.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} has no data rows",
            path.display()
        )));
    }
    Ok(TimeSeries {
        z: DMatrix::from_row_slice(t.len(), d, &values),
        t,
        channels: header.iter().skip(1).map(String::from).collect(),
    })
}

/// Loads one sequence per path into an observation set.
pub fn load_observations<P: AsRef<Path>>(paths: &[P]) -> Result<ObservationSet> {
    if paths.is_empty() {
        return Err(Error::InvalidInput("no data files given".into()));
    }
    let series = paths
        .iter()
        .map(|p| load_csv(p.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    let rate = series[0].sample_rate();
    let mut obs = ObservationSet::new(series.into_iter().map(|s| s.z).collect())?;
    obs.sample_rate_hz = rate;
    Ok(obs)
}

/// Reads `t,<label>` pairs and returns the labels in file order.
pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let mut rdr = open(path)?;
    let header = read_header(&mut rdr, path)?;
    if header.len() != 2 {
        return Err(parse_err(
            path,
            1,
            format!("expected 2 columns, found {}", header.len()),
        ));
    }
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec =
            rec.map_err(|e| parse_err(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record_line(&rec);
        if rec.len() != 2 {
            return Err(parse_err(
                path,
                line,
                format!("expected 2 fields, found {}", rec.len()),
            ));
        }
        let label = rec[1].parse().map_err(|_| {
            parse_err(
                path,
                line,
                format!("label must be a nonnegative integer, got `{}`", &rec[1]),
            )
        })?;
        labels.push(label);
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} has no label rows",
            path.display()
        )));
    }
    Ok(labels)
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path)
        .map_err(|e| Error::InvalidInput(format!("cannot create {}: {e}", path.display())))?;
    Ok(csv::Writer::from_writer(file))
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Writes a data file. Floats use the shortest representation that parses
/// back to the same value, so a write/load round trip is exact.
pub fn write_csv(path: &Path, t: &[f64], z: &DMatrix<f64>) -> Result<()> {
    if t.len() != z.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} timestamps for {} rows",
            t.len(),
            z.nrows()
        )));
    }
    let mut w = csv_writer(path)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=z.ncols()).map(|c| format!("c{c}")));
    w.write_record(&header).map_err(csv_io)?;
    for (r, tr) in t.iter().enumerate() {
        let mut row = vec![tr.to_string()];
        row.extend(z.row(r).iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `t,<column>` with `t` the sample index.
pub fn write_labels(path: &Path, column: &str, labels: &[usize]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["t", column]).map_err(csv_io)?;
    for (t, l) in labels.iter().enumerate() {
        w.write_record([t.to_string(), l.to_string()])
            .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `iteration,elbo`, iterations counted from 1.
pub fn write_trace(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["iteration", "elbo"]).map_err(csv_io)?;
    for (i, e) in trace.iter().enumerate() {
        w.write_record([(i + 1).to_string(), e.to_string()])
            .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

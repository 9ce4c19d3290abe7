//! CSV import and export for return series and exponential-regression data.
//!
//! Return series use a `value` column and an optional `date` column that is
//! carried through but not modelled. Regression data use exactly `x1,x2,y`.

use std::fs::File;
use std::path::Path;

use nuisance_core::{ExpRegData, ReturnSeries};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestOptions {
    /// Natural log of each value, applied before de-meaning.
    pub log_transform: bool,
    pub demean: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestedSeries {
    pub series: ReturnSeries,
    pub dates: Option<Vec<String>>,
    pub removed_mean: Option<f64>,
}

fn reader(path: &Path) -> CliResult<csv::Reader<File>> {
    let f = File::open(path).map_err(|e| CliError::input(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(f))
}

fn headers(path: &Path, rdr: &mut csv::Reader<File>) -> CliResult<Vec<String>> {
    rdr.headers()
        .map(|h| h.iter().map(str::to_string).collect())
        .map_err(|e| CliError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: e.to_string(),
        })
}

fn parse_f64(path: &Path, line: usize, field: &str, column: &str) -> CliResult<f64> {
    let v: f64 = field.parse().map_err(|_| CliError::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("column {column}: {field:?} is not a number"),
    })?;
    if !v.is_finite() {
        return Err(CliError::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("column {column}: non-finite value"),
        });
    }
    Ok(v)
}

fn records(path: &Path, rdr: &mut csv::Reader<File>) -> CliResult<Vec<(usize, csv::StringRecord)>> {
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // Line 1 is the header.
        let line = i + 2;
        let rec = rec.map_err(|e| CliError::Parse {
            path: path.to_path_buf(),
            line: e.position().map_or(line, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        out.push((line, rec));
    }
    Ok(out)
}

pub fn read_series(path: &Path, opts: IngestOptions) -> CliResult<IngestedSeries> {
    let mut rdr = reader(path)?;
    let h = headers(path, &mut rdr)?;
    let value_col = h.iter().position(|c| c == "value");
    let date_col = h.iter().position(|c| c == "date");
    let unexpected = h.iter().any(|c| c != "value" && c != "date");
    let Some(value_col) = value_col.filter(|_| !unexpected) else {
        return Err(CliError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header `value` or `date,value`, found `{}`", h.join(",")),
        });
    };
    let mut values = Vec::new();
    let mut dates = date_col.map(|_| Vec::new());
    for (line, rec) in records(path, &mut rdr)? {
        let mut v = parse_f64(path, line, rec.get(value_col).unwrap_or(""), "value")?;
        if opts.log_transform {
            if v <= 0.0 {
                return Err(CliError::NonPositiveUnderLog {
                    path: path.to_path_buf(),
                    line,
                    value: v,
                });
            }
            v = v.ln();
        }
        values.push(v);
        if let (Some(d), Some(c)) = (dates.as_mut(), date_col) {
            d.push(rec.get(c).unwrap_or("").to_string());
        }
    }
    if values.is_empty() {
        return Err(CliError::input(path, "no data rows"));
    }
    let removed_mean = opts.demean.then(|| {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        values.iter_mut().for_each(|v| *v -= mean);
        mean
    });
    Ok(IngestedSeries {
        series: ReturnSeries::new(values)?,
        dates,
        removed_mean,
    })
}

pub fn read_expreg(path: &Path) -> CliResult<ExpRegData> {
    let mut rdr = reader(path)?;
    let h = headers(path, &mut rdr)?;
    if h != ["x1", "x2", "y"] {
        return Err(CliError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header `x1,x2,y`, found `{}`", h.join(",")),
        });
    }
    let (mut x1, mut x2, mut y) = (Vec::new(), Vec::new(), Vec::new());
    for (line, rec) in records(path, &mut rdr)? {
        x1.push(parse_f64(path, line, &rec[0], "x1")?);
        x2.push(parse_f64(path, line, &rec[1], "x2")?);
        let yv = parse_f64(path, line, &rec[2], "y")?;
        if yv <= 0.0 {
            return Err(CliError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("column y: {yv} is not positive"),
            });
        }
        y.push(yv);
    }
    Ok(ExpRegData::new(x1, x2, y)?)
}

fn writer(path: &Path) -> CliResult<csv::Writer<File>> {
    let f = File::create(path).map_err(|e| CliError::output(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn finish(path: &Path, mut w: csv::Writer<File>) -> CliResult<()> {
    w.flush().map_err(|e| CliError::output(path, e))
}

/// Values are written in shortest round-trip form, so reading the file back
/// reproduces them exactly.
pub fn write_series(path: &Path, series: &ReturnSeries, dates: Option<&[String]>) -> CliResult<()> {
    let mut w = writer(path)?;
    let err = |e: csv::Error| CliError::output(path, e);
    match dates {
        Some(d) => {
            w.write_record(["date", "value"]).map_err(err)?;
            for (date, v) in d.iter().zip(&series.y) {
                w.write_record([date.clone(), v.to_string()]).map_err(err)?;
            }
        }
        None => {
            w.write_record(["value"]).map_err(err)?;
            for v in &series.y {
                w.write_record([v.to_string()]).map_err(err)?;
            }
        }
    }
    finish(path, w)
}

pub fn write_expreg(path: &Path, data: &ExpRegData) -> CliResult<()> {
    let mut w = writer(path)?;
    let err = |e: csv::Error| CliError::output(path, e);
    w.write_record(["x1", "x2", "y"]).map_err(err)?;
    for i in 0..data.len() {
        w.write_record([data.x1[i].to_string(), data.x2[i].to_string(), data.y[i].to_string()])
            .map_err(err)?;
    }
    finish(path, w)
}

/// Writes rows under a header; every row must have the header's width.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = writer(path)?;
    let err = |e: csv::Error| CliError::output(path, e);
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(r).map_err(err)?;
    }
    finish(path, w)
}

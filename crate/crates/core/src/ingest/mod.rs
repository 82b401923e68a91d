//! Reading raw readings from disk and aligning them to a fixed-interval grid.
//!
//! CSV files carry the header `series_id,timestamp,value`; JSONL lines are
//! objects `{"id": .., "t": .., "v": ..}`. Timestamps are UTC epoch seconds.
//! An empty CSV value, `nan`, or a JSON `null` records an explicit gap.

mod missing;
mod synthetic;

pub use missing::{gen_mcar, gen_mnar, run_lengths, MnarRule};
pub use synthetic::{
    gen_synthetic, MissingKind, MissingSpec, PatternShape, PatternSpec, SyntheticCorpus,
    SyntheticSpec,
};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::RawSeries;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Csv,
    Jsonl,
}

impl InputFormat {
    fn extension(self) -> &'static str {
        match self {
            InputFormat::Csv => "csv",
            InputFormat::Jsonl => "jsonl",
        }
    }
}

impl FromStr for InputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(InputFormat::Csv),
            "jsonl" => Ok(InputFormat::Jsonl),
            other => Err(Error::InvalidConfig(format!("unknown format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSpec {
    /// Files, or directories scanned for files with the format's extension.
    pub inputs: Vec<PathBuf>,
    pub format: InputFormat,
    /// Grid spacing in seconds.
    pub interval: u64,
    /// Readings outside `[min, max]` are dropped as implausible.
    pub clamp: Option<(f64, f64)>,
    /// Abort on the first malformed row instead of skipping it.
    #[serde(default = "fail_fast_default")]
    pub fail_fast: bool,
}

fn fail_fast_default() -> bool {
    true
}

impl IngestSpec {
    pub fn new(inputs: Vec<PathBuf>, format: InputFormat, interval: u64) -> Self {
        IngestSpec {
            inputs,
            format,
            interval,
            clamp: None,
            fail_fast: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::InvalidConfig("interval must be > 0".into()));
        }
        if let Some((lo, hi)) = self.clamp {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::InvalidConfig(format!(
                    "clamp range [{lo}, {hi}] is empty"
                )));
            }
        }
        Ok(())
    }

    fn files(&self) -> Result<Vec<PathBuf>> {
        let mut files = Vec::new();
        for input in &self.inputs {
            if input.is_dir() {
                let mut found: Vec<PathBuf> = std::fs::read_dir(input)
                    .map_err(|e| Error::io(input, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        p.is_file()
                            && p.extension().and_then(|e| e.to_str())
                                == Some(self.format.extension())
                    })
                    .collect();
                found.sort();
                files.extend(found);
            } else if input.is_file() {
                files.push(input.clone());
            } else {
                return Err(Error::io(
                    input,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
                ));
            }
        }
        Ok(files)
    }
}

/// One parsed row before grid alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Reading {
    pub series_id: String,
    pub timestamp: i64,
    pub value: Option<f64>,
}

fn parse_timestamp(raw: &str) -> std::result::Result<i64, String> {
    let raw = raw.trim();
    if let Ok(t) = raw.parse::<i64>() {
        return Ok(t);
    }
    match raw.parse::<f64>() {
        Ok(t) if t.is_finite() && t.fract() == 0.0 => Ok(t as i64),
        _ => Err(format!("timestamp `{raw}` is not integral epoch seconds")),
    }
}

fn parse_value(raw: &str) -> std::result::Result<Option<f64>, String> {
    let raw = raw.trim();
    if raw.is_empty() || raw.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(format!("value `{raw}` is not a finite number")),
    }
}

fn row_error(path: &Path, line: usize, message: String, fail_fast: bool) -> Result<()> {
    if fail_fast {
        Err(Error::Parse {
            path: path.display().to_string(),
            line,
            message,
        })
    } else {
        warn!("{}:{line}: skipping row: {message}", path.display());
        Ok(())
    }
}

fn read_csv(path: &Path, fail_fast: bool) -> Result<Vec<Reading>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader.headers()?.clone();
    let expected = ["series_id", "timestamp", "value"];
    if headers.len() != 3 || headers.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 1,
            message: format!(
                "header must be `series_id,timestamp,value`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }
    let mut out = Vec::new();
    for (n, record) in reader.records().enumerate() {
        let line = n + 2;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                row_error(path, line, e.to_string(), fail_fast)?;
                continue;
            }
        };
        if record.len() != 3 {
            row_error(
                path,
                line,
                format!("expected 3 fields, found {}", record.len()),
                fail_fast,
            )?;
            continue;
        }
        let parsed =
            parse_timestamp(&record[1]).and_then(|t| parse_value(&record[2]).map(|v| (t, v)));
        match parsed {
            Ok((timestamp, value)) if !record[0].is_empty() => out.push(Reading {
                series_id: record[0].to_string(),
                timestamp,
                value,
            }),
            Ok(_) => row_error(path, line, "empty series_id".into(), fail_fast)?,
            Err(msg) => row_error(path, line, msg, fail_fast)?,
        }
    }
    Ok(out)
}

#[derive(Deserialize)]
struct JsonRow {
    id: String,
    t: serde_json::Value,
    v: Option<f64>,
}

fn read_jsonl(path: &Path, fail_fast: bool) -> Result<Vec<Reading>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: JsonRow = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                row_error(path, line_no, e.to_string(), fail_fast)?;
                continue;
            }
        };
        let ts = match &row.t {
            serde_json::Value::Number(n) => parse_timestamp(&n.to_string()),
            serde_json::Value::String(s) => parse_timestamp(s),
            other => Err(format!("timestamp `{other}` is not a number")),
        };
        match ts {
            Ok(timestamp) => out.push(Reading {
                series_id: row.id,
                timestamp,
                value: row.v.filter(|v| v.is_finite()),
            }),
            Err(msg) => row_error(path, line_no, msg, fail_fast)?,
        }
    }
    Ok(out)
}

/// Slot of a reading: `(t - start) / interval` rounded half-up.
pub fn slot_index(timestamp: i64, start: i64, interval: u64) -> usize {
    let offset = i128::from(timestamp) - i128::from(start);
    debug_assert!(offset >= 0);
    let interval = i128::from(interval);
    ((2 * offset + interval) / (2 * interval)) as usize
}

/// Align readings to series on the interval grid. Readings are applied in
/// the given order, so the last reading for a slot wins.
pub fn align_readings(
    readings: Vec<Reading>,
    interval: u64,
    clamp: Option<(f64, f64)>,
) -> Vec<RawSeries> {
    let mut grouped: BTreeMap<String, Vec<(i64, Option<f64>)>> = BTreeMap::new();
    for r in readings {
        grouped
            .entry(r.series_id)
            .or_default()
            .push((r.timestamp, r.value));
    }
    grouped
        .into_iter()
        .map(|(series_id, rows)| {
            let start = rows.iter().map(|(t, _)| *t).min().unwrap_or(0);
            let len = rows
                .iter()
                .map(|(t, _)| slot_index(*t, start, interval))
                .max()
                .map_or(0, |s| s + 1);
            let mut values = vec![None; len];
            let mut filled = vec![false; len];
            let mut clamped = 0usize;
            for (t, v) in rows {
                let slot = slot_index(t, start, interval);
                if filled[slot] {
                    warn!("series {series_id}: duplicate reading for slot {slot} (t={t}); keeping the last");
                }
                filled[slot] = true;
                let v = match (v, clamp) {
                    (Some(x), Some((lo, hi))) if x < lo || x > hi => {
                        clamped += 1;
                        None
                    }
                    (v, _) => v,
                };
                values[slot] = v;
            }
            if clamped > 0 {
                warn!("series {series_id}: {clamped} readings outside clamp range dropped");
            }
            RawSeries {
                series_id,
                interval,
                start,
                values,
            }
        })
        .collect()
}

/// Load every input file and align readings into one series per id,
/// ordered by series id.
pub fn load_series(spec: &IngestSpec) -> Result<Vec<RawSeries>> {
    spec.validate()?;
    let files = spec.files()?;
    let per_file: Vec<Vec<Reading>> = files
        .par_iter()
        .map(|path| match spec.format {
            InputFormat::Csv => read_csv(path, spec.fail_fast),
            InputFormat::Jsonl => read_jsonl(path, spec.fail_fast),
        })
        .collect::<Result<_>>()?;
    let readings: Vec<Reading> = per_file.into_iter().flatten().collect();
    if readings.is_empty() {
        return Err(Error::NoSeries);
    }
    Ok(align_readings(readings, spec.interval, spec.clamp))
}

/// Write series as CSV, emitting explicit empty values for gaps so that a
/// reload reproduces the grid exactly.
pub fn write_series_csv(path: &Path, series: &[RawSeries]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "series_id,timestamp,value").map_err(io)?;
    for s in series {
        for (i, v) in s.values.iter().enumerate() {
            let t = s.start + (i as i64) * s.interval as i64;
            match v {
                Some(v) => writeln!(out, "{},{},{}", s.series_id, t, v).map_err(io)?,
                None => writeln!(out, "{},{},", s.series_id, t).map_err(io)?,
            }
        }
    }
    out.flush().map_err(io)
}

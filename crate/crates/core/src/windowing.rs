//! Tumbling-window partitioning, the complete/incomplete split and
//! per-window z-scoring.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{MaskVector, RawSeries, SeriesWindow, MISSING};

/// Windows split into complete (all observed) and incomplete sets.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowedCorpus {
    pub w: usize,
    pub complete: Vec<SeriesWindow>,
    pub incomplete: Vec<SeriesWindow>,
    /// Population standard deviation of every observed value in the corpus.
    pub sigma_data: f64,
}

impl WindowedCorpus {
    /// Split windows by completeness, keeping their relative order.
    pub fn from_windows(w: usize, windows: Vec<SeriesWindow>) -> Self {
        let (complete, incomplete): (Vec<_>, Vec<_>) =
            windows.into_iter().partition(SeriesWindow::is_complete);
        let sigma_data = observed_std(complete.iter().chain(&incomplete));
        WindowedCorpus {
            w,
            complete,
            incomplete,
            sigma_data,
        }
    }

    pub fn total(&self) -> usize {
        self.complete.len() + self.incomplete.len()
    }

    /// Z-score every window and recompute `sigma_data` on the normalized values.
    pub fn normalized(&self) -> WindowedCorpus {
        let complete: Vec<_> = self.complete.par_iter().map(zscore).collect();
        let incomplete: Vec<_> = self.incomplete.par_iter().map(zscore).collect();
        let sigma_data = observed_std(complete.iter().chain(&incomplete));
        WindowedCorpus {
            w: self.w,
            complete,
            incomplete,
            sigma_data,
        }
    }

    /// Fraction of missing positions over all windows.
    pub fn missing_rate(&self) -> f64 {
        let total = self.total() * self.w;
        if total == 0 {
            return 0.0;
        }
        let zeros: usize = self.incomplete.iter().map(|w| w.mask.zeros()).sum();
        zeros as f64 / total as f64
    }
}

fn observed_std<'a>(windows: impl Iterator<Item = &'a SeriesWindow>) -> f64 {
    let (mut n, mut mean, mut m2) = (0.0f64, 0.0f64, 0.0f64);
    for w in windows {
        for (_, v) in w.observed() {
            n += 1.0;
            let d = v - mean;
            mean += d / n;
            m2 += d * (v - mean);
        }
    }
    if n == 0.0 {
        0.0
    } else {
        (m2 / n).sqrt()
    }
}

/// Cut one series into consecutive windows of length `w`; the trailing
/// remainder is dropped.
pub fn windows_of(series: &RawSeries, w: usize) -> Vec<SeriesWindow> {
    series
        .values
        .chunks_exact(w)
        .enumerate()
        .map(|(j, chunk)| {
            let mask = MaskVector::new(chunk.iter().map(Option::is_some).collect());
            let values = chunk.iter().map(|v| v.unwrap_or(MISSING)).collect();
            SeriesWindow::new(series.series_id.clone(), j, values, mask)
                .expect("chunk length equals mask length")
        })
        .collect()
}

pub fn partition(series: &[RawSeries], w: usize) -> Result<WindowedCorpus> {
    if w < 2 {
        return Err(Error::InvalidConfig(format!(
            "window length {w} must be >= 2"
        )));
    }
    let per_series: Vec<Vec<SeriesWindow>> = series
        .par_iter()
        .map(|s| {
            if s.len() < w {
                warn!(
                    "series {} has {} slots, shorter than w = {w}; no windows",
                    s.series_id,
                    s.len()
                );
            }
            windows_of(s, w)
        })
        .collect();
    Ok(WindowedCorpus::from_windows(
        w,
        per_series.into_iter().flatten().collect(),
    ))
}

/// Z-score the observed positions (population std). Constant windows map
/// to all zeros and are flagged.
pub fn zscore(window: &SeriesWindow) -> SeriesWindow {
    let observed: Vec<(usize, f64)> = window.observed().collect();
    let mut out = window.clone();
    out.normalized = true;
    if observed.is_empty() {
        return out;
    }
    let n = observed.len() as f64;
    let mean = observed.iter().map(|(_, v)| v).sum::<f64>() / n;
    let var = observed
        .iter()
        .map(|(_, v)| (v - mean).powi(2))
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    // Relative cutoff: a window that is constant up to rounding noise.
    let degenerate = std <= 1e-12 * mean.abs().max(1.0);
    out.zero_variance = degenerate;
    for (i, v) in observed {
        out.values[i] = if degenerate { 0.0 } else { (v - mean) / std };
    }
    out
}

/// One line of the windows artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub id: String,
    pub idx: usize,
    pub values: Vec<Option<f64>>,
    pub mask: MaskVector,
}

impl From<&SeriesWindow> for WindowRecord {
    fn from(w: &SeriesWindow) -> Self {
        WindowRecord {
            id: w.series_id.clone(),
            idx: w.window_index,
            values: w
                .values
                .iter()
                .zip(w.mask.bits())
                .map(|(v, m)| m.then_some(*v))
                .collect(),
            mask: w.mask.clone(),
        }
    }
}

impl WindowRecord {
    pub fn into_window(self) -> Result<SeriesWindow> {
        if self
            .values
            .iter()
            .zip(self.mask.bits())
            .any(|(v, m)| v.is_some() != *m)
        {
            return Err(Error::InvalidConfig(format!(
                "window {}#{}: values and mask disagree",
                self.id, self.idx
            )));
        }
        let values = self.values.iter().map(|v| v.unwrap_or(MISSING)).collect();
        SeriesWindow::new(self.id, self.idx, values, self.mask)
    }
}

/// Write windows as JSONL, one `{id, idx, values, mask}` object per line.
pub fn write_windows_jsonl<'a>(
    path: &Path,
    windows: impl IntoIterator<Item = &'a SeriesWindow>,
) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for w in windows {
        serde_json::to_writer(&mut out, &WindowRecord::from(w))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_windows_jsonl(path: &Path) -> Result<Vec<SeriesWindow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: WindowRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(record.into_window()?);
    }
    Ok(out)
}

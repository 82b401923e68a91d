//! DTW-AROW: dynamic time warping that tolerates missing values.
//!
//! A cell pairing a missing value with anything costs nothing, and such a
//! cell can only be entered diagonally, so a warping path crosses every gap
//! in lockstep instead of stretching through it for free. The raw cost is
//! then scaled by `total / observed` so sparse windows do not look
//! artificially close.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{MaskVector, SeriesWindow};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DtwResult {
    pub raw_cost: f64,
    pub correction: f64,
    pub corrected: f64,
    pub path_length: usize,
}

/// `(n_x + n_y) / (obs_x + obs_y)`; kept separate so the direction of the
/// correction lives in one place.
pub fn correction_factor(n_x: usize, obs_x: usize, n_y: usize, obs_y: usize) -> f64 {
    (n_x + n_y) as f64 / (obs_x + obs_y) as f64
}

fn check_observed(label: &str, mask: &MaskVector) -> Result<usize> {
    let obs = mask.ones();
    if obs == 0 {
        return Err(Error::AllMissing(label.to_string()));
    }
    Ok(obs)
}

pub fn dtw_arow(x: &SeriesWindow, y: &SeriesWindow) -> Result<DtwResult> {
    dtw_core(&x.values, &x.mask, &y.values, &y.mask, &x.id(), &y.id())
}

/// Corrected DTW-AROW distance from `x` to a fully observed centroid.
pub fn dtw_arow_to_centroid(x: &SeriesWindow, centroid: &[f64]) -> Result<f64> {
    let full = MaskVector::all_observed(centroid.len());
    Ok(dtw_core(&x.values, &x.mask, centroid, &full, &x.id(), "centroid")?.corrected)
}

fn dtw_core(
    xv: &[f64],
    xm: &MaskVector,
    yv: &[f64],
    ym: &MaskVector,
    x_label: &str,
    y_label: &str,
) -> Result<DtwResult> {
    let (n, m) = (xv.len(), yv.len());
    if n != m {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: m,
        });
    }
    let obs_x = check_observed(x_label, xm)?;
    let obs_y = check_observed(y_label, ym)?;
    let (xb, yb) = (xm.bits(), ym.bits());

    // Two rolling rows of cumulative cost and the length of the chosen path.
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    let mut prev_len = vec![0usize; m + 1];
    let mut cur_len = vec![0usize; m + 1];
    prev[0] = 0.0;
    for i in 1..=n {
        cur[0] = f64::INFINITY;
        for j in 1..=m {
            let (ox, oy) = (xb[i - 1], yb[j - 1]);
            let cost = if ox && oy {
                let d = xv[i - 1] - yv[j - 1];
                d * d
            } else {
                0.0
            };
            let mut best = prev[j - 1];
            let mut len = prev_len[j - 1];
            if ox && oy {
                if prev[j] < best {
                    best = prev[j];
                    len = prev_len[j];
                }
                if cur[j - 1] < best {
                    best = cur[j - 1];
                    len = cur_len[j - 1];
                }
            }
            cur[j] = best + cost;
            cur_len[j] = len + 1;
        }
        std::mem::swap(&mut prev, &mut cur);
        std::mem::swap(&mut prev_len, &mut cur_len);
    }
    let raw_cost = prev[m];
    let correction = correction_factor(n, obs_x, m, obs_y);
    Ok(DtwResult {
        raw_cost,
        correction,
        corrected: raw_cost * correction,
        path_length: prev_len[m],
    })
}

//! Artificial missingness: MCAR and two value-dependent (MNAR) archetypes.
//!
//! All generators only ever add gaps: positions already missing stay
//! missing and are not counted twice.

use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::RunSeed;
use crate::types::{apply_mask, MaskVector, SeriesWindow};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum MnarRule {
    /// Hide the largest observed values first.
    TopValue,
    /// Contiguous runs grown from the largest remaining value; run lengths
    /// are geometric with the given mean.
    Burst { mean_run: f64 },
}

impl Default for MnarRule {
    fn default() -> Self {
        MnarRule::Burst { mean_run: 8.0 }
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!(
            "missing rate {rate} not in [0,1)"
        )));
    }
    Ok(())
}

/// Hide each position independently with probability `rate`.
pub fn gen_mcar(windows: &[SeriesWindow], rate: f64, seed: RunSeed) -> Result<Vec<SeriesWindow>> {
    check_rate(rate)?;
    windows
        .iter()
        .map(|w| {
            if rate == 0.0 {
                return Ok(w.clone());
            }
            let mut rng = seed.keyed(&w.id()).rng();
            let m = MaskVector::new((0..w.len()).map(|_| !rng.random_bool(rate)).collect());
            apply_mask(w, &m)
        })
        .collect()
}

/// Number of extra positions to hide: `rate * w` with the fractional part
/// resolved by a coin flip so corpus-level rates are unbiased.
fn hide_count(rate: f64, w: usize, available: usize, rng: &mut impl Rng) -> usize {
    let target = rate * w as f64;
    let mut n = target.floor() as usize;
    let frac = target - target.floor();
    if frac > 0.0 && rng.random_bool(frac) {
        n += 1;
    }
    n.min(available)
}

/// Value-dependent missingness at corpus-level rate `rate`.
pub fn gen_mnar(
    windows: &[SeriesWindow],
    rate: f64,
    rule: MnarRule,
    seed: RunSeed,
) -> Result<Vec<SeriesWindow>> {
    check_rate(rate)?;
    if let MnarRule::Burst { mean_run } = rule {
        if mean_run.is_nan() || mean_run < 1.0 {
            return Err(Error::InvalidConfig(format!(
                "burst mean_run {mean_run} must be >= 1"
            )));
        }
    }
    windows
        .iter()
        .map(|w| {
            if rate == 0.0 {
                return Ok(w.clone());
            }
            let mut rng = seed.keyed(&w.id()).rng();
            let observed: Vec<(usize, f64)> = w.observed().collect();
            let n = hide_count(rate, w.len(), observed.len(), &mut rng);
            let mut keep = MaskVector::all_observed(w.len());
            match rule {
                MnarRule::TopValue => {
                    let mut order = observed;
                    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                    for (i, _) in order.into_iter().take(n) {
                        keep.set(i, false);
                    }
                }
                MnarRule::Burst { mean_run } => {
                    burst_hide(w, &mut keep, n, mean_run, &mut rng);
                }
            }
            apply_mask(w, &keep)
        })
        .collect()
}

fn burst_hide(
    w: &SeriesWindow,
    keep: &mut MaskVector,
    n: usize,
    mean_run: f64,
    rng: &mut impl Rng,
) {
    let geo = Geometric::new(1.0 / mean_run).expect("mean_run >= 1");
    let len = w.len();
    let available = |keep: &MaskVector, i: usize| w.mask.get(i) && keep.get(i);
    let mut hidden = 0;
    while hidden < n {
        let Some(start) = (0..len)
            .filter(|&i| available(keep, i))
            .max_by(|&a, &b| w.values[a].total_cmp(&w.values[b]).then(b.cmp(&a)))
        else {
            break;
        };
        let run = (1 + geo.sample(rng) as usize).min(n - hidden);
        let mut taken = 0;
        let mut i = start;
        while taken < run && i < len && available(keep, i) {
            keep.set(i, false);
            taken += 1;
            i += 1;
        }
        let mut j = start;
        while taken < run && j > 0 && available(keep, j - 1) {
            j -= 1;
            keep.set(j, false);
            taken += 1;
        }
        hidden += taken;
    }
}

/// Lengths of the maximal runs of missing positions.
pub fn run_lengths(mask: &MaskVector) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = 0;
    for &b in mask.bits() {
        if b {
            if current > 0 {
                runs.push(current);
            }
            current = 0;
        } else {
            current += 1;
        }
    }
    if current > 0 {
        runs.push(current);
    }
    runs
}

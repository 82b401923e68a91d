//! Domain types shared by every stage: raw series, windows, masks and the
//! PAC parameters.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Marker stored at missing positions. Kernels branch on the mask and never
/// read this value; being NaN it poisons any reduction that does.
pub const MISSING: f64 = f64::NAN;

/// Binary observability vector: `true` = observed, `false` = missing.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskVector {
    bits: Vec<bool>,
}

impl MaskVector {
    pub fn new(bits: Vec<bool>) -> Self {
        MaskVector { bits }
    }

    pub fn all_observed(len: usize) -> Self {
        MaskVector {
            bits: vec![true; len],
        }
    }

    pub fn from_u8(bits: &[u8]) -> Self {
        MaskVector {
            bits: bits.iter().map(|&b| b != 0).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, observed: bool) {
        self.bits[i] = observed;
    }

    pub fn zeros(&self) -> usize {
        self.bits.iter().filter(|b| !**b).count()
    }

    pub fn ones(&self) -> usize {
        self.bits.len() - self.zeros()
    }

    /// Fraction of missing positions; 0 for an empty mask.
    pub fn missing_rate(&self) -> f64 {
        if self.bits.is_empty() {
            0.0
        } else {
            self.zeros() as f64 / self.bits.len() as f64
        }
    }

    pub fn is_complete(&self) -> bool {
        self.bits.iter().all(|b| *b)
    }

    /// Positions that are missing.
    pub fn hidden(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, b)| (!*b).then_some(i))
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| u8::from(b)).collect()
    }
}

impl Serialize for MaskVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_u8().serialize(s)
    }
}

impl<'de> Deserialize<'de> for MaskVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = Vec::<u8>::deserialize(d)?;
        Ok(MaskVector::from_u8(&raw))
    }
}

/// Element-wise AND of two masks: a position survives only if observed in both.
pub fn mask_and(a: &MaskVector, b: &MaskVector) -> Result<MaskVector> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(MaskVector::new(
        a.bits.iter().zip(&b.bits).map(|(x, y)| *x && *y).collect(),
    ))
}

/// A univariate series aligned to a fixed interval grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub series_id: String,
    /// Grid spacing in seconds.
    pub interval: u64,
    /// Epoch seconds of slot 0.
    pub start: i64,
    pub values: Vec<Option<f64>>,
}

impl RawSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn observed_count(&self) -> usize {
        self.values.iter().filter(|v| v.is_some()).count()
    }
}

/// Fixed-length window with its observability mask.
#[derive(Debug, Clone)]
pub struct SeriesWindow {
    pub series_id: String,
    pub window_index: usize,
    /// Length `w`; [`MISSING`] wherever the mask is 0.
    pub values: Vec<f64>,
    pub mask: MaskVector,
    pub normalized: bool,
    /// Set by z-scoring when the observed values had zero variance.
    pub zero_variance: bool,
}

impl SeriesWindow {
    /// Build a window, overwriting masked-out positions with [`MISSING`].
    pub fn new(
        series_id: impl Into<String>,
        window_index: usize,
        mut values: Vec<f64>,
        mask: MaskVector,
    ) -> Result<Self> {
        if values.len() != mask.len() {
            return Err(Error::LengthMismatch {
                expected: mask.len(),
                actual: values.len(),
            });
        }
        let series_id = series_id.into();
        for (v, observed) in values.iter_mut().zip(mask.bits()) {
            if !*observed {
                *v = MISSING;
            } else if !v.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "window {series_id}#{window_index}: observed value {v} is not finite"
                )));
            }
        }
        Ok(SeriesWindow {
            series_id,
            window_index,
            values,
            mask,
            normalized: false,
            zero_variance: false,
        })
    }

    /// A fully observed window.
    pub fn complete(
        series_id: impl Into<String>,
        window_index: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        let mask = MaskVector::all_observed(values.len());
        Self::new(series_id, window_index, values, mask)
    }

    /// Stable identifier `series_id#window_index`.
    pub fn id(&self) -> String {
        format!("{}#{}", self.series_id, self.window_index)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.mask.is_complete()
    }

    /// `(position, value)` for observed positions only.
    pub fn observed(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values
            .iter()
            .zip(self.mask.bits())
            .enumerate()
            .filter_map(|(i, (v, m))| {
                if *m {
                    debug_assert!(v.is_finite(), "sentinel read at observed position {i}");
                    Some((i, *v))
                } else {
                    None
                }
            })
    }
}

/// Missing positions compare equal regardless of the stored sentinel.
impl PartialEq for SeriesWindow {
    fn eq(&self, other: &Self) -> bool {
        self.series_id == other.series_id
            && self.window_index == other.window_index
            && self.mask == other.mask
            && self.normalized == other.normalized
            && self.zero_variance == other.zero_variance
            && self
                .values
                .iter()
                .zip(&other.values)
                .zip(self.mask.bits())
                .all(|((a, b), m)| !*m || a.to_bits() == b.to_bits())
    }
}

/// Hide the zero positions of `m`; surviving values are untouched.
///
/// Ground truth is not kept here: callers hold on to the original window.
pub fn apply_mask(window: &SeriesWindow, m: &MaskVector) -> Result<SeriesWindow> {
    let mask = mask_and(&window.mask, m)?;
    let values = window
        .values
        .iter()
        .zip(mask.bits())
        .map(|(v, keep)| if *keep { *v } else { MISSING })
        .collect();
    Ok(SeriesWindow {
        series_id: window.series_id.clone(),
        window_index: window.window_index,
        values,
        mask,
        normalized: window.normalized,
        zero_variance: window.zero_variance,
    })
}

/// PAC learning parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PacConfig {
    pub epsilon: f64,
    pub delta: f64,
    /// Reconstruction tolerance as a fraction of the data standard deviation.
    pub tau_frac: f64,
    pub gamma_min: f64,
}

impl Default for PacConfig {
    fn default() -> Self {
        PacConfig {
            epsilon: 0.03,
            delta: 0.1,
            tau_frac: 0.1,
            gamma_min: 0.2,
        }
    }
}

impl PacConfig {
    pub fn new(epsilon: f64, delta: f64, tau_frac: f64, gamma_min: f64) -> Result<Self> {
        let cfg = PacConfig {
            epsilon,
            delta,
            tau_frac,
            gamma_min,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.epsilon) {
            return Err(Error::InvalidConfig(format!(
                "epsilon {} not in (0,1)",
                self.epsilon
            )));
        }
        if !open_unit(self.delta) {
            return Err(Error::InvalidConfig(format!(
                "delta {} not in (0,1)",
                self.delta
            )));
        }
        if !(self.tau_frac > 0.0 && self.tau_frac.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "tau_frac {} must be > 0",
                self.tau_frac
            )));
        }
        if !open_unit(self.gamma_min) {
            return Err(Error::InvalidConfig(format!(
                "gamma_min {} not in (0,1)",
                self.gamma_min
            )));
        }
        Ok(())
    }
}

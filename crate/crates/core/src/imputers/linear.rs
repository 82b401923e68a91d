use std::sync::atomic::{AtomicUsize, Ordering};

use serde_json::json;

use super::{global_mean, Imputer};
use crate::error::{Error, Result};
use crate::seed::RunSeed;
use crate::types::SeriesWindow;

/// Within-window linear interpolation, holding the nearest anchor past
/// either edge. A window with no visible value gets the training mean.
#[derive(Debug, Default)]
pub struct LinearImputer {
    global: Option<f64>,
    fallbacks: AtomicUsize,
}

impl LinearImputer {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Interpolate hidden positions of `values` from visible anchors; `None`
/// when there is no anchor.
pub fn interpolate(window: &SeriesWindow) -> Option<Vec<f64>> {
    let anchors: Vec<(usize, f64)> = window.observed().collect();
    let (&(first, first_v), &(last, last_v)) = (anchors.first()?, anchors.last()?);
    let mut out = window.values.clone();
    for (i, v) in out.iter_mut().enumerate().take(first) {
        debug_assert!(!window.mask.get(i));
        *v = first_v;
    }
    for v in out.iter_mut().skip(last + 1) {
        *v = last_v;
    }
    for pair in anchors.windows(2) {
        let ((a, va), (b, vb)) = (pair[0], pair[1]);
        let span = (b - a) as f64;
        for (i, v) in out.iter_mut().enumerate().take(b).skip(a + 1) {
            let t = (i - a) as f64 / span;
            *v = va + (vb - va) * t;
        }
    }
    Some(out)
}

impl Imputer for LinearImputer {
    fn spec(&self) -> String {
        "linear".into()
    }

    fn fit(&mut self, train: &[SeriesWindow], _seed: RunSeed) -> Result<()> {
        self.global = Some(global_mean(train));
        Ok(())
    }

    fn impute(&self, window: &SeriesWindow) -> Result<Vec<f64>> {
        let global = self.global.ok_or_else(|| Error::NotFitted(self.spec()))?;
        Ok(interpolate(window).unwrap_or_else(|| {
            self.fallbacks.fetch_add(1, Ordering::Relaxed);
            vec![global; window.len()]
        }))
    }

    fn state(&self) -> serde_json::Value {
        json!({"global_mean": self.global})
    }

    fn fallbacks(&self) -> usize {
        self.fallbacks.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::holed;
    use super::*;
    use proptest::prelude::*;

    fn fitted() -> LinearImputer {
        let mut l = LinearImputer::new();
        l.fit(&[holed(vec![4.0, 0.0], &[1, 0])], RunSeed(0))
            .unwrap();
        l
    }

    #[test]
    fn midpoint() {
        assert_eq!(
            fitted()
                .impute(&holed(vec![1.0, 0.0, 3.0], &[1, 0, 1]))
                .unwrap(),
            vec![1.0, 2.0, 3.0]
        );
    }

    #[test]
    fn edges_hold_nearest_anchor() {
        let out = fitted()
            .impute(&holed(vec![0.0, 2.0, 0.0, 6.0, 0.0], &[0, 1, 0, 1, 0]))
            .unwrap();
        assert_eq!(out, vec![2.0, 2.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn all_hidden_falls_back() {
        let l = fitted();
        assert_eq!(
            l.impute(&holed(vec![0.0; 3], &[0, 0, 0])).unwrap(),
            vec![4.0; 3]
        );
        assert_eq!(l.fallbacks(), 1);
    }

    proptest! {
        #[test]
        fn exact_on_affine(a in -5.0f64..5.0, b in -1.0f64..1.0, bits in prop::collection::vec(any::<bool>(), 32)) {
            prop_assume!(bits.iter().filter(|x| **x).count() >= 2);
            let first = bits.iter().position(|x| *x).unwrap();
            let last = bits.iter().rposition(|x| *x).unwrap();
            let truth: Vec<f64> = (0..32).map(|t| a + b * t as f64).collect();
            let w = SeriesWindow::new("a", 0, truth.clone(), crate::types::MaskVector::new(bits)).unwrap();
            let out = fitted().impute(&w).unwrap();
            // Inside the anchor span interpolation is exact; outside it holds.
            for t in first..=last {
                prop_assert!((out[t] - truth[t]).abs() < 1e-9);
            }
        }
    }
}

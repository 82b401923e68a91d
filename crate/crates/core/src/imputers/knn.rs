use serde_json::json;

use super::{global_mean, Imputer};
use crate::error::{Error, Result};
use crate::seed::RunSeed;
use crate::types::SeriesWindow;

/// Averages the `k` training windows closest on co-visible positions.
#[derive(Debug, Clone)]
pub struct KnnImputer {
    k: usize,
    fitted: Option<Fitted>,
}

#[derive(Debug, Clone)]
struct Fitted {
    train: Vec<SeriesWindow>,
    position_means: Vec<f64>,
    global: f64,
}

impl KnnImputer {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidConfig("knn needs k >= 1".into()));
        }
        Ok(KnnImputer { k, fitted: None })
    }

    pub(crate) fn parse(args: Option<&str>) -> Result<Self> {
        let k = match args {
            None => 5,
            Some(a) => a
                .trim()
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("knn: bad neighbour count `{a}`")))?,
        };
        Self::new(k)
    }
}

/// Mean squared difference over positions visible in both windows.
fn shared_distance(a: &SeriesWindow, b: &SeriesWindow) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..a.len().min(b.len()) {
        if a.mask.get(i) && b.mask.get(i) {
            let d = a.values[i] - b.values[i];
            sum += d * d;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

impl Imputer for KnnImputer {
    fn spec(&self) -> String {
        format!("knn:{}", self.k)
    }

    fn fit(&mut self, train: &[SeriesWindow], _seed: RunSeed) -> Result<()> {
        // With nothing visible every prediction falls back to 0.
        let usable: Vec<SeriesWindow> = train
            .iter()
            .filter(|w| w.mask.ones() > 0)
            .cloned()
            .collect();
        let global = global_mean(&usable);
        let w = usable.iter().map(SeriesWindow::len).max().unwrap_or(0);
        let mut sums = vec![0.0; w];
        let mut counts = vec![0usize; w];
        for win in &usable {
            for (i, v) in win.observed() {
                sums[i] += v;
                counts[i] += 1;
            }
        }
        let position_means = sums
            .iter()
            .zip(&counts)
            .map(|(s, &n)| if n > 0 { s / n as f64 } else { global })
            .collect();
        self.fitted = Some(Fitted {
            train: usable,
            position_means,
            global,
        });
        Ok(())
    }

    fn impute(&self, window: &SeriesWindow) -> Result<Vec<f64>> {
        let f = self
            .fitted
            .as_ref()
            .ok_or_else(|| Error::NotFitted(self.spec()))?;
        let fallback = |i: usize| f.position_means.get(i).copied().unwrap_or(f.global);
        if window.mask.ones() == 0 {
            return Ok(vec![f.global; window.len()]);
        }
        let mut near: Vec<(f64, usize)> = f
            .train
            .iter()
            .enumerate()
            .filter_map(|(j, t)| shared_distance(window, t).map(|d| (d, j)))
            .collect();
        near.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        near.truncate(self.k);
        Ok((0..window.len())
            .map(|i| {
                if window.mask.get(i) {
                    return window.values[i];
                }
                let (s, n) = near
                    .iter()
                    .map(|&(_, j)| &f.train[j])
                    .filter(|t| i < t.len() && t.mask.get(i))
                    .fold((0.0, 0usize), |(s, n), t| (s + t.values[i], n + 1));
                if n > 0 {
                    s / n as f64
                } else {
                    fallback(i)
                }
            })
            .collect())
    }

    fn state(&self) -> serde_json::Value {
        json!({
            "k": self.k,
            "train_windows": self.fitted.as_ref().map(|f| f.train.len()),
            "global_mean": self.fitted.as_ref().map(|f| f.global),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::holed;
    use super::*;

    #[test]
    fn nearest_neighbour_copies_shape() {
        let train = vec![
            holed(vec![0.0, 1.0, 2.0, 3.0], &[1, 1, 1, 1]),
            holed(vec![9.0, 9.0, 9.0, 9.0], &[1, 1, 1, 1]),
        ];
        let mut k = KnnImputer::new(1).unwrap();
        k.fit(&train, RunSeed(0)).unwrap();
        assert_eq!(
            k.impute(&holed(vec![0.1, 0.0, 0.0, 3.1], &[1, 0, 0, 1]))
                .unwrap(),
            vec![0.1, 1.0, 2.0, 3.1]
        );
    }

    #[test]
    fn averages_k() {
        let train = vec![
            holed(vec![0.0, 2.0], &[1, 1]),
            holed(vec![0.0, 4.0], &[1, 1]),
            holed(vec![5.0, 100.0], &[1, 1]),
        ];
        let mut k = KnnImputer::new(2).unwrap();
        k.fit(&train, RunSeed(0)).unwrap();
        assert_eq!(
            k.impute(&holed(vec![0.0, 0.0], &[1, 0])).unwrap(),
            vec![0.0, 3.0]
        );
    }

    #[test]
    fn blind_training_predicts_zero() {
        let mut k = KnnImputer::new(1).unwrap();
        k.fit(&[holed(vec![5.0, 5.0], &[0, 0])], RunSeed(0))
            .unwrap();
        assert_eq!(
            k.impute(&holed(vec![1.0, 0.0], &[1, 0])).unwrap(),
            vec![1.0, 0.0]
        );
    }
}

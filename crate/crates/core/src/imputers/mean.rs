use serde_json::json;

use super::{global_mean, Imputer};
use crate::error::{Error, Result};
use crate::seed::RunSeed;
use crate::types::SeriesWindow;

/// Fills each hidden position with the training mean at that position.
#[derive(Debug, Clone, Default)]
pub struct MeanImputer {
    fitted: Option<Fitted>,
}

#[derive(Debug, Clone)]
struct Fitted {
    position_means: Vec<f64>,
    global: f64,
}

impl MeanImputer {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Imputer for MeanImputer {
    fn spec(&self) -> String {
        "mean".into()
    }

    fn fit(&mut self, train: &[SeriesWindow], _seed: RunSeed) -> Result<()> {
        let w = train.iter().map(SeriesWindow::len).max().unwrap_or(0);
        let global = global_mean(train);
        let mut sums = vec![0.0; w];
        let mut counts = vec![0usize; w];
        for win in train {
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
        Ok(window
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                if window.mask.get(i) {
                    *v
                } else {
                    f.position_means.get(i).copied().unwrap_or(f.global)
                }
            })
            .collect())
    }

    fn state(&self) -> serde_json::Value {
        match &self.fitted {
            Some(f) => json!({"position_means": f.position_means, "global_mean": f.global}),
            None => serde_json::Value::Null,
        }
    }
}

use nalgebra::{DMatrix, DVector};
use serde_json::json;

use super::{global_mean, Imputer};
use crate::error::{Error, Result};
use crate::seed::RunSeed;
use crate::types::SeriesWindow;

/// Autoregressive order-`p` ridge regression, run forward and backward over
/// each window; where both directions reach a hole their predictions are
/// averaged.
#[derive(Debug, Clone)]
pub struct RidgeImputer {
    order: usize,
    lambda: f64,
    fitted: Option<Fitted>,
}

#[derive(Debug, Clone)]
struct Fitted {
    forward: Vec<f64>,
    backward: Vec<f64>,
    global: f64,
    bound: f64,
}

impl RidgeImputer {
    pub fn new(order: usize, lambda: f64) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidConfig("ridge order must be >= 1".into()));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "ridge lambda {lambda} must be >= 0"
            )));
        }
        Ok(RidgeImputer {
            order,
            lambda,
            fitted: None,
        })
    }

    pub(crate) fn parse(args: Option<&str>) -> Result<Self> {
        let bad = |a: &str| Error::InvalidConfig(format!("ridge: expected P[,LAMBDA], got `{a}`"));
        match args {
            None => Self::new(3, 1e-3),
            Some(a) => {
                let (p, l) = match a.split_once(',') {
                    Some((p, l)) => (p, Some(l)),
                    None => (a, None),
                };
                let p = p.trim().parse().map_err(|_| bad(a))?;
                let l = match l {
                    Some(l) => l.trim().parse().map_err(|_| bad(a))?,
                    None => 1e-3,
                };
                Self::new(p, l)
            }
        }
    }

    /// Fitted `(forward, backward)` coefficients, lag 1 first.
    pub fn coefficients(&self) -> Option<(&[f64], &[f64])> {
        self.fitted
            .as_ref()
            .map(|f| (f.forward.as_slice(), f.backward.as_slice()))
    }
}

fn solve(rows: &[(Vec<f64>, f64)], p: usize, lambda: f64) -> Vec<f64> {
    if rows.is_empty() {
        return vec![0.0; p];
    }
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    for (x, y) in rows {
        for a in 0..p {
            xty[a] += x[a] * y;
            for b in 0..p {
                xtx[(a, b)] += x[a] * x[b];
            }
        }
    }
    for a in 0..p {
        xtx[(a, a)] += lambda;
    }
    let beta = match xtx.clone().cholesky() {
        Some(c) => c.solve(&xty),
        None => xtx
            .svd(true, true)
            .solve(&xty, 1e-12)
            .unwrap_or_else(|_| DVector::zeros(p)),
    };
    beta.iter().copied().collect()
}

/// Lagged rows `([x_{t-1}, .., x_{t-p}], x_t)` where all p+1 are visible.
fn lag_rows(values: &[f64], visible: &[bool], p: usize) -> Vec<(Vec<f64>, f64)> {
    (p..values.len())
        .filter(|&t| (t - p..=t).all(|i| visible[i]))
        .map(|t| ((1..=p).map(|l| values[t - l]).collect(), values[t]))
        .collect()
}

/// Fill holes left to right from the `p` previous (possibly filled) values.
fn sweep(values: &[f64], visible: &[bool], coef: &[f64], bound: f64) -> Vec<Option<f64>> {
    let p = coef.len();
    let mut filled: Vec<Option<f64>> = values
        .iter()
        .zip(visible)
        .map(|(v, vis)| vis.then_some(*v))
        .collect();
    let mut out = vec![None; values.len()];
    for t in 0..values.len() {
        if visible[t] || t < p {
            continue;
        }
        let hist: Option<f64> = (1..=p)
            .map(|l| filled[t - l].map(|v| coef[l - 1] * v))
            .sum();
        if let Some(pred) = hist {
            let pred = pred.clamp(-bound, bound);
            filled[t] = Some(pred);
            out[t] = Some(pred);
        }
    }
    out
}

impl Imputer for RidgeImputer {
    fn spec(&self) -> String {
        format!("ridge:{},{}", self.order, self.lambda)
    }

    fn fit(&mut self, train: &[SeriesWindow], _seed: RunSeed) -> Result<()> {
        if train.is_empty() {
            return Err(Error::InvalidConfig(
                "ridge needs at least one training window".into(),
            ));
        }
        let p = self.order;
        let mut fwd = Vec::new();
        let mut bwd = Vec::new();
        let mut bound = 0.0f64;
        for w in train {
            let vis = w.mask.bits();
            fwd.extend(lag_rows(&w.values, vis, p));
            let rv: Vec<f64> = w.values.iter().rev().copied().collect();
            let rm: Vec<bool> = vis.iter().rev().copied().collect();
            bwd.extend(lag_rows(&rv, &rm, p));
            for (_, v) in w.observed() {
                bound = bound.max(v.abs());
            }
        }
        self.fitted = Some(Fitted {
            forward: solve(&fwd, p, self.lambda),
            backward: solve(&bwd, p, self.lambda),
            global: global_mean(train),
            bound: 2.0 * bound.max(1e-9),
        });
        Ok(())
    }

    fn impute(&self, window: &SeriesWindow) -> Result<Vec<f64>> {
        let f = self
            .fitted
            .as_ref()
            .ok_or_else(|| Error::NotFitted(self.spec()))?;
        let vis = window.mask.bits();
        let fwd = sweep(&window.values, vis, &f.forward, f.bound);
        let rv: Vec<f64> = window.values.iter().rev().copied().collect();
        let rm: Vec<bool> = vis.iter().rev().copied().collect();
        let mut bwd = sweep(&rv, &rm, &f.backward, f.bound);
        bwd.reverse();
        Ok((0..window.len())
            .map(|i| {
                if vis[i] {
                    return window.values[i];
                }
                match (fwd[i], bwd[i]) {
                    (Some(a), Some(b)) => 0.5 * (a + b),
                    (Some(a), None) | (None, Some(a)) => a,
                    (None, None) => f.global,
                }
            })
            .collect())
    }

    fn state(&self) -> serde_json::Value {
        match &self.fitted {
            Some(f) => json!({
                "order": self.order,
                "lambda": self.lambda,
                "forward": f.forward,
                "backward": f.backward,
                "global_mean": f.global,
            }),
            None => json!({"order": self.order, "lambda": self.lambda}),
        }
    }
}

//! The imputer contract, a name-keyed registry of implementations, and the
//! loss used to compare them.
//!
//! Every imputer fills hidden positions and passes visible ones through
//! untouched. Anything heavier than the built-ins runs out of process
//! behind the bridge protocol.

mod bridge;
mod knn;
mod linear;
mod mean;
mod ridge;

pub use bridge::{
    serve, BridgeImputer, BridgeMessage, ErrorPayload, FitPayload, ImputePayload, ImputeResult,
    LossPayload, LossResult, MessageKind, WireWindow,
};
pub use knn::KnnImputer;
pub use linear::LinearImputer;
pub use mean::MeanImputer;
pub use ridge::RidgeImputer;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::seed::RunSeed;
use crate::types::{MaskVector, SeriesWindow};

pub trait Imputer: Send + Sync {
    /// The spec string that recreates this imputer through the registry.
    fn spec(&self) -> String;

    fn fit(&mut self, train: &[SeriesWindow], seed: RunSeed) -> Result<()>;

    /// Length-`w` output, finite everywhere, equal to the input at visible
    /// positions.
    fn impute(&self, window: &SeriesWindow) -> Result<Vec<f64>>;

    fn impute_batch(&self, windows: &[SeriesWindow]) -> Result<Vec<Vec<f64>>> {
        windows.par_iter().map(|w| self.impute(w)).collect()
    }

    /// Fitted parameters, written to the per-cluster model artifact.
    fn state(&self) -> serde_json::Value;

    /// Windows that had to fall back to the global mean.
    fn fallbacks(&self) -> usize {
        0
    }
}

/// Mean squared error over the positions where `eval_mask` is 0.
pub fn mse_loss(pred: &[f64], truth: &[f64], eval_mask: &MaskVector) -> Result<f64> {
    let mut acc = LossAccumulator::default();
    acc.add(pred, truth, eval_mask)?;
    acc.mse()
}

/// Pools squared errors across windows so each scored position weighs the
/// same.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossAccumulator {
    pub sse: f64,
    pub count: usize,
}

impl LossAccumulator {
    pub fn add(&mut self, pred: &[f64], truth: &[f64], eval_mask: &MaskVector) -> Result<()> {
        if pred.len() != truth.len() || pred.len() != eval_mask.len() {
            return Err(Error::LengthMismatch {
                expected: eval_mask.len(),
                actual: pred.len().min(truth.len()),
            });
        }
        for i in eval_mask.hidden() {
            let d = pred[i] - truth[i];
            self.sse += d * d;
            self.count += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &LossAccumulator) {
        self.sse += other.sse;
        self.count += other.count;
    }

    pub fn mse(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::EmptyEval);
        }
        Ok(self.sse / self.count as f64)
    }
}

/// Impute `masked` and score against `truth` at its hidden positions.
pub fn corpus_loss(
    imputer: &dyn Imputer,
    masked: &[SeriesWindow],
    truth: &[&[f64]],
) -> Result<f64> {
    let preds = imputer.impute_batch(masked)?;
    let mut acc = LossAccumulator::default();
    for ((p, w), t) in preds.iter().zip(masked).zip(truth) {
        acc.add(p, t, &w.mask)?;
    }
    acc.mse()
}

pub(crate) fn global_mean(train: &[SeriesWindow]) -> f64 {
    let (sum, n) = train
        .iter()
        .flat_map(|w| w.observed())
        .fold((0.0, 0usize), |(s, n), (_, v)| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub(crate) fn check_output(window: &SeriesWindow, out: &[f64], who: &str) -> Result<()> {
    if out.len() != window.len() {
        return Err(Error::LengthMismatch {
            expected: window.len(),
            actual: out.len(),
        });
    }
    for (i, v) in out.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Bridge(format!(
                "{who} produced non-finite value at {i}"
            )));
        }
        if window.mask.get(i) && v.to_bits() != window.values[i].to_bits() {
            return Err(Error::Bridge(format!("{who} altered visible position {i}")));
        }
    }
    Ok(())
}

pub type Builder = Arc<dyn Fn(Option<&str>) -> Result<Box<dyn Imputer>> + Send + Sync>;

/// Imputer implementations keyed by name. A spec string is `name` or
/// `name:args`.
#[derive(Clone, Default)]
pub struct ImputerRegistry {
    builders: BTreeMap<String, Builder>,
}

impl fmt::Debug for ImputerRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.builders.keys()).finish()
    }
}

fn no_args(name: &'static str) -> impl Fn(Option<&str>) -> Result<()> {
    move |args| match args {
        None => Ok(()),
        Some(a) => Err(Error::InvalidConfig(format!(
            "imputer `{name}` takes no arguments, got `{a}`"
        ))),
    }
}

impl ImputerRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// mean, linear, knn[:K], ridge[:P[,LAMBDA]] and bridge:COMMAND.
    pub fn builtin() -> Self {
        Self::builtin_with_bridge_batch(256)
    }

    pub fn builtin_with_bridge_batch(batch: usize) -> Self {
        let mut r = Self::empty();
        r.register("mean", |a| {
            no_args("mean")(a)?;
            Ok(Box::new(MeanImputer::new()))
        });
        r.register("linear", |a| {
            no_args("linear")(a)?;
            Ok(Box::new(LinearImputer::new()))
        });
        r.register("knn", |a| Ok(Box::new(KnnImputer::parse(a)?)));
        r.register("ridge", |a| Ok(Box::new(RidgeImputer::parse(a)?)));
        r.register("bridge", move |a| match a {
            Some(cmd) if !cmd.trim().is_empty() => Ok(Box::new(BridgeImputer::new(cmd, batch))),
            _ => Err(Error::InvalidConfig(
                "bridge imputer needs a command: bridge:<command>".into(),
            )),
        });
        r
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        builder: impl Fn(Option<&str>) -> Result<Box<dyn Imputer>> + Send + Sync + 'static,
    ) {
        self.builders.insert(name.into(), Arc::new(builder));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.builders.keys().map(String::as_str)
    }

    /// Resolve a spec string into a factory. Argument errors surface here
    /// rather than on first use.
    pub fn factory(&self, spec: &str) -> Result<ImputerFactory> {
        let (name, args) = match spec.split_once(':') {
            Some((n, a)) => (n, Some(a.to_string())),
            None => (spec, None),
        };
        let builder = self
            .builders
            .get(name)
            .ok_or_else(|| Error::UnknownImputer(spec.to_string()))?
            .clone();
        let factory = ImputerFactory {
            spec: spec.to_string(),
            args,
            builder,
        };
        factory.make()?;
        Ok(factory)
    }

    pub fn build(&self, spec: &str) -> Result<Box<dyn Imputer>> {
        self.factory(spec)?.make()
    }
}

/// Makes fresh, unfitted imputers of one configured kind.
#[derive(Clone)]
pub struct ImputerFactory {
    spec: String,
    args: Option<String>,
    builder: Builder,
}

impl fmt::Debug for ImputerFactory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ImputerFactory")
            .field("spec", &self.spec)
            .finish()
    }
}

impl ImputerFactory {
    pub fn spec(&self) -> &str {
        &self.spec
    }

    pub fn make(&self) -> Result<Box<dyn Imputer>> {
        (self.builder)(self.args.as_deref())
    }

    /// Make and fit in one step.
    pub fn fit(&self, train: &[SeriesWindow], seed: RunSeed) -> Result<Box<dyn Imputer>> {
        let mut imp = self.make()?;
        imp.fit(train, seed)?;
        Ok(imp)
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::Rng;

    pub fn holed(values: Vec<f64>, bits: &[u8]) -> SeriesWindow {
        SeriesWindow::new("t", 0, values, MaskVector::from_u8(bits)).unwrap()
    }

    pub fn random_windows(n: usize, w: usize, p_missing: f64, seed: u64) -> Vec<SeriesWindow> {
        let mut rng = RunSeed(seed).rng();
        (0..n)
            .map(|i| {
                let phase: f64 = rng.random_range(0.0..6.0);
                let v = (0..w).map(|t| (t as f64 * 0.3 + phase).sin()).collect();
                let bits = (0..w).map(|_| !rng.random_bool(p_missing)).collect();
                SeriesWindow::new(format!("r{i}"), 0, v, MaskVector::new(bits)).unwrap()
            })
            .collect()
    }
}

//! Minimum artificial mask search.
//!
//! For each rate on a geometric schedule an oracle (trained on artificial
//! masks only, several seeded runs) and a projection model (trained on real
//! plus artificial masks, one run) are scored on held-out complete windows.
//! The first rate where the two agree within twice the oracle's spread is
//! the minimum effective mask.

use std::collections::HashSet;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imputers::{corpus_loss, Imputer, ImputerFactory, LossAccumulator};
use crate::patterns::{
    artificial_mask, draw_art_masks, project_cluster, ProjectedSample, Projection,
};
use crate::seed::RunSeed;
use crate::types::{apply_mask, mask_and, MaskVector, SeriesWindow};

/// Floor for the oracle spread so a deterministic oracle still has a
/// non-zero convergence threshold.
pub const SIGMA_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskSearchConfig {
    pub m_min: f64,
    pub growth: f64,
    pub max_iters: usize,
    pub oracle_runs: usize,
    pub val_frac: f64,
}

impl Default for MaskSearchConfig {
    fn default() -> Self {
        MaskSearchConfig {
            m_min: 0.01,
            growth: 1.0,
            max_iters: 10,
            oracle_runs: 5,
            val_frac: 0.2,
        }
    }
}

impl MaskSearchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.m_min > 0.0 && self.m_min <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "m_min {} not in (0,1]",
                self.m_min
            )));
        }
        if !(self.growth > 0.0 && self.growth.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "growth {} must be > 0",
                self.growth
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("max_iters must be >= 1".into()));
        }
        if self.oracle_runs < 2 {
            return Err(Error::InvalidConfig("oracle_runs must be >= 2".into()));
        }
        if !(self.val_frac > 0.0 && self.val_frac < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "val_frac {} not in (0,1)",
                self.val_frac
            )));
        }
        Ok(())
    }
}

/// `m_min (1 + growth)^i` for `i < max_iters`, ending at the first value
/// that reaches 1 (clamped to 1).
pub fn mask_schedule(cfg: &MaskSearchConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for i in 0..cfg.max_iters {
        let m = cfg.m_min * (1.0 + cfg.growth).powi(i as i32);
        if m >= 1.0 {
            out.push(1.0);
            break;
        }
        out.push(m);
    }
    Ok(out)
}

/// One cluster's held-out windows and projected training samples.
#[derive(Debug, Clone)]
pub struct ClusterData {
    /// Complete held-out windows.
    pub validation: Vec<SeriesWindow>,
    /// Real patterns laid over the validation windows when scoring the
    /// projection model.
    pub val_patterns: Vec<MaskVector>,
    pub projection: Projection,
}

impl ClusterData {
    /// Split `complete` into validation and projection targets, then pair
    /// every incomplete window with a target.
    pub fn prepare(
        complete: &[&SeriesWindow],
        incomplete: &[&SeriesWindow],
        val_frac: f64,
        seed: RunSeed,
    ) -> Result<Self> {
        if complete.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "cluster has {} complete windows; at least 2 needed for validation and training",
                complete.len()
            )));
        }
        let mut order: Vec<usize> = (0..complete.len()).collect();
        order.shuffle(&mut seed.stream("split").rng());
        let n_val =
            ((complete.len() as f64 * val_frac).round() as usize).clamp(1, complete.len() - 1);
        let (val_idx, target_idx) = order.split_at(n_val);
        let mut val_idx = val_idx.to_vec();
        val_idx.sort_unstable();
        let mut target_idx = target_idx.to_vec();
        target_idx.sort_unstable();
        let validation: Vec<SeriesWindow> = val_idx.iter().map(|&i| complete[i].clone()).collect();
        let targets: Vec<&SeriesWindow> = target_idx.iter().map(|&i| complete[i]).collect();

        let val_ids: HashSet<String> = validation.iter().map(SeriesWindow::id).collect();
        if targets.iter().any(|t| val_ids.contains(&t.id())) {
            return Err(Error::InvalidConfig(
                "validation windows overlap projection targets".into(),
            ));
        }

        let w = complete[0].len();
        let val_patterns = if incomplete.is_empty() {
            vec![MaskVector::all_observed(w); validation.len()]
        } else {
            let mut perm: Vec<usize> = (0..incomplete.len()).collect();
            perm.shuffle(&mut seed.stream("val-patterns").rng());
            (0..validation.len())
                .map(|j| incomplete[perm[j % perm.len()]].mask.clone())
                .collect()
        };
        let projection = project_cluster(incomplete, &targets, seed.stream("project"))?;
        Ok(ClusterData {
            validation,
            val_patterns,
            projection,
        })
    }

    pub fn samples(&self) -> &[ProjectedSample] {
        &self.projection.samples
    }

    /// Artificial evaluation masks at `rate`, each hiding at least one
    /// position so every window is scored.
    fn eval_masks(&self, rate: f64, seed: RunSeed) -> Vec<MaskVector> {
        self.validation
            .iter()
            .enumerate()
            .map(|(j, v)| {
                let mut rng = seed.child(j as u64).rng();
                let mut m = artificial_mask(v.len(), rate, &mut rng);
                if m.zeros() == 0 && !m.is_empty() {
                    let pos = rand::Rng::random_range(&mut rng, 0..m.len());
                    m.set(pos, false);
                }
                m
            })
            .collect()
    }

    fn eval_windows(&self, masks: &[MaskVector], with_real: bool) -> Result<Vec<SeriesWindow>> {
        self.validation
            .iter()
            .zip(masks)
            .zip(&self.val_patterns)
            .map(|((v, art), real)| {
                let m = if with_real {
                    mask_and(real, art)?
                } else {
                    art.clone()
                };
                apply_mask(v, &m)
            })
            .collect()
    }

    fn score(&self, model: &dyn Imputer, windows: &[SeriesWindow]) -> Result<f64> {
        let truth: Vec<&[f64]> = self
            .validation
            .iter()
            .map(|v| v.values.as_slice())
            .collect();
        corpus_loss(model, windows, &truth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub m: f64,
    pub l_oracle: f64,
    pub sigma: f64,
    pub l_real: f64,
    pub gap: f64,
}

impl TracePoint {
    pub fn threshold(&self) -> f64 {
        2.0 * self.sigma.max(SIGMA_FLOOR)
    }

    pub fn converged(&self) -> bool {
        self.gap < self.threshold()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSearchTrace {
    pub points: Vec<TracePoint>,
    pub m_star: f64,
    pub star_index: usize,
    pub converged: bool,
    /// Some oracle spread was below the floor.
    pub sigma_floored: bool,
}

impl MaskSearchTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("m,L_oracle,sigma,L_real,gap\n");
        for p in &self.points {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                p.m, p.l_oracle, p.sigma, p.l_real, p.gap
            ));
        }
        s
    }
}

fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Walk the mask schedule and pick the minimum effective mask, or the
/// smallest gap if no point converges.
///
/// Every schedule point is evaluated (in parallel); points after the first
/// converged one are kept in the trace but never selected.
pub fn min_mask_search(
    data: &ClusterData,
    factory: &ImputerFactory,
    cfg: &MaskSearchConfig,
    seed: RunSeed,
) -> Result<MaskSearchTrace> {
    let schedule = mask_schedule(cfg)?;
    if data.samples().is_empty() {
        return Err(Error::InvalidConfig(
            "mask search needs projected samples".into(),
        ));
    }
    let runs = cfg.oracle_runs;
    let jobs: Vec<(usize, usize)> = (0..schedule.len())
        .flat_map(|i| (0..=runs).map(move |r| (i, r)))
        .collect();
    let losses: Vec<f64> = jobs
        .par_iter()
        .map(|&(i, r)| {
            let m = schedule[i];
            let eval = data.eval_masks(m, seed.stream("eval").child(i as u64));
            if r < runs {
                let s = seed.stream("oracle").child(i as u64).child(r as u64);
                let train: Vec<_> = draw_art_masks(data.samples(), m, s)
                    .iter()
                    .map(ProjectedSample::mask_view)
                    .collect();
                let model = factory.fit(&train, s.stream("fit"))?;
                data.score(model.as_ref(), &data.eval_windows(&eval, false)?)
            } else {
                let s = seed.stream("real").child(i as u64);
                let train: Vec<_> = draw_art_masks(data.samples(), m, s)
                    .iter()
                    .map(ProjectedSample::combined_view)
                    .collect();
                let model = factory.fit(&train, s.stream("fit"))?;
                data.score(model.as_ref(), &data.eval_windows(&eval, true)?)
            }
        })
        .collect::<Result<_>>()?;

    let mut points = Vec::with_capacity(schedule.len());
    for (i, &m) in schedule.iter().enumerate() {
        let row = &losses[i * (runs + 1)..(i + 1) * (runs + 1)];
        let oracle = &row[..runs];
        let l_oracle = oracle.iter().sum::<f64>() / runs as f64;
        let sigma = sample_std(oracle);
        let l_real = row[runs];
        points.push(TracePoint {
            m,
            l_oracle,
            sigma,
            l_real,
            gap: (l_oracle - l_real).abs(),
        });
    }
    // At m = 1 every position is hidden and both models predict blind, so
    // their losses agree trivially. That point is only chosen if it is the
    // whole schedule.
    let selectable = if points.len() > 1 && points[points.len() - 1].m >= 1.0 {
        points.len() - 1
    } else {
        points.len()
    };
    let sigma_floored = points[..selectable].iter().any(|p| p.sigma < SIGMA_FLOOR);
    if sigma_floored {
        warn!("oracle spread below {SIGMA_FLOOR:e}; convergence threshold floored");
    }
    let (star_index, converged) = match points[..selectable].iter().position(TracePoint::converged)
    {
        Some(i) => (i, true),
        None => {
            let i = (0..selectable)
                .min_by(|&a, &b| points[a].gap.total_cmp(&points[b].gap).then(a.cmp(&b)))
                .expect("non-empty schedule");
            (i, false)
        }
    };
    debug!("m* = {} (converged: {converged})", points[star_index].m);
    Ok(MaskSearchTrace {
        m_star: points[star_index].m,
        star_index,
        converged,
        sigma_floored,
        points,
    })
}

pub struct FinalModel {
    pub model: Box<dyn Imputer>,
    pub val_loss: f64,
    pub train_windows: usize,
}

/// Train on real plus artificial masks at `m_star` and score on the
/// validation windows under real patterns and a fresh artificial mask.
pub fn train_final(
    data: &ClusterData,
    m_star: f64,
    factory: &ImputerFactory,
    seed: RunSeed,
) -> Result<FinalModel> {
    let train: Vec<_> = draw_art_masks(data.samples(), m_star, seed.stream("final"))
        .iter()
        .map(ProjectedSample::combined_view)
        .collect();
    let model = factory.fit(&train, seed.stream("final-fit"))?;
    let eval = data.eval_masks(m_star, seed.stream("final-eval"));
    let val_loss = data.score(model.as_ref(), &data.eval_windows(&eval, true)?)?;
    Ok(FinalModel {
        model,
        val_loss,
        train_windows: train.len(),
    })
}

/// The validation windows as masked by [`train_final`]'s scoring step.
pub fn final_eval_windows(
    data: &ClusterData,
    m_star: f64,
    seed: RunSeed,
) -> Result<Vec<SeriesWindow>> {
    let eval = data.eval_masks(m_star, seed.stream("final-eval"));
    data.eval_windows(&eval, true)
}

/// Squared errors of `model` on [`final_eval_windows`], for pooling across
/// clusters.
pub fn final_eval_errors(
    data: &ClusterData,
    model: &dyn Imputer,
    m_star: f64,
    seed: RunSeed,
) -> Result<LossAccumulator> {
    let windows = final_eval_windows(data, m_star, seed)?;
    let preds = model.impute_batch(&windows)?;
    let mut acc = LossAccumulator::default();
    for ((p, w), v) in preds.iter().zip(&windows).zip(&data.validation) {
        acc.add(p, &v.values, &w.mask)?;
    }
    Ok(acc)
}

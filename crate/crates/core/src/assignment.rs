//! Capacity- and PAC-aware assignment of incomplete windows to clusters.
//!
//! Windows are scanned in a seeded random order. Each goes to the nearest
//! cluster (by corrected DTW-AROW to the centroid) that still needs
//! observable mass and has room; when none qualifies it falls back to the
//! least populated cluster. Scanning stops once every cluster has met its
//! target.

use log::warn;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::distance::dtw_arow_to_centroid;
use crate::error::{Error, Result};
use crate::pac::pac_sample_bound;
use crate::seed::RunSeed;
use crate::types::{PacConfig, SeriesWindow};

/// Fraction of a window left visible after real missingness `alpha` and
/// training-time masking `mask_ratio`.
pub fn observable_ratio(alpha: f64, mask_ratio: f64) -> f64 {
    (1.0 - alpha) * (1.0 - mask_ratio)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Capacity {
    /// Twice the number of windows the initial target needs.
    Auto,
    Fixed(usize),
    Unlimited,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    Pac,
    Unlimited,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssignConfig {
    /// Anticipated training mask ratio used in the observable ratio.
    pub mask_ratio: f64,
    pub capacity: Capacity,
    pub target: TargetMode,
    /// Windows whose distances are computed together before admission.
    pub chunk: usize,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            mask_ratio: 0.1,
            capacity: Capacity::Auto,
            target: TargetMode::Pac,
            chunk: 256,
        }
    }
}

impl AssignConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::InvalidConfig(format!(
                "mask_ratio {} not in [0,1)",
                self.mask_ratio
            )));
        }
        if self.chunk == 0 {
            return Err(Error::InvalidConfig("assignment chunk must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Member {
    /// Index into the incomplete windows passed to [`assign_incomplete`].
    pub index: usize,
    pub id: String,
    pub alpha: f64,
    pub gamma: f64,
    pub distance: f64,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub members: Vec<Member>,
    pub observable: f64,
    /// Required observable mass; `None` when unreachable (`1 - alpha - M <= 0`)
    /// or targets are disabled.
    pub target: Option<f64>,
    /// `None` means unlimited.
    pub capacity: Option<usize>,
    pub mean_alpha: f64,
}

impl ClusterState {
    fn met(&self) -> bool {
        self.target.is_some_and(|t| self.observable >= t)
    }

    fn has_room(&self) -> bool {
        self.capacity.is_none_or(|c| self.members.len() < c)
    }

    pub fn fallback_count(&self) -> usize {
        self.members.iter().filter(|m| m.fallback).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentState {
    pub clusters: Vec<ClusterState>,
    pub n_req: u64,
    pub scanned: usize,
    /// Ids never scanned because every target was met first.
    pub unscanned: Vec<String>,
    /// Ids skipped because they had no observed values.
    pub skipped: Vec<String>,
    pub early_exit: bool,
}

impl AssignmentState {
    pub fn assigned(&self) -> usize {
        self.clusters.iter().map(|c| c.members.len()).sum()
    }
}

/// Observable mass a cluster needs so that `|S| (1 - alpha - M) >= N_req`
/// holds after training-time masking, expressed in units of
/// `(1 - alpha)(1 - M)`.
pub fn pac_target(n_req: u64, mean_alpha: f64, mask_ratio: f64) -> Option<f64> {
    let usable = 1.0 - mean_alpha - mask_ratio;
    (usable > 0.0).then(|| n_req as f64 * observable_ratio(mean_alpha, mask_ratio) / usable)
}

pub fn assign_incomplete(
    incomplete: &[SeriesWindow],
    centroids: &[Vec<f64>],
    pac: &PacConfig,
    cfg: &AssignConfig,
    seed: RunSeed,
) -> Result<AssignmentState> {
    if centroids.is_empty() {
        return Err(Error::InvalidConfig(
            "assignment needs at least one cluster".into(),
        ));
    }
    pac.validate()?;
    cfg.validate()?;
    let m = cfg.mask_ratio;
    let n_req = pac_sample_bound(pac);

    let (usable, skipped): (Vec<usize>, Vec<usize>) =
        (0..incomplete.len()).partition(|&i| incomplete[i].mask.ones() > 0);
    let alpha = |i: usize| incomplete[i].mask.missing_rate();
    let prior_alpha = if usable.is_empty() {
        0.0
    } else {
        usable.iter().map(|&i| alpha(i)).sum::<f64>() / usable.len() as f64
    };
    let target = match cfg.target {
        TargetMode::Pac => pac_target(n_req, prior_alpha, m),
        TargetMode::Unlimited => None,
    };
    if cfg.target == TargetMode::Pac && target.is_none() {
        warn!("PAC target unreachable: mean missing rate {prior_alpha:.3} + mask ratio {m} >= 1");
    }
    let capacity = match cfg.capacity {
        Capacity::Fixed(c) => Some(c),
        Capacity::Unlimited => None,
        Capacity::Auto => {
            target.map(|t| 2 * (t / observable_ratio(prior_alpha, m)).ceil() as usize)
        }
    };
    let mut clusters: Vec<ClusterState> = (0..centroids.len())
        .map(|_| ClusterState {
            members: Vec::new(),
            observable: 0.0,
            target,
            capacity,
            mean_alpha: prior_alpha,
        })
        .collect();

    let mut order = usable;
    order.shuffle(&mut seed.rng());
    let mut scanned = 0;
    let mut early_exit = false;
    'scan: for chunk in order.chunks(cfg.chunk) {
        let dists: Vec<Vec<f64>> = chunk
            .par_iter()
            .map(|&i| {
                centroids
                    .iter()
                    .map(|c| dtw_arow_to_centroid(&incomplete[i], c))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        for (&i, d) in chunk.iter().zip(dists) {
            if cfg.target == TargetMode::Pac && clusters.iter().all(ClusterState::met) {
                early_exit = true;
                break 'scan;
            }
            let mut ranked: Vec<usize> = (0..centroids.len()).collect();
            ranked.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
            let (c, fallback) = match ranked
                .iter()
                .find(|&&c| !clusters[c].met() && clusters[c].has_room())
            {
                Some(&c) => (c, false),
                None => {
                    let c = *ranked
                        .iter()
                        .min_by_key(|&&c| clusters[c].members.len())
                        .expect("at least one cluster");
                    (c, true)
                }
            };
            let a = alpha(i);
            let gamma = observable_ratio(a, m);
            let state = &mut clusters[c];
            state.observable += gamma;
            state.members.push(Member {
                index: i,
                id: incomplete[i].id(),
                alpha: a,
                gamma,
                distance: d[c],
                fallback,
            });
            let n = state.members.len() as f64;
            state.mean_alpha += (a - state.mean_alpha) / n;
            if cfg.target == TargetMode::Pac {
                state.target = pac_target(n_req, state.mean_alpha, m);
            }
            scanned += 1;
        }
    }
    let unscanned = order[scanned..]
        .iter()
        .map(|&i| incomplete[i].id())
        .collect();
    Ok(AssignmentState {
        clusters,
        n_req,
        scanned,
        unscanned,
        skipped: skipped.iter().map(|&i| incomplete[i].id()).collect(),
        early_exit,
    })
}

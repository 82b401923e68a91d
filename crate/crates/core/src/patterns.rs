//! Missingness pattern projection and structure analysis.
//!
//! Real masks from a cluster's incomplete windows are copied onto its
//! complete windows, which gives hidden positions with known ground truth.
//! A KL test on mask position distributions decides whether the cluster's
//! masks carry structure worth learning from.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::RunSeed;
use crate::types::{apply_mask, mask_and, MaskVector, SeriesWindow};

/// Laplace smoothing added to every position before normalising a mask.
pub const KL_SMOOTHING: f64 = 1e-3;

/// Accept a cluster when strictly more than this fraction of its patterns
/// sit closer to a sibling pattern than to a random one.
pub const OMEGA_STRUCT: f64 = 2.0 / 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedSample {
    pub source_id: String,
    pub target_series: String,
    pub target_index: usize,
    pub ground_truth: Vec<f64>,
    /// Copied verbatim from the source window.
    pub proj_mask: MaskVector,
    /// Artificial training-time mask; all observed until one is drawn.
    pub art_mask: MaskVector,
}

impl ProjectedSample {
    pub fn target_id(&self) -> String {
        format!("{}#{}", self.target_series, self.target_index)
    }

    pub fn len(&self) -> usize {
        self.ground_truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ground_truth.is_empty()
    }

    pub fn truth(&self) -> SeriesWindow {
        SeriesWindow::complete(
            self.target_series.clone(),
            self.target_index,
            self.ground_truth.clone(),
        )
        .expect("ground truth is finite")
    }

    fn view(&self, m: &MaskVector) -> SeriesWindow {
        let mut w = apply_mask(&self.truth(), m).expect("mask length checked at construction");
        w.normalized = true;
        w
    }

    pub fn combined_mask(&self) -> MaskVector {
        mask_and(&self.proj_mask, &self.art_mask).expect("equal lengths")
    }

    /// Ground truth under the real (projected) mask only.
    pub fn proj_view(&self) -> SeriesWindow {
        self.view(&self.proj_mask)
    }

    /// Ground truth under the artificial mask only.
    pub fn mask_view(&self) -> SeriesWindow {
        self.view(&self.art_mask)
    }

    pub fn combined_view(&self) -> SeriesWindow {
        self.view(&self.combined_mask())
    }

    pub fn with_art(&self, art: MaskVector) -> Result<ProjectedSample> {
        if art.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: art.len(),
            });
        }
        Ok(ProjectedSample {
            art_mask: art,
            ..self.clone()
        })
    }
}

/// Copy the mask of `incomplete` onto the fully observed `complete`.
pub fn project(incomplete: &SeriesWindow, complete: &SeriesWindow) -> Result<ProjectedSample> {
    if !complete.is_complete() {
        return Err(Error::IncompleteTarget(complete.id()));
    }
    if incomplete.len() != complete.len() {
        return Err(Error::LengthMismatch {
            expected: complete.len(),
            actual: incomplete.len(),
        });
    }
    Ok(ProjectedSample {
        source_id: incomplete.id(),
        target_series: complete.series_id.clone(),
        target_index: complete.window_index,
        ground_truth: complete.values.clone(),
        proj_mask: incomplete.mask.clone(),
        art_mask: MaskVector::all_observed(complete.len()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub samples: Vec<ProjectedSample>,
    /// Samples beyond the first pass over the targets.
    pub recycled: usize,
    pub max_reuse: usize,
}

/// Pair every source with a target, walking a seeded permutation of the
/// targets round-robin so no target is used twice before all are used once.
pub fn project_cluster(
    sources: &[&SeriesWindow],
    targets: &[&SeriesWindow],
    seed: RunSeed,
) -> Result<Projection> {
    if targets.is_empty() {
        if sources.is_empty() {
            return Ok(Projection {
                samples: Vec::new(),
                recycled: 0,
                max_reuse: 0,
            });
        }
        return Err(Error::InvalidConfig(
            "no complete windows to project onto".into(),
        ));
    }
    let mut perm: Vec<usize> = (0..targets.len()).collect();
    perm.shuffle(&mut seed.rng());
    let samples = sources
        .iter()
        .enumerate()
        .map(|(i, s)| project(s, targets[perm[i % perm.len()]]))
        .collect::<Result<Vec<_>>>()?;
    Ok(Projection {
        recycled: sources.len().saturating_sub(targets.len()),
        max_reuse: sources.len().div_ceil(targets.len()),
        samples,
    })
}

fn smoothed(m: &MaskVector) -> Vec<f64> {
    let total = m.zeros() as f64 + m.len() as f64 * KL_SMOOTHING;
    m.bits()
        .iter()
        .map(|&b| (if b { 0.0 } else { 1.0 } + KL_SMOOTHING) / total)
        .collect()
}

/// KL divergence between the smoothed missing-position distributions of
/// two masks.
pub fn mask_kl(p: &MaskVector, q: &MaskVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            actual: q.len(),
        });
    }
    let (ps, qs) = (smoothed(p), smoothed(q));
    Ok(ps
        .iter()
        .zip(&qs)
        .map(|(a, b)| a * (a / b).ln())
        .sum::<f64>()
        .max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub n_pattern: usize,
    pub total: usize,
    pub ratio: f64,
    pub accepted: bool,
    pub reason: Option<String>,
    pub mean_kl_sibling: f64,
    pub mean_kl_random: f64,
}

/// Compare each pattern's KL to a random sibling against its KL to an iid
/// mask with the same missing rate.
///
/// Draws are keyed by pattern id, so the outcome does not depend on the
/// order patterns are given in.
pub fn structure_test(patterns: &[(String, MaskVector)], seed: RunSeed) -> Result<StructureReport> {
    if patterns.len() < 2 {
        return Ok(StructureReport {
            n_pattern: 0,
            total: patterns.len(),
            ratio: 0.0,
            accepted: false,
            reason: Some(format!(
                "{} pattern(s); at least 2 required",
                patterns.len()
            )),
            mean_kl_sibling: 0.0,
            mean_kl_random: 0.0,
        });
    }
    let mut sorted: Vec<&(String, MaskVector)> = patterns.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let pairs: Vec<(f64, f64)> = (0..sorted.len())
        .into_par_iter()
        .map(|i| {
            let (id, src) = sorted[i];
            let mut rng = seed.keyed(id).rng();
            let mut j = rng.random_range(0..sorted.len() - 1);
            if j >= i {
                j += 1;
            }
            let rate = src.missing_rate();
            let rand = MaskVector::new((0..src.len()).map(|_| !rng.random_bool(rate)).collect());
            Ok((mask_kl(src, &sorted[j].1)?, mask_kl(src, &rand)?))
        })
        .collect::<Result<_>>()?;
    let n_pattern = pairs.iter().filter(|(s, r)| s < r).count();
    let total = pairs.len();
    let ratio = n_pattern as f64 / total as f64;
    Ok(StructureReport {
        n_pattern,
        total,
        ratio,
        accepted: ratio > OMEGA_STRUCT,
        reason: (ratio <= OMEGA_STRUCT).then(|| format!("ratio {ratio:.3} <= {OMEGA_STRUCT:.3}")),
        mean_kl_sibling: pairs.iter().map(|p| p.0).sum::<f64>() / total as f64,
        mean_kl_random: pairs.iter().map(|p| p.1).sum::<f64>() / total as f64,
    })
}

/// Uniformly hide `rate * w` positions, with the fractional part settled
/// by a coin flip.
pub fn artificial_mask(w: usize, rate: f64, rng: &mut impl Rng) -> MaskVector {
    let target = rate.clamp(0.0, 1.0) * w as f64;
    let mut n = target.floor() as usize;
    let frac = target - target.floor();
    if frac > 0.0 && rng.random_bool(frac) {
        n += 1;
    }
    let mut bits = vec![true; w];
    for i in rand::seq::index::sample(rng, w, n.min(w)) {
        bits[i] = false;
    }
    MaskVector::new(bits)
}

/// Give every sample a fresh artificial mask at `rate`.
pub fn draw_art_masks(
    samples: &[ProjectedSample],
    rate: f64,
    seed: RunSeed,
) -> Vec<ProjectedSample> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = seed.child(i as u64).rng();
            let art = artificial_mask(s.len(), rate, &mut rng);
            s.with_art(art).expect("same length")
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSets {
    /// Real projected masks only.
    pub proj: Vec<SeriesWindow>,
    /// Artificial masks only.
    pub mask: Vec<SeriesWindow>,
    /// Both masks combined.
    pub proj_mask: Vec<SeriesWindow>,
}

pub fn build_training_sets(samples: &[ProjectedSample]) -> TrainingSets {
    TrainingSets {
        proj: samples.iter().map(ProjectedSample::proj_view).collect(),
        mask: samples.iter().map(ProjectedSample::mask_view).collect(),
        proj_mask: samples.iter().map(ProjectedSample::combined_view).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn complete(id: &str, v: Vec<f64>) -> SeriesWindow {
        SeriesWindow::complete(id, 0, v).unwrap()
    }

    fn holed(id: &str, bits: &[u8]) -> SeriesWindow {
        SeriesWindow::new(id, 0, vec![0.0; bits.len()], MaskVector::from_u8(bits)).unwrap()
    }

    fn block(w: usize, lo: usize, hi: usize) -> MaskVector {
        MaskVector::new((0..w).map(|i| !(lo..hi).contains(&i)).collect())
    }

    #[test]
    fn all_ones_projection_hides_nothing() {
        let s = project(&holed("a", &[1, 1, 1]), &complete("c", vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(s.proj_view().mask.zeros(), 0);
    }

    #[test]
    fn projection_keeps_truth() {
        let s = project(
            &holed("a", &[1, 0, 1, 0]),
            &complete("c", vec![5.0, 6.0, 7.0, 8.0]),
        )
        .unwrap();
        let v = s.proj_view();
        assert_eq!(v.observed().collect::<Vec<_>>(), vec![(0, 5.0), (2, 7.0)]);
        assert_eq!(s.ground_truth, vec![5.0, 6.0, 7.0, 8.0]);
        assert_eq!(s.source_id, "a#0");
    }

    #[test]
    fn incomplete_target_rejected() {
        assert!(matches!(
            project(&holed("a", &[1, 0]), &holed("b", &[1, 0])),
            Err(Error::IncompleteTarget(_))
        ));
    }

    #[test]
    fn round_robin_reuse_bound() {
        let sources: Vec<_> = (0..100)
            .map(|i| holed(&format!("s{i}"), &[1, 0, 1]))
            .collect();
        let targets: Vec<_> = (0..40)
            .map(|i| complete(&format!("t{i}"), vec![0.0, 1.0, 2.0]))
            .collect();
        let p = project_cluster(
            &sources.iter().collect::<Vec<_>>(),
            &targets.iter().collect::<Vec<_>>(),
            RunSeed(1),
        )
        .unwrap();
        assert_eq!(p.samples.len(), 100);
        let mut uses = std::collections::HashMap::new();
        for s in &p.samples {
            *uses.entry(s.target_id()).or_insert(0) += 1;
        }
        assert!(uses.values().all(|&n| n <= 3));
        assert_eq!(uses.len(), 40);
        assert_eq!((p.recycled, p.max_reuse), (60, 3));
    }

    #[test]
    fn kl_self_is_zero() {
        let m = MaskVector::from_u8(&[1, 0, 0, 1, 1, 0]);
        assert!(mask_kl(&m, &m).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_all_observed_is_finite() {
        let p = MaskVector::all_observed(8);
        let q = MaskVector::from_u8(&[0, 0, 1, 1, 1, 1, 1, 1]);
        let kl = mask_kl(&p, &q).unwrap();
        assert!(kl.is_finite() && kl >= 0.0);
    }

    #[test]
    fn kl_mirrored_blocks_closed_form() {
        let (p, q) = (block(96, 0, 48), block(96, 48, 96));
        let l = KL_SMOOTHING;
        let z = 48.0 + 96.0 * l;
        let (a, b) = ((1.0 + l) / z, l / z);
        let expected = 48.0 * (a - b) * (a / b).ln();
        let pq = mask_kl(&p, &q).unwrap();
        assert!((pq - expected).abs() < 1e-12);
        assert!((pq - mask_kl(&q, &p).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn identical_blocky_patterns_accepted() {
        let pats: Vec<_> = (0..30)
            .map(|i| (format!("p{i}"), block(96, 20, 40)))
            .collect();
        let r = structure_test(&pats, RunSeed(1)).unwrap();
        assert_eq!(r.ratio, 1.0);
        assert!(r.accepted);
    }

    #[test]
    fn complement_pair_rejected() {
        let pats = vec![
            ("a".to_string(), block(96, 0, 48)),
            ("b".to_string(), block(96, 48, 96)),
        ];
        let r = structure_test(&pats, RunSeed(4)).unwrap();
        assert_eq!((r.n_pattern, r.ratio, r.accepted), (0, 0.0, false));
        let l = KL_SMOOTHING;
        let z = 48.0 + 96.0 * l;
        let (a, b) = ((1.0 + l) / z, l / z);
        assert!((r.mean_kl_sibling - 48.0 * (a - b) * (a / b).ln()).abs() < 1e-12);
    }

    #[test]
    fn singleton_rejected_with_reason() {
        let r = structure_test(&[("a".into(), block(8, 0, 2))], RunSeed(0)).unwrap();
        assert!(!r.accepted);
        assert!(r.reason.is_some());
    }

    #[test]
    fn mcar_patterns_mostly_rejected() {
        let mut rejected = 0;
        for s in 0..10u64 {
            let mut rng = RunSeed(100 + s).rng();
            let pats: Vec<_> = (0..200)
                .map(|i| {
                    (
                        format!("p{i}"),
                        MaskVector::new((0..96).map(|_| rng.random_bool(0.5)).collect()),
                    )
                })
                .collect();
            if !structure_test(&pats, RunSeed(s)).unwrap().accepted {
                rejected += 1;
            }
        }
        assert!(rejected >= 9, "{rejected}/10");
    }

    #[test]
    fn artificial_mask_rates() {
        let mut rng = RunSeed(3).rng();
        assert_eq!(artificial_mask(96, 0.0, &mut rng).zeros(), 0);
        assert_eq!(artificial_mask(96, 1.0, &mut rng).zeros(), 96);
        assert_eq!(artificial_mask(100, 0.25, &mut rng).zeros(), 25);
    }

    #[test]
    fn training_set_identities() {
        let s = project(
            &holed("a", &[1, 0, 1, 1]),
            &complete("c", vec![1.0, 2.0, 3.0, 4.0]),
        )
        .unwrap();
        let all = build_training_sets(std::slice::from_ref(&s));
        assert_eq!(all.proj_mask, all.proj);
        let s2 = project(
            &holed("a", &[1, 1, 1, 1]),
            &complete("c", vec![1.0, 2.0, 3.0, 4.0]),
        )
        .unwrap()
        .with_art(MaskVector::from_u8(&[0, 1, 1, 0]))
        .unwrap();
        let all = build_training_sets(std::slice::from_ref(&s2));
        assert_eq!(all.proj_mask, all.mask);
    }

    fn arb_mask(w: usize) -> impl Strategy<Value = MaskVector> {
        prop::collection::vec(any::<bool>(), w).prop_map(MaskVector::new)
    }

    proptest! {
        #[test]
        fn kl_nonnegative((p, q) in (arb_mask(24), arb_mask(24))) {
            let kl = mask_kl(&p, &q).unwrap();
            prop_assert!(kl >= 0.0);
            if kl < 1e-12 {
                prop_assert_eq!(smoothed(&p).iter().zip(smoothed(&q)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) < 1e-9, true);
            }
        }

        #[test]
        fn combined_hides_at_least_each(
            (proj, art) in (arb_mask(16), arb_mask(16)),
            v in prop::collection::vec(-2.0f64..2.0, 16),
        ) {
            let src = SeriesWindow::new("s", 0, vec![0.0; 16], proj).unwrap();
            let s = project(&src, &complete("c", v.clone())).unwrap().with_art(art).unwrap();
            let sets = build_training_sets(std::slice::from_ref(&s));
            let z = sets.proj_mask[0].mask.zeros();
            prop_assert!(z >= sets.proj[0].mask.zeros().max(sets.mask[0].mask.zeros()));
            // Visible values plus retained truth rebuild the window.
            for (i, t) in s.ground_truth.iter().enumerate() {
                let w = &sets.proj_mask[0];
                let got = if w.mask.get(i) { w.values[i] } else { *t };
                prop_assert_eq!(got, v[i]);
            }
        }

        #[test]
        fn structure_order_invariant(seed in 0u64..1000, rot in 0usize..20) {
            let mut rng = RunSeed(seed).rng();
            let pats: Vec<_> = (0..20)
                .map(|i| (format!("p{i:02}"), MaskVector::new((0..32).map(|_| rng.random_bool(0.6)).collect())))
                .collect();
            let mut shuffled = pats.clone();
            shuffled.rotate_left(rot);
            prop_assert_eq!(structure_test(&pats, RunSeed(seed)).unwrap(), structure_test(&shuffled, RunSeed(seed)).unwrap());
        }
    }
}

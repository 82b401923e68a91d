//! Mini-batch k-means over complete windows and the Davies-Bouldin guided
//! search for the number of clusters.
//!
//! Centres are seeded with k-means++ on a sample, moved by per-centre
//! learning rates `1/count` over random mini-batches, then polished with a
//! few full Lloyd passes so the returned centroids are exact member means.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::RunSeed;
use crate::types::SeriesWindow;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub batch_size: usize,
    /// Mini-batch iterations; `None` means `100 * k`.
    pub iters: Option<usize>,
    /// Upper bound on full Lloyd passes after the mini-batch phase.
    pub refine_iters: usize,
    /// Independent seeded restarts; the one with the lowest inertia wins.
    pub n_init: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            batch_size: 1024,
            iters: None,
            refine_iters: 20,
            n_init: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    /// Cluster of each input point, in input order.
    pub assignments: Vec<usize>,
    /// Mean Euclidean distance from members to their centroid.
    pub sigma: Vec<f64>,
    /// Pairwise centroid distances.
    pub centroid_dists: Vec<Vec<f64>>,
}

impl ClusterModel {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    pub fn members(&self, cluster: usize) -> impl Iterator<Item = usize> + '_ {
        self.assignments
            .iter()
            .enumerate()
            .filter_map(move |(i, &a)| (a == cluster).then_some(i))
    }
}

/// Row-major point matrix.
struct Points<'a> {
    rows: Vec<&'a [f64]>,
    dim: usize,
}

impl<'a> Points<'a> {
    fn from_windows(windows: &'a [SeriesWindow]) -> Result<Self> {
        let dim = windows.first().map_or(0, SeriesWindow::len);
        for w in windows {
            if w.len() != dim {
                return Err(Error::LengthMismatch {
                    expected: dim,
                    actual: w.len(),
                });
            }
            if !w.is_complete() {
                return Err(Error::InvalidConfig(format!(
                    "clustering requires complete windows, {} has gaps",
                    w.id()
                )));
            }
        }
        Ok(Points {
            rows: windows.iter().map(|w| w.values.as_slice()).collect(),
            dim,
        })
    }

    fn len(&self) -> usize {
        self.rows.len()
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid and its squared distance; ties go to the lowest index.
fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centre) in centroids.iter().enumerate() {
        let d = sq_dist(x, centre);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(points: &Points, k: usize, rng: &mut impl Rng, sample_size: usize) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut idx = sample(rng, n, sample_size.min(n)).into_vec();
    idx.sort_unstable();
    let first = idx[rng.random_range(0..idx.len())];
    let mut centroids = vec![points.rows[first].to_vec()];
    let mut d2: Vec<f64> = idx
        .iter()
        .map(|&i| sq_dist(points.rows[i], &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = idx.len() - 1;
            for (j, d) in d2.iter().enumerate() {
                if u < *d {
                    chosen = j;
                    break;
                }
                u -= d;
            }
            chosen
        } else {
            rng.random_range(0..idx.len())
        };
        let centre = points.rows[idx[pick]].to_vec();
        for (j, &i) in idx.iter().enumerate() {
            d2[j] = d2[j].min(sq_dist(points.rows[i], &centre));
        }
        centroids.push(centre);
    }
    centroids
}

pub fn minibatch_kmeans(
    data: &[SeriesWindow],
    k: usize,
    cfg: &KMeansConfig,
    seed: RunSeed,
) -> Result<ClusterModel> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!(
            "k = {k}; at least 2 clusters required"
        )));
    }
    if data.len() < k {
        return Err(Error::TooFewWindows {
            available: data.len(),
            k,
        });
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidConfig("batch_size must be > 0".into()));
    }
    if cfg.n_init == 0 {
        return Err(Error::InvalidConfig("n_init must be > 0".into()));
    }
    let points = Points::from_windows(data)?;
    let mut best: Option<(f64, Vec<Vec<f64>>, Vec<usize>)> = None;
    for run in 0..cfg.n_init {
        let (centroids, assignments) = single_run(&points, k, cfg, seed.child(run as u64));
        let inertia: f64 = points
            .rows
            .iter()
            .zip(&assignments)
            .map(|(x, &c)| sq_dist(x, &centroids[c]))
            .sum();
        if best.as_ref().is_none_or(|b| inertia < b.0) {
            best = Some((inertia, centroids, assignments));
        }
    }
    let (_, centroids, assignments) = best.expect("n_init > 0");
    Ok(finish(&points, centroids, assignments))
}

fn single_run(
    points: &Points,
    k: usize,
    cfg: &KMeansConfig,
    seed: RunSeed,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let n = points.len();
    let mut rng = seed.rng();
    let batch = cfg.batch_size.min(n);
    let mut centroids = kmeans_pp(points, k, &mut rng, (3 * batch).max(10 * k));
    let mut counts = vec![0u64; k];

    for _ in 0..cfg.iters.unwrap_or(100 * k) {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
        let assigned: Vec<(usize, f64)> = idx
            .par_iter()
            .map(|&i| nearest(points.rows[i], &centroids))
            .collect();
        for (&i, &(c, _)) in idx.iter().zip(&assigned) {
            counts[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            for (centre, x) in centroids[c].iter_mut().zip(points.rows[i]) {
                *centre += eta * (x - *centre);
            }
        }
        if counts.contains(&0) {
            let mut far: Vec<usize> = (0..idx.len()).collect();
            far.sort_by(|&a, &b| assigned[b].1.total_cmp(&assigned[a].1).then(a.cmp(&b)));
            let mut far = far.into_iter();
            for c in 0..k {
                if counts[c] == 0 {
                    if let Some(j) = far.next() {
                        centroids[c] = points.rows[idx[j]].to_vec();
                    }
                }
            }
        }
    }

    let assignments = refine(points, &mut centroids, cfg.refine_iters);
    (centroids, assignments)
}

/// Lloyd passes until assignments stop changing. Empty clusters steal the
/// point farthest from its current centroid.
fn refine(points: &Points, centroids: &mut [Vec<f64>], max_iters: usize) -> Vec<usize> {
    let k = centroids.len();
    let mut assignments: Vec<usize> = Vec::new();
    for pass in 0..=max_iters {
        let nearest_all: Vec<(usize, f64)> = points
            .rows
            .par_iter()
            .map(|x| nearest(x, centroids))
            .collect();
        let mut next: Vec<usize> = nearest_all.iter().map(|(c, _)| *c).collect();
        let mut dist: Vec<f64> = nearest_all.iter().map(|(_, d)| *d).collect();
        let mut sizes = vec![0usize; k];
        for &c in &next {
            sizes[c] += 1;
        }
        for c in 0..k {
            if sizes[c] == 0 {
                let donor = (0..next.len())
                    .filter(|&i| sizes[next[i]] > 1)
                    .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
                if let Some(i) = donor {
                    sizes[next[i]] -= 1;
                    next[i] = c;
                    dist[i] = 0.0;
                    sizes[c] = 1;
                }
            }
        }
        let stable = next == assignments;
        assignments = next;
        // Centroids always become exact member means, even on the last pass.
        let mut sums = vec![vec![0.0; points.dim]; k];
        for (x, &c) in points.rows.iter().zip(&assignments) {
            for (s, v) in sums[c].iter_mut().zip(x.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if sizes[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / sizes[c] as f64).collect();
            }
        }
        if stable || pass == max_iters {
            break;
        }
    }
    assignments
}

fn finish(points: &Points, centroids: Vec<Vec<f64>>, assignments: Vec<usize>) -> ClusterModel {
    let k = centroids.len();
    let mut sigma = vec![0.0; k];
    let mut sizes = vec![0usize; k];
    for (x, &c) in points.rows.iter().zip(&assignments) {
        sigma[c] += sq_dist(x, &centroids[c]).sqrt();
        sizes[c] += 1;
    }
    for c in 0..k {
        if sizes[c] > 0 {
            sigma[c] /= sizes[c] as f64;
        }
    }
    let centroid_dists = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| sq_dist(&centroids[i], &centroids[j]).sqrt())
                .collect()
        })
        .collect();
    ClusterModel {
        k,
        centroids,
        assignments,
        sigma,
        centroid_dists,
    }
}

/// Build a model from fixed centroids and assignments (sigma and distances
/// are derived).
pub fn model_from_assignments(
    data: &[SeriesWindow],
    centroids: Vec<Vec<f64>>,
    assignments: Vec<usize>,
) -> Result<ClusterModel> {
    let points = Points::from_windows(data)?;
    if assignments.len() != points.len() {
        return Err(Error::LengthMismatch {
            expected: points.len(),
            actual: assignments.len(),
        });
    }
    Ok(finish(&points, centroids, assignments))
}

/// Mean over clusters of the worst `(sigma_i + sigma_j) / d_ij`.
/// Coincident centroids yield `+inf`.
pub fn davies_bouldin(model: &ClusterModel) -> f64 {
    let k = model.k;
    if k < 2 {
        return f64::INFINITY;
    }
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0f64;
        for j in (0..k).filter(|&j| j != i) {
            let d = model.centroid_dists[i][j];
            if d == 0.0 {
                warn!("clusters {i} and {j} have coincident centroids");
                return f64::INFINITY;
            }
            worst = worst.max((model.sigma[i] + model.sigma[j]) / d);
        }
        total += worst;
    }
    total / k as f64
}

#[derive(Debug, Clone)]
pub struct KSearch {
    pub best_k: usize,
    pub model: ClusterModel,
    pub db: f64,
    /// Every evaluated `(k, DB)` in ascending k.
    pub evaluated: Vec<(usize, f64)>,
}

/// Binary search for K over `[k_min, k_max]`.
///
/// Both endpoints and successive midpoints are clustered; the search keeps
/// the half whose outer endpoint scores lower. The evaluated k with the
/// smallest DB (ties to the smaller k) is returned along with its model.
pub fn find_optimal_k(
    data: &[SeriesWindow],
    k_min: usize,
    k_max: usize,
    cfg: &KMeansConfig,
    seed: RunSeed,
) -> Result<KSearch> {
    if k_min < 2 || k_min >= k_max {
        return Err(Error::InvalidConfig(format!(
            "k range [{k_min}, {k_max}] must satisfy 2 <= k_min < k_max"
        )));
    }
    if k_max > data.len() {
        return Err(Error::TooFewWindows {
            available: data.len(),
            k: k_max,
        });
    }
    let mut memo: BTreeMap<usize, (f64, ClusterModel)> = BTreeMap::new();
    let eval = |k: usize, memo: &mut BTreeMap<usize, (f64, ClusterModel)>| -> Result<f64> {
        if let Some((db, _)) = memo.get(&k) {
            return Ok(*db);
        }
        let model = minibatch_kmeans(data, k, cfg, seed.child(k as u64))?;
        let db = davies_bouldin(&model);
        memo.insert(k, (db, model));
        Ok(db)
    };
    let (mut lo, mut hi) = (k_min, k_max);
    let mut db_lo = eval(lo, &mut memo)?;
    let mut db_hi = eval(hi, &mut memo)?;
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        let db_mid = eval(mid, &mut memo)?;
        if db_lo <= db_hi {
            hi = mid;
            db_hi = db_mid;
        } else {
            lo = mid;
            db_lo = db_mid;
        }
    }
    let evaluated: Vec<(usize, f64)> = memo.iter().map(|(k, (db, _))| (*k, *db)).collect();
    let (best_k, db) = evaluated
        .iter()
        .copied()
        .fold((0, f64::INFINITY), |best, (k, db)| {
            if db < best.1 || best.0 == 0 {
                (k, db)
            } else {
                best
            }
        });
    let model = memo.remove(&best_k).expect("best k was evaluated").1;
    Ok(KSearch {
        best_k,
        model,
        db,
        evaluated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};

    fn cloud(
        centres: &[Vec<f64>],
        per: usize,
        spread: f64,
        seed: u64,
    ) -> (Vec<SeriesWindow>, Vec<usize>) {
        let mut rng = RunSeed(seed).rng();
        let noise = Normal::new(0.0, spread).unwrap();
        let mut out = Vec::new();
        let mut labels = Vec::new();
        for i in 0..per {
            for (c, centre) in centres.iter().enumerate() {
                let v = centre.iter().map(|x| x + noise.sample(&mut rng)).collect();
                out.push(SeriesWindow::complete(format!("p{c}_{i}"), 0, v).unwrap());
                labels.push(c);
            }
        }
        (out, labels)
    }

    fn model(sigma: Vec<f64>, dists: Vec<Vec<f64>>) -> ClusterModel {
        ClusterModel {
            k: sigma.len(),
            centroids: vec![vec![0.0]; sigma.len()],
            assignments: (0..sigma.len()).collect(),
            sigma,
            centroid_dists: dists,
        }
    }

    #[test]
    fn k_below_two_rejected() {
        let (data, _) = cloud(&[vec![0.0, 0.0]], 10, 0.1, 0);
        assert!(matches!(
            minibatch_kmeans(&data, 1, &KMeansConfig::default(), RunSeed(0)),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn too_few_windows() {
        let (data, _) = cloud(&[vec![0.0, 0.0]], 2, 0.1, 0);
        assert!(matches!(
            minibatch_kmeans(&data, 3, &KMeansConfig::default(), RunSeed(0)),
            Err(Error::TooFewWindows { available: 2, k: 3 })
        ));
    }

    #[test]
    fn separated_clouds_are_pure() {
        // Inter-cloud distance 10 vs per-axis spread 0.1 (radius ~ 0.14).
        let (data, labels) = cloud(&[vec![0.0, 0.0], vec![10.0, 0.0]], 200, 0.1, 1);
        let m = minibatch_kmeans(&data, 2, &KMeansConfig::default(), RunSeed(5)).unwrap();
        let map = m.assignments[0];
        for (a, l) in m.assignments.iter().zip(&labels) {
            assert_eq!(*a == map, *l == labels[0]);
        }
        assert!(m.sizes().iter().all(|&s| s == 200));
    }

    #[test]
    fn deterministic_under_seed() {
        let (data, _) = cloud(
            &[vec![0.0, 0.0], vec![3.0, 1.0], vec![0.0, 4.0]],
            100,
            0.8,
            2,
        );
        let cfg = KMeansConfig {
            batch_size: 64,
            ..Default::default()
        };
        let a = minibatch_kmeans(&data, 3, &cfg, RunSeed(9)).unwrap();
        let b = minibatch_kmeans(&data, 3, &cfg, RunSeed(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn restarts_never_raise_inertia() {
        let (data, _) = cloud(
            &[
                vec![0.0, 0.0],
                vec![2.0, 0.5],
                vec![0.0, 2.0],
                vec![2.0, 2.0],
            ],
            60,
            0.9,
            5,
        );
        let inertia = |m: &ClusterModel| -> f64 {
            data.iter()
                .zip(&m.assignments)
                .map(|(w, &c)| sq_dist(&w.values, &m.centroids[c]))
                .sum()
        };
        let one = KMeansConfig {
            n_init: 1,
            batch_size: 32,
            ..Default::default()
        };
        let three = KMeansConfig {
            n_init: 3,
            ..one.clone()
        };
        for s in 0..5 {
            let a = minibatch_kmeans(&data, 4, &one, RunSeed(s)).unwrap();
            let b = minibatch_kmeans(&data, 4, &three, RunSeed(s)).unwrap();
            assert!(inertia(&b) <= inertia(&a));
        }
        let zero = KMeansConfig { n_init: 0, ..one };
        assert!(minibatch_kmeans(&data, 4, &zero, RunSeed(0)).is_err());
    }

    #[test]
    fn no_empty_clusters_and_invariants() {
        // More clusters than natural groups, with duplicate points.
        let data: Vec<_> = (0..30)
            .map(|i| SeriesWindow::complete(format!("d{i}"), 0, vec![(i % 3) as f64, 0.0]).unwrap())
            .collect();
        let m = minibatch_kmeans(
            &data,
            5,
            &KMeansConfig {
                batch_size: 8,
                ..Default::default()
            },
            RunSeed(1),
        )
        .unwrap();
        assert!(m.sizes().iter().all(|&s| s > 0));
        for i in 0..m.k {
            assert!(m.sigma[i] >= 0.0);
            for j in 0..m.k {
                assert_eq!(m.centroid_dists[i][j], m.centroid_dists[j][i]);
            }
        }
    }

    #[test]
    fn db_zero_scatter() {
        assert_eq!(
            davies_bouldin(&model(vec![0.0, 0.0], vec![vec![0.0, 1.0], vec![1.0, 0.0]])),
            0.0
        );
    }

    #[test]
    fn db_two_clusters_hand_value() {
        // (1 + 1) / 2 = 1 for both clusters.
        assert_eq!(
            davies_bouldin(&model(vec![1.0, 1.0], vec![vec![0.0, 2.0], vec![2.0, 0.0]])),
            1.0
        );
    }

    #[test]
    fn db_symmetric_triangle() {
        let (s, d) = (0.7, 3.0);
        let dists = vec![vec![0.0, d, d], vec![d, 0.0, d], vec![d, d, 0.0]];
        let db = davies_bouldin(&model(vec![s; 3], dists));
        assert!((db - 2.0 * s / d).abs() < 1e-15);
    }

    #[test]
    fn db_coincident_is_infinite() {
        assert!(
            davies_bouldin(&model(vec![1.0, 1.0], vec![vec![0.0, 0.0], vec![0.0, 0.0]]))
                .is_infinite()
        );
    }

    #[test]
    fn db_permutation_invariant() {
        let (data, _) = cloud(
            &[vec![0.0, 0.0], vec![4.0, 0.0], vec![0.0, 5.0]],
            50,
            0.7,
            3,
        );
        let m = minibatch_kmeans(&data, 3, &KMeansConfig::default(), RunSeed(4)).unwrap();
        let perm = [2usize, 0, 1];
        let mut centroids = vec![vec![]; 3];
        for (old, &new) in perm.iter().enumerate() {
            centroids[new] = m.centroids[old].clone();
        }
        let assignments = m.assignments.iter().map(|&a| perm[a]).collect();
        let relabeled = model_from_assignments(&data, centroids, assignments).unwrap();
        assert!((davies_bouldin(&m) - davies_bouldin(&relabeled)).abs() < 1e-12);
    }

    #[test]
    fn duplicating_points_keeps_centroids() {
        let (data, _) = cloud(
            &[vec![0.0, 0.0], vec![8.0, 0.0], vec![0.0, 8.0]],
            60,
            0.5,
            6,
        );
        let doubled: Vec<_> = data.iter().chain(&data).cloned().collect();
        let cfg = KMeansConfig::default();
        let a = minibatch_kmeans(&data, 3, &cfg, RunSeed(2)).unwrap();
        let b = minibatch_kmeans(&doubled, 3, &cfg, RunSeed(2)).unwrap();
        let sort = |m: &ClusterModel| {
            let mut c = m.centroids.clone();
            c.sort_by(|x, y| x[0].total_cmp(&y[0]).then(x[1].total_cmp(&y[1])));
            c
        };
        for (x, y) in sort(&a).iter().zip(sort(&b).iter()) {
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() < 1e-9);
            }
        }
        assert!((davies_bouldin(&a) - davies_bouldin(&b)).abs() < 1e-9);
    }

    #[test]
    fn adjacent_range_evaluates_two() {
        let (data, _) = cloud(&[vec![0.0, 0.0], vec![5.0, 5.0]], 30, 0.3, 7);
        let s = find_optimal_k(&data, 2, 3, &KMeansConfig::default(), RunSeed(1)).unwrap();
        assert_eq!(s.evaluated.len(), 2);
        let min = s
            .evaluated
            .iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert_eq!(s.best_k, min.0);
    }

    #[test]
    fn search_stays_logarithmic_and_beats_endpoints() {
        let centres: Vec<Vec<f64>> = (0..4)
            .map(|i| vec![6.0 * i as f64, (i % 2) as f64 * 6.0])
            .collect();
        let (data, _) = cloud(&centres, 40, 0.5, 8);
        let s = find_optimal_k(&data, 2, 16, &KMeansConfig::default(), RunSeed(3)).unwrap();
        assert!(s.evaluated.len() <= (14f64).log2().ceil() as usize + 2);
        let at = |k| s.evaluated.iter().find(|(kk, _)| *kk == k).unwrap().1;
        assert!(s.db <= at(2).max(at(16)));
        assert_eq!(s.best_k, 4);
    }

    #[test]
    fn invalid_k_range() {
        let (data, _) = cloud(&[vec![0.0]], 10, 0.1, 0);
        assert!(find_optimal_k(&data, 3, 3, &KMeansConfig::default(), RunSeed(0)).is_err());
        assert!(find_optimal_k(&data, 1, 3, &KMeansConfig::default(), RunSeed(0)).is_err());
        assert!(matches!(
            find_optimal_k(&data, 2, 11, &KMeansConfig::default(), RunSeed(0)),
            Err(Error::TooFewWindows { .. })
        ));
    }
}

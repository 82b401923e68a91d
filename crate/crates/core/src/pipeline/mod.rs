//! Stage orchestration: every stage reads its predecessors' artifacts from
//! the output directory and writes its own.

pub mod artifacts;
mod config;

pub use config::RunConfig;

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assignment::{assign_incomplete, AssignmentState};
use crate::clustering::find_optimal_k;
use crate::error::{Error, Result};
use crate::imputers::{ImputerFactory, ImputerRegistry, LossAccumulator};
use crate::ingest::{gen_synthetic, load_series};
use crate::masksearch::{
    final_eval_errors, final_eval_windows, min_mask_search, train_final, ClusterData,
};
use crate::pac::{validate_cluster, PacReport, Verdict};
use crate::patterns::{artificial_mask, structure_test, StructureReport};
use crate::seed::RunSeed;
use crate::types::{apply_mask, mask_and, MaskVector, SeriesWindow};
use crate::windowing::{partition, read_windows_jsonl, write_windows_jsonl, WindowedCorpus};

use artifacts as art;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_series: usize,
    pub w: usize,
    pub total: usize,
    pub complete: usize,
    pub incomplete: usize,
    pub missing_rate: f64,
    pub sigma_data: f64,
    pub normalized: bool,
    pub windows_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KScore {
    pub k: usize,
    /// `None` when the index is undefined (coincident centroids).
    pub db: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClustersArtifact {
    pub k: usize,
    pub db: Option<f64>,
    pub evaluated: Vec<KScore>,
    pub sizes: Vec<usize>,
    pub sigma: Vec<f64>,
    pub centroids: Vec<Vec<f64>>,
    /// Cluster of each complete window, in `windows.jsonl` order.
    pub assignments: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternsEntry {
    pub cluster: usize,
    pub n_incomplete: usize,
    pub structure: StructureReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterStatus {
    Trained,
    /// Missingness failed the structure test.
    Rejected,
    /// Not enough data to train.
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTrain {
    pub cluster: usize,
    pub status: ClusterStatus,
    pub reason: Option<String>,
    pub n_complete: usize,
    pub n_incomplete: usize,
    pub n_validation: usize,
    /// Projected samples the final model was trained on.
    pub n_train: usize,
    pub recycled: usize,
    pub max_reuse: usize,
    pub m_star: Option<f64>,
    pub converged: Option<bool>,
    pub sigma_floored: Option<bool>,
    pub val_mse: Option<f64>,
    pub val_positions: usize,
    pub baseline_mse: Option<f64>,
    pub trace_sha256: Option<String>,
    pub model_sha256: Option<String>,
}

impl ClusterTrain {
    fn empty(
        cluster: usize,
        status: ClusterStatus,
        reason: String,
        n_complete: usize,
        n_incomplete: usize,
    ) -> Self {
        ClusterTrain {
            cluster,
            status,
            reason: Some(reason),
            n_complete,
            n_incomplete,
            n_validation: 0,
            n_train: 0,
            recycled: 0,
            max_reuse: 0,
            m_star: None,
            converged: None,
            sigma_floored: None,
            val_mse: None,
            val_positions: 0,
            baseline_mse: None,
            trace_sha256: None,
            model_sha256: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineSummary {
    pub train_windows: usize,
    pub art_rate: f64,
    /// Pooled over the validation windows of every trained cluster.
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub imputer: String,
    pub clusters: Vec<ClusterTrain>,
    pub total_windows: usize,
    pub training_windows: usize,
    pub reduction_factor: Option<f64>,
    /// Per-cluster models pooled over all trained clusters' validation
    /// windows.
    pub dimsum_mse: Option<f64>,
    pub baseline: Option<BaselineSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacEntry {
    pub cluster: usize,
    pub m_star: f64,
    pub report: PacReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacSummary {
    pub n_req: u64,
    pub clusters: Vec<PacEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub cluster: usize,
    pub status: ClusterStatus,
    pub n_complete: usize,
    pub n_assigned: usize,
    pub n_fallback: usize,
    pub structure_ratio: Option<f64>,
    pub n_train: usize,
    pub m_star: Option<f64>,
    pub converged: Option<bool>,
    pub val_mse: Option<f64>,
    pub baseline_mse: Option<f64>,
    pub gamma: Option<f64>,
    pub observables: Option<f64>,
    pub pass_rate: Option<f64>,
    pub verdict: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub imputer: String,
    pub k: usize,
    pub db: Option<f64>,
    pub total_windows: usize,
    pub complete_windows: usize,
    pub incomplete_windows: usize,
    pub missing_rate: f64,
    pub training_windows: usize,
    pub reduction_factor: Option<f64>,
    pub dimsum_mse: Option<f64>,
    pub baseline_mse: Option<f64>,
    pub n_req: u64,
    pub clusters: Vec<ReportRow>,
}

/// The config recorded by the last stage run in `dir`, if any.
pub fn recorded_config(dir: &Path) -> Result<Option<RunConfig>> {
    art::read_unchecked(&dir.join(art::CONFIG))
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

/// A configured run bound to its output directory.
pub struct Pipeline {
    cfg: RunConfig,
    hash: String,
    registry: ImputerRegistry,
}

struct Loaded {
    stats: CorpusStats,
    corpus: WindowedCorpus,
}

/// Outcome of training one cluster, kept in memory for the baseline.
struct Trained {
    data: ClusterData,
    m_star: f64,
    errors: LossAccumulator,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let registry = cfg.registry();
        Self::with_registry(cfg, registry)
    }

    /// Use a custom imputer registry instead of the built-in one.
    pub fn with_registry(cfg: RunConfig, registry: ImputerRegistry) -> Result<Self> {
        cfg.validate()?;
        registry.factory(&cfg.imputer)?;
        let hash = cfg.hash();
        Ok(Pipeline {
            cfg,
            hash,
            registry,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn out_dir(&self) -> &Path {
        &self.cfg.out_dir
    }

    fn path(&self, name: impl AsRef<Path>) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    fn seed(&self) -> RunSeed {
        self.cfg.run_seed()
    }

    fn factory(&self) -> Result<ImputerFactory> {
        self.registry.factory(&self.cfg.imputer)
    }

    fn timed<T>(&self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        art::ensure_dir(&self.cfg.out_dir)?;
        let out = f()?;
        art::write_json(
            &self.path(art::CONFIG),
            stage,
            &self.hash,
            &self.cfg.canonical(),
        )?;
        art::record_timing(&self.cfg.out_dir, stage, start.elapsed().as_secs_f64())?;
        info!("{stage} finished in {:.2}s", start.elapsed().as_secs_f64());
        Ok(out)
    }

    pub fn run_all(&self) -> Result<Report> {
        self.preprocess()?;
        self.cluster()?;
        self.assign()?;
        self.train()?;
        self.validate()?;
        self.report()
    }

    pub fn preprocess(&self) -> Result<CorpusStats> {
        self.timed("preprocess", || {
            let series = match (&self.cfg.input, &self.cfg.synthetic) {
                (Some(spec), _) => load_series(spec)?,
                (None, Some(spec)) => gen_synthetic(spec, self.seed().stream("synthetic"))?.series,
                (None, None) => unreachable!("validated"),
            };
            if series.is_empty() {
                return Err(Error::NoSeries);
            }
            let mut corpus = partition(&series, self.cfg.w)?;
            if corpus.total() == 0 {
                return Err(Error::InvalidConfig(format!(
                    "no series is long enough for one window of length {}",
                    self.cfg.w
                )));
            }
            if self.cfg.normalize {
                corpus = corpus.normalized();
            }
            let wpath = self.path(art::WINDOWS);
            write_windows_jsonl(&wpath, corpus.complete.iter().chain(&corpus.incomplete))?;
            let bytes = std::fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
            let stats = CorpusStats {
                n_series: series.len(),
                w: self.cfg.w,
                total: corpus.total(),
                complete: corpus.complete.len(),
                incomplete: corpus.incomplete.len(),
                missing_rate: corpus.missing_rate(),
                sigma_data: corpus.sigma_data,
                normalized: self.cfg.normalize,
                windows_sha256: art::sha256_hex(&bytes),
            };
            art::write_json(
                &self.path(art::CORPUS_STATS),
                "preprocess",
                &self.hash,
                &stats,
            )?;
            Ok(stats)
        })
    }

    fn load_corpus(&self) -> Result<Loaded> {
        let stats: CorpusStats =
            art::read_json(&self.path(art::CORPUS_STATS), "preprocess", &self.hash)?;
        let wpath = self.path(art::WINDOWS);
        art::verify_digest(&wpath, &stats.windows_sha256, "preprocess")?;
        let corpus = WindowedCorpus::from_windows(stats.w, read_windows_jsonl(&wpath)?);
        Ok(Loaded { stats, corpus })
    }

    fn load_clusters(&self) -> Result<ClustersArtifact> {
        art::read_json(&self.path(art::CLUSTERS), "cluster", &self.hash)
    }

    fn load_assignment(&self) -> Result<AssignmentState> {
        art::read_json(&self.path(art::ASSIGNMENT), "assign", &self.hash)
    }

    fn load_train(&self) -> Result<TrainSummary> {
        art::read_json(&self.path(art::TRAIN), "train", &self.hash)
    }

    pub fn cluster(&self) -> Result<ClustersArtifact> {
        self.timed("cluster", || {
            let Loaded { corpus, .. } = self.load_corpus()?;
            let search = find_optimal_k(
                &corpus.complete,
                self.cfg.k_min,
                self.cfg.k_max,
                &self.cfg.kmeans,
                self.seed().stream("cluster"),
            )?;
            let model = search.model;
            let out = ClustersArtifact {
                k: model.k,
                db: finite(search.db),
                evaluated: search
                    .evaluated
                    .iter()
                    .map(|&(k, db)| KScore { k, db: finite(db) })
                    .collect(),
                sizes: model.sizes(),
                sigma: model.sigma.clone(),
                centroids: model.centroids,
                assignments: model.assignments,
            };
            art::write_json(&self.path(art::CLUSTERS), "cluster", &self.hash, &out)?;
            Ok(out)
        })
    }

    pub fn assign(&self) -> Result<AssignmentState> {
        self.timed("assign", || {
            let Loaded { corpus, .. } = self.load_corpus()?;
            let clusters = self.load_clusters()?;
            let state = assign_incomplete(
                &corpus.incomplete,
                &clusters.centroids,
                &self.cfg.pac,
                &self.cfg.assign,
                self.seed().stream("assign"),
            )?;
            art::write_json(&self.path(art::ASSIGNMENT), "assign", &self.hash, &state)?;
            Ok(state)
        })
    }

    fn members<'a>(
        corpus: &'a WindowedCorpus,
        clusters: &ClustersArtifact,
        assignment: &AssignmentState,
        c: usize,
    ) -> Result<(Vec<&'a SeriesWindow>, Vec<&'a SeriesWindow>)> {
        if clusters.assignments.len() != corpus.complete.len()
            || assignment.clusters.len() != clusters.k
        {
            return Err(Error::InvalidConfig(
                "cluster and assignment artifacts do not match the windows; rerun from `dimsum cluster`".into(),
            ));
        }
        let complete = clusters
            .assignments
            .iter()
            .zip(&corpus.complete)
            .filter(|(&a, _)| a == c)
            .map(|(_, w)| w)
            .collect();
        let incomplete = assignment.clusters[c]
            .members
            .iter()
            .map(|m| {
                corpus.incomplete.get(m.index).ok_or_else(|| {
                    Error::InvalidConfig(format!("assignment refers to unknown window {}", m.id))
                })
            })
            .collect::<Result<_>>()?;
        Ok((complete, incomplete))
    }

    fn cluster_data(
        &self,
        c: usize,
        complete: &[&SeriesWindow],
        incomplete: &[&SeriesWindow],
    ) -> Result<ClusterData> {
        ClusterData::prepare(
            complete,
            incomplete,
            self.cfg.mask_search.val_frac,
            self.seed().stream("split").child(c as u64),
        )
    }

    fn final_seed(&self, c: usize) -> RunSeed {
        self.seed().stream("final").child(c as u64)
    }

    fn train_one(
        &self,
        c: usize,
        complete: &[&SeriesWindow],
        incomplete: &[&SeriesWindow],
        factory: &ImputerFactory,
    ) -> Result<(ClusterTrain, StructureReport, Option<Trained>)> {
        let patterns: Vec<(String, MaskVector)> = incomplete
            .iter()
            .map(|w| (w.id(), w.mask.clone()))
            .collect();
        let structure = structure_test(&patterns, self.seed().stream("structure").child(c as u64))?;
        let (nc, ni) = (complete.len(), incomplete.len());
        if !structure.accepted {
            let reason = structure.reason.clone().unwrap_or_default();
            return Ok((
                ClusterTrain::empty(c, ClusterStatus::Rejected, reason, nc, ni),
                structure,
                None,
            ));
        }
        let data = match self.cluster_data(c, complete, incomplete) {
            Ok(d) => d,
            Err(Error::InvalidConfig(reason)) => {
                return Ok((
                    ClusterTrain::empty(c, ClusterStatus::Skipped, reason, nc, ni),
                    structure,
                    None,
                ))
            }
            Err(e) => return Err(e),
        };
        let trace = min_mask_search(
            &data,
            factory,
            &self.cfg.mask_search,
            self.seed().stream("mask-search").child(c as u64),
        )?;
        let fin = train_final(&data, trace.m_star, factory, self.final_seed(c))?;
        let errors =
            final_eval_errors(&data, fin.model.as_ref(), trace.m_star, self.final_seed(c))?;

        let trace_sha =
            art::write_bytes(&self.path(art::trace_path(c)), trace.to_csv().as_bytes())?;
        let model_json = serde_json::json!({
            "cluster": c,
            "imputer": factory.spec(),
            "m_star": trace.m_star,
            "state": fin.model.state(),
        });
        let mut model_bytes = serde_json::to_vec_pretty(&model_json)?;
        model_bytes.push(b'\n');
        let model_sha = art::write_bytes(&self.path(art::model_path(c)), &model_bytes)?;

        let summary = ClusterTrain {
            cluster: c,
            status: ClusterStatus::Trained,
            reason: None,
            n_complete: nc,
            n_incomplete: ni,
            n_validation: data.validation.len(),
            n_train: fin.train_windows,
            recycled: data.projection.recycled,
            max_reuse: data.projection.max_reuse,
            m_star: Some(trace.m_star),
            converged: Some(trace.converged),
            sigma_floored: Some(trace.sigma_floored),
            val_mse: Some(errors.mse()?),
            val_positions: errors.count,
            baseline_mse: None,
            trace_sha256: Some(trace_sha),
            model_sha256: Some(model_sha),
        };
        Ok((
            summary,
            structure,
            Some(Trained {
                data,
                m_star: trace.m_star,
                errors,
            }),
        ))
    }

    /// One model of the same family trained on every complete window outside
    /// the validation sets, with real patterns drawn from the whole corpus.
    fn baseline(
        &self,
        corpus: &WindowedCorpus,
        trained: &[(usize, &Trained)],
        factory: &ImputerFactory,
    ) -> Result<(BaselineSummary, Vec<LossAccumulator>)> {
        let held_out: HashSet<String> = trained
            .iter()
            .flat_map(|(_, t)| t.data.validation.iter().map(SeriesWindow::id))
            .collect();
        let pool: Vec<&SeriesWindow> = corpus
            .complete
            .iter()
            .filter(|w| !held_out.contains(&w.id()))
            .collect();
        let art_rate = trained.iter().map(|(_, t)| t.m_star).sum::<f64>() / trained.len() as f64;
        let seed = self.seed().stream("baseline");
        let mut perm: Vec<usize> = (0..corpus.incomplete.len()).collect();
        perm.shuffle(&mut seed.stream("patterns").rng());
        let train: Vec<SeriesWindow> = pool
            .par_iter()
            .enumerate()
            .map(|(i, w)| {
                let art = artificial_mask(
                    w.len(),
                    art_rate,
                    &mut seed.stream("art").child(i as u64).rng(),
                );
                let m = match perm.get(i % perm.len().max(1)) {
                    Some(&j) => mask_and(&corpus.incomplete[j].mask, &art)?,
                    None => art,
                };
                apply_mask(w, &m)
            })
            .collect::<Result<_>>()?;
        let model = factory.fit(&train, seed.stream("fit"))?;
        let mut pooled = LossAccumulator::default();
        let per_cluster = trained
            .iter()
            .map(|&(c, t)| {
                let windows = final_eval_windows(&t.data, t.m_star, self.final_seed(c))?;
                let preds = model.impute_batch(&windows)?;
                let mut acc = LossAccumulator::default();
                for ((p, w), v) in preds.iter().zip(&windows).zip(&t.data.validation) {
                    acc.add(p, &v.values, &w.mask)?;
                }
                pooled.merge(&acc);
                Ok(acc)
            })
            .collect::<Result<Vec<_>>>()?;
        let summary = BaselineSummary {
            train_windows: train.len(),
            art_rate,
            mse: pooled.mse()?,
        };
        Ok((summary, per_cluster))
    }

    pub fn train(&self) -> Result<TrainSummary> {
        self.timed("train", || {
            let Loaded { corpus, .. } = self.load_corpus()?;
            let clusters = self.load_clusters()?;
            let assignment = self.load_assignment()?;
            let factory = self.factory()?;
            for dir in [art::TRACES_DIR, art::MODELS_DIR] {
                let p = self.path(dir);
                if p.exists() {
                    std::fs::remove_dir_all(&p).map_err(|e| Error::io(&p, e))?;
                }
                art::ensure_dir(&p)?;
            }
            let results: Vec<(ClusterTrain, StructureReport, Option<Trained>)> = (0..clusters.k)
                .into_par_iter()
                .map(|c| {
                    let (complete, incomplete) = Self::members(&corpus, &clusters, &assignment, c)?;
                    self.train_one(c, &complete, &incomplete, &factory)
                })
                .collect::<Result<_>>()?;

            let patterns: Vec<PatternsEntry> = results
                .iter()
                .map(|(t, s, _)| PatternsEntry {
                    cluster: t.cluster,
                    n_incomplete: t.n_incomplete,
                    structure: s.clone(),
                })
                .collect();
            art::write_json(&self.path(art::PATTERNS), "train", &self.hash, &patterns)?;

            let trained: Vec<(usize, &Trained)> = results
                .iter()
                .filter_map(|(t, _, tr)| tr.as_ref().map(|tr| (t.cluster, tr)))
                .collect();
            let mut rows: Vec<ClusterTrain> = results.iter().map(|(t, _, _)| t.clone()).collect();
            let mut dimsum = LossAccumulator::default();
            for (_, t) in &trained {
                dimsum.merge(&t.errors);
            }
            let baseline = if self.cfg.baseline && !trained.is_empty() {
                let (summary, per_cluster) = self.baseline(&corpus, &trained, &factory)?;
                for ((c, _), acc) in trained.iter().zip(per_cluster) {
                    rows[*c].baseline_mse = Some(acc.mse()?);
                }
                Some(summary)
            } else {
                None
            };
            let training_windows: usize = rows.iter().map(|r| r.n_train).sum();
            let total = corpus.total();
            let summary = TrainSummary {
                imputer: factory.spec().to_string(),
                clusters: rows,
                total_windows: total,
                training_windows,
                reduction_factor: (training_windows > 0)
                    .then(|| total as f64 / training_windows as f64),
                dimsum_mse: dimsum.mse().ok(),
                baseline,
            };
            if trained.is_empty() {
                warn!("no cluster was trained");
            }
            art::write_json(&self.path(art::TRAIN), "train", &self.hash, &summary)?;
            Ok(summary)
        })
    }

    /// Refit each trained cluster's final model and run the PAC check on
    /// its projected samples.
    pub fn validate(&self) -> Result<PacSummary> {
        self.timed("validate", || {
            let Loaded { stats, corpus } = self.load_corpus()?;
            let clusters = self.load_clusters()?;
            let assignment = self.load_assignment()?;
            let train = self.load_train()?;
            let factory = self.factory()?;
            let entries: Vec<PacEntry> = train
                .clusters
                .par_iter()
                .filter(|t| t.status == ClusterStatus::Trained)
                .map(|t| {
                    let c = t.cluster;
                    let m_star = t.m_star.expect("trained clusters record m*");
                    let (complete, incomplete) = Self::members(&corpus, &clusters, &assignment, c)?;
                    let data = self.cluster_data(c, &complete, &incomplete)?;
                    let fin = train_final(&data, m_star, &factory, self.final_seed(c))?;
                    if Some(fin.val_loss) != t.val_mse {
                        warn!(
                            "cluster {c}: refit validation loss {} differs from training run {:?}",
                            fin.val_loss, t.val_mse
                        );
                    }
                    let report = validate_cluster(
                        fin.model.as_ref(),
                        data.samples(),
                        &self.cfg.pac,
                        m_star,
                        stats.sigma_data,
                    )?;
                    Ok(PacEntry {
                        cluster: c,
                        m_star,
                        report,
                    })
                })
                .collect::<Result<_>>()?;
            let out = PacSummary {
                n_req: crate::pac::pac_sample_bound(&self.cfg.pac),
                clusters: entries,
            };
            art::write_json(&self.path(art::PAC), "validate", &self.hash, &out)?;
            Ok(out)
        })
    }

    pub fn report(&self) -> Result<Report> {
        self.timed("report", || {
            let stats: CorpusStats =
                art::read_json(&self.path(art::CORPUS_STATS), "preprocess", &self.hash)?;
            let clusters = self.load_clusters()?;
            let assignment = self.load_assignment()?;
            let patterns: Vec<PatternsEntry> =
                art::read_json(&self.path(art::PATTERNS), "train", &self.hash)?;
            let train = self.load_train()?;
            let pac: PacSummary = art::read_json(&self.path(art::PAC), "validate", &self.hash)?;
            for t in &train.clusters {
                if let Some(d) = &t.trace_sha256 {
                    art::verify_digest(&self.path(art::trace_path(t.cluster)), d, "train")?;
                }
                if let Some(d) = &t.model_sha256 {
                    art::verify_digest(&self.path(art::model_path(t.cluster)), d, "train")?;
                }
            }
            let rows: Vec<ReportRow> = train
                .clusters
                .iter()
                .map(|t| {
                    let c = t.cluster;
                    let p = pac
                        .clusters
                        .iter()
                        .find(|e| e.cluster == c)
                        .map(|e| &e.report);
                    let a = assignment.clusters.get(c);
                    ReportRow {
                        cluster: c,
                        status: t.status,
                        n_complete: t.n_complete,
                        n_assigned: a.map_or(0, |a| a.members.len()),
                        n_fallback: a.map_or(0, |a| a.fallback_count()),
                        structure_ratio: patterns
                            .iter()
                            .find(|e| e.cluster == c)
                            .map(|e| e.structure.ratio),
                        n_train: t.n_train,
                        m_star: t.m_star,
                        converged: t.converged,
                        val_mse: t.val_mse,
                        baseline_mse: t.baseline_mse,
                        gamma: p.map(|r| r.gamma),
                        observables: p.map(|r| r.observables),
                        pass_rate: p.map(|r| r.pass_rate),
                        verdict: p.map(|r| r.verdict),
                    }
                })
                .collect();
            let report = Report {
                imputer: train.imputer.clone(),
                k: clusters.k,
                db: clusters.db,
                total_windows: stats.total,
                complete_windows: stats.complete,
                incomplete_windows: stats.incomplete,
                missing_rate: stats.missing_rate,
                training_windows: train.training_windows,
                reduction_factor: train.reduction_factor,
                dimsum_mse: train.dimsum_mse,
                baseline_mse: train.baseline.as_ref().map(|b| b.mse),
                n_req: pac.n_req,
                clusters: rows,
            };
            art::write_json(&self.path(art::REPORT_JSON), "report", &self.hash, &report)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in &report.clusters {
                w.serialize(r)?;
            }
            let bytes = w
                .into_inner()
                .map_err(|e| Error::io(self.path(art::REPORT_CSV), e.into_error()))?;
            art::write_bytes(&self.path(art::REPORT_CSV), &bytes)?;
            Ok(report)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{MissingKind, MissingSpec, SyntheticSpec};

    fn small_config(dir: &Path) -> RunConfig {
        let mut spec = SyntheticSpec::three_patterns(600, 32);
        spec.missing = MissingSpec {
            affected: 0.4,
            kind: MissingKind::Blocky {
                blocks: 1,
                run_p: 0.15,
                anchor_jitter: Some(2),
            },
        };
        RunConfig {
            seed: 5,
            w: 32,
            synthetic: Some(spec),
            k_min: 2,
            k_max: 5,
            imputer: "mean".into(),
            out_dir: dir.to_path_buf(),
            ..Default::default()
        }
    }

    #[test]
    fn full_chain_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(small_config(dir.path())).unwrap();
        let report = p.run_all().unwrap();
        assert_eq!(report.total_windows, 600);
        assert_eq!(report.clusters.len(), report.k);
        for name in [
            art::CONFIG,
            art::WINDOWS,
            art::CORPUS_STATS,
            art::CLUSTERS,
            art::ASSIGNMENT,
            art::PATTERNS,
            art::TRAIN,
            art::PAC,
            art::REPORT_JSON,
            art::REPORT_CSV,
            art::TIMINGS,
        ] {
            assert!(dir.path().join(name).exists(), "{name} missing");
        }
        let trained: Vec<_> = report
            .clusters
            .iter()
            .filter(|r| r.status == ClusterStatus::Trained)
            .collect();
        assert!(!trained.is_empty());
        for r in trained {
            assert!(dir.path().join(art::trace_path(r.cluster)).exists());
            assert!(r.verdict.is_some());
        }
    }

    #[test]
    fn stage_without_upstream_names_command() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(small_config(dir.path())).unwrap();
        let err = p.cluster().unwrap_err();
        assert!(err.to_string().contains("dimsum preprocess"), "{err}");
        assert!(err.is_user_error());
    }

    #[test]
    fn changed_config_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        Pipeline::new(small_config(dir.path()))
            .unwrap()
            .preprocess()
            .unwrap();
        let other = Pipeline::new(RunConfig {
            seed: 6,
            ..small_config(dir.path())
        })
        .unwrap();
        assert!(matches!(other.cluster(), Err(Error::ConfigMismatch { .. })));
    }

    #[test]
    fn stage_rerun_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(small_config(dir.path())).unwrap();
        p.preprocess().unwrap();
        p.cluster().unwrap();
        let first = std::fs::read(dir.path().join(art::CLUSTERS)).unwrap();
        p.cluster().unwrap();
        assert_eq!(
            first,
            std::fs::read(dir.path().join(art::CLUSTERS)).unwrap()
        );
    }

    #[test]
    fn stats_match_synthetic_counts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path());
        let stats = Pipeline::new(cfg.clone()).unwrap().preprocess().unwrap();
        let corpus = gen_synthetic(
            cfg.synthetic.as_ref().unwrap(),
            cfg.run_seed().stream("synthetic"),
        )
        .unwrap();
        let complete = corpus.windows.iter().filter(|w| w.is_complete()).count();
        assert_eq!(stats.complete, complete);
        assert_eq!(stats.incomplete, 600 - complete);
        assert_eq!(stats.n_series, 600);
    }

    #[test]
    fn edited_windows_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let p = Pipeline::new(small_config(dir.path())).unwrap();
        p.preprocess().unwrap();
        let wp = dir.path().join(art::WINDOWS);
        let mut text = std::fs::read_to_string(&wp).unwrap();
        text.push('\n');
        std::fs::write(&wp, text).unwrap();
        assert!(matches!(p.cluster(), Err(Error::Tampered { .. })));
    }
}

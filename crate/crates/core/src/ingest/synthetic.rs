//! Seeded synthetic corpora with known pattern labels, used as test oracles
//! and for desk-scale runs of the whole pipeline.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Geometric, Normal};
use serde::{Deserialize, Serialize};

use super::missing::{gen_mcar, gen_mnar, MnarRule};
use crate::error::{Error, Result};
use crate::seed::RunSeed;
use crate::types::{apply_mask, MaskVector, RawSeries, SeriesWindow};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum PatternShape {
    Sine {
        cycles: f64,
    },
    Square {
        cycles: f64,
    },
    /// Sawtooth rising from -1 to 1 each cycle.
    Ramp {
        cycles: f64,
    },
    /// Sine plus a linear trend across the window.
    Composite {
        cycles: f64,
        trend: f64,
    },
}

impl PatternShape {
    /// Shape value at window fraction `x` in [0,1) with phase offset.
    fn eval(&self, x: f64, phase: f64) -> f64 {
        match *self {
            PatternShape::Sine { cycles } => (TAU * cycles * x + phase).sin(),
            PatternShape::Square { cycles } => {
                if (TAU * cycles * x + phase).sin() >= 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            PatternShape::Ramp { cycles } => {
                let u = (cycles * x + phase / TAU).rem_euclid(1.0);
                2.0 * u - 1.0
            }
            PatternShape::Composite { cycles, trend } => {
                (TAU * cycles * x + phase).sin() + trend * (2.0 * x - 1.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatternSpec {
    #[serde(flatten)]
    pub shape: PatternShape,
    pub weight: f64,
    /// Relative amplitude jitter: amplitude drawn from `1 ± amplitude_jitter`.
    pub amplitude_jitter: f64,
    /// Phase jitter in radians: phase drawn from `± phase_jitter`.
    pub phase_jitter: f64,
}

impl PatternSpec {
    pub fn new(shape: PatternShape, weight: f64) -> Self {
        PatternSpec {
            shape,
            weight,
            amplitude_jitter: 0.0,
            phase_jitter: 0.0,
        }
    }

    pub fn with_jitter(mut self, amplitude: f64, phase: f64) -> Self {
        self.amplitude_jitter = amplitude;
        self.phase_jitter = phase;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MissingKind {
    None,
    Mcar {
        rate: f64,
    },
    Mnar {
        rate: f64,
        rule: MnarRule,
    },
    /// Contiguous blocks with lengths `1 + Geometric(run_p)` (mean `1/run_p`).
    /// With `anchor_jitter` set, each pattern class has its own block
    /// location and blocks start within `± anchor_jitter` of it.
    Blocky {
        blocks: usize,
        run_p: f64,
        anchor_jitter: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingSpec {
    /// Fraction of windows that receive missingness; the rest stay complete.
    pub affected: f64,
    #[serde(flatten)]
    pub kind: MissingKind,
}

impl MissingSpec {
    pub fn none() -> Self {
        MissingSpec {
            affected: 0.0,
            kind: MissingKind::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_series: usize,
    pub windows_per_series: usize,
    pub w: usize,
    /// Grid spacing written to the emitted series.
    pub interval: u64,
    pub patterns: Vec<PatternSpec>,
    /// Gaussian noise standard deviation relative to unit amplitude.
    pub noise_std: f64,
    /// Per-window level drawn uniformly from this range.
    pub level: (f64, f64),
    /// Per-window scale drawn uniformly from this range.
    pub scale: (f64, f64),
    pub missing: MissingSpec,
}

impl SyntheticSpec {
    /// Three well-separated shapes with mild jitter, one window per series.
    pub fn three_patterns(n: usize, w: usize) -> Self {
        SyntheticSpec {
            n_series: n,
            windows_per_series: 1,
            w,
            interval: 900,
            patterns: vec![
                PatternSpec::new(PatternShape::Sine { cycles: 2.0 }, 1.0 / 3.0)
                    .with_jitter(0.1, 0.2),
                PatternSpec::new(PatternShape::Square { cycles: 1.0 }, 1.0 / 3.0)
                    .with_jitter(0.1, 0.2),
                PatternSpec::new(PatternShape::Ramp { cycles: 1.0 }, 1.0 / 3.0)
                    .with_jitter(0.1, 0.2),
            ],
            noise_std: 0.1,
            level: (0.0, 10.0),
            scale: (0.5, 3.0),
            missing: MissingSpec::none(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.w < 2 {
            return Err(Error::InvalidConfig("window length must be >= 2".into()));
        }
        if self.patterns.is_empty() {
            return Err(Error::InvalidConfig("at least one pattern required".into()));
        }
        let total: f64 = self.patterns.iter().map(|p| p.weight).sum();
        if (total - 1.0).abs() > 1e-9 || self.patterns.iter().any(|p| p.weight < 0.0) {
            return Err(Error::InvalidConfig(format!(
                "pattern weights sum to {total}, expected 1"
            )));
        }
        if !(0.0..=1.0).contains(&self.missing.affected) {
            return Err(Error::InvalidConfig(
                "missing.affected must be in [0,1]".into(),
            ));
        }
        if let MissingKind::Blocky { run_p, .. } = self.missing.kind {
            if !(run_p > 0.0 && run_p <= 1.0) {
                return Err(Error::InvalidConfig(format!("run_p {run_p} not in (0,1]")));
            }
        }
        if !(self.level.0 <= self.level.1 && self.scale.0 <= self.scale.1 && self.scale.0 > 0.0) {
            return Err(Error::InvalidConfig(
                "level/scale ranges must be ordered, scale > 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub series: Vec<RawSeries>,
    /// Windows in series order; `labels[i]` is the pattern of `windows[i]`.
    pub windows: Vec<SeriesWindow>,
    pub labels: Vec<usize>,
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn pick_pattern(rng: &mut impl Rng, patterns: &[PatternSpec]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in patterns.iter().enumerate() {
        acc += p.weight;
        if u < acc {
            return i;
        }
    }
    patterns.len() - 1
}

fn blocky_mask(
    w: usize,
    blocks: usize,
    run_p: f64,
    anchor: Option<(usize, usize)>,
    rng: &mut impl Rng,
) -> MaskVector {
    let geo = Geometric::new(run_p).expect("validated run_p");
    let mut mask = MaskVector::all_observed(w);
    for _ in 0..blocks {
        for _attempt in 0..32 {
            let len = (1 + geo.sample(rng) as usize).min(w);
            let max_start = w - len;
            let start = match anchor {
                Some((centre, jitter)) => {
                    let lo = centre.saturating_sub(jitter);
                    let hi = (centre + jitter).min(max_start).max(lo.min(max_start));
                    rng.random_range(lo.min(max_start)..=hi)
                }
                None => rng.random_range(0..=max_start),
            };
            // Blocks never touch, so each one stays a separate run.
            let lo = start.saturating_sub(1);
            let hi = (start + len + 1).min(w);
            if (lo..hi).all(|i| mask.get(i)) {
                for i in start..start + len {
                    mask.set(i, false);
                }
                break;
            }
        }
    }
    mask
}

pub fn gen_synthetic(spec: &SyntheticSpec, seed: RunSeed) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let w = spec.w;
    let anchors: Vec<usize> = {
        let mut rng = seed.stream("anchors").rng();
        spec.patterns
            .iter()
            .map(|_| rng.random_range(0..w))
            .collect()
    };
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("finite noise");
    let mut windows = Vec::with_capacity(spec.n_series * spec.windows_per_series);
    let mut labels = Vec::with_capacity(windows.capacity());
    for s in 0..spec.n_series {
        let series_id = format!("syn{s:06}");
        for j in 0..spec.windows_per_series {
            let mut rng = seed
                .stream("window")
                .child((s * spec.windows_per_series + j) as u64)
                .rng();
            let label = pick_pattern(&mut rng, &spec.patterns);
            let p = &spec.patterns[label];
            let amp = 1.0 + p.amplitude_jitter * rng.random_range(-1.0..=1.0);
            let phase = p.phase_jitter * rng.random_range(-1.0..=1.0);
            let level = uniform(&mut rng, spec.level);
            let scale = uniform(&mut rng, spec.scale);
            let values: Vec<f64> = (0..w)
                .map(|t| {
                    let x = t as f64 / w as f64;
                    level + scale * (amp * p.shape.eval(x, phase) + noise.sample(&mut rng))
                })
                .collect();
            let mut window = SeriesWindow::complete(series_id.clone(), j, values)?;
            let affected = spec.missing.affected > 0.0 && rng.random_bool(spec.missing.affected);
            if affected {
                let mseed = RunSeed(rng.random());
                window = match &spec.missing.kind {
                    MissingKind::None => window,
                    MissingKind::Mcar { rate } => gen_mcar(&[window], *rate, mseed)?.remove(0),
                    MissingKind::Mnar { rate, rule } => {
                        gen_mnar(&[window], *rate, *rule, mseed)?.remove(0)
                    }
                    MissingKind::Blocky {
                        blocks,
                        run_p,
                        anchor_jitter,
                    } => {
                        let anchor = anchor_jitter.map(|j| (anchors[label], j));
                        let m = blocky_mask(w, *blocks, *run_p, anchor, &mut rng);
                        apply_mask(&window, &m)?
                    }
                };
            }
            windows.push(window);
            labels.push(label);
        }
    }
    let series = windows
        .chunks(spec.windows_per_series.max(1))
        .map(|chunk| RawSeries {
            series_id: chunk[0].series_id.clone(),
            interval: spec.interval,
            start: 0,
            values: chunk
                .iter()
                .flat_map(|w| {
                    w.values
                        .iter()
                        .zip(w.mask.bits())
                        .map(|(v, m)| m.then_some(*v))
                })
                .collect(),
        })
        .collect();
    Ok(SyntheticCorpus {
        series,
        windows,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::run_lengths;

    #[test]
    fn three_patterns_are_balanced() {
        let c = gen_synthetic(&SyntheticSpec::three_patterns(3000, 96), RunSeed(1)).unwrap();
        let mut counts = [0usize; 3];
        for &l in &c.labels {
            counts[l] += 1;
        }
        for n in counts {
            // Binomial(3000, 1/3): sd ~ 25.8, allow 4 sd.
            assert!((897..=1103).contains(&n), "{counts:?}");
        }
    }

    #[test]
    fn zero_jitter_sine_is_identical_pre_noise() {
        let spec = SyntheticSpec {
            patterns: vec![PatternSpec::new(PatternShape::Sine { cycles: 1.0 }, 1.0)],
            noise_std: 0.0,
            level: (0.0, 0.0),
            scale: (1.0, 1.0),
            ..SyntheticSpec::three_patterns(20, 32)
        };
        let c = gen_synthetic(&spec, RunSeed(2)).unwrap();
        for w in &c.windows[1..] {
            assert_eq!(w.values, c.windows[0].values);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = SyntheticSpec::three_patterns(50, 24);
        let a = gen_synthetic(&spec, RunSeed(3)).unwrap();
        let b = gen_synthetic(&spec, RunSeed(3)).unwrap();
        assert_eq!(a.windows, b.windows);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn geometric_blocks_have_mean_run_five() {
        // One block per window so every empirical run is one draw of
        // 1 + Geometric(0.2), whose mean is 1/0.2 = 5.
        let spec = SyntheticSpec {
            missing: MissingSpec {
                affected: 1.0,
                kind: MissingKind::Blocky {
                    blocks: 1,
                    run_p: 0.2,
                    anchor_jitter: None,
                },
            },
            ..SyntheticSpec::three_patterns(4000, 96)
        };
        let c = gen_synthetic(&spec, RunSeed(4)).unwrap();
        let runs: Vec<usize> = c
            .windows
            .iter()
            .flat_map(|w| run_lengths(&w.mask))
            .collect();
        assert_eq!(runs.len(), 4000);
        let mean = runs.iter().sum::<usize>() as f64 / runs.len() as f64;
        assert!((mean - 5.0).abs() <= 0.5, "mean run {mean}");
    }

    #[test]
    fn weights_must_sum_to_one() {
        let mut spec = SyntheticSpec::three_patterns(10, 16);
        spec.patterns[0].weight = 0.5;
        assert!(gen_synthetic(&spec, RunSeed(0)).is_err());
    }

    #[test]
    fn series_concatenate_windows() {
        let spec = SyntheticSpec {
            windows_per_series: 4,
            ..SyntheticSpec::three_patterns(3, 8)
        };
        let c = gen_synthetic(&spec, RunSeed(5)).unwrap();
        assert_eq!(c.series.len(), 3);
        assert_eq!(c.series[1].values.len(), 32);
        assert_eq!(c.series[1].values[8], Some(c.windows[5].values[0]));
    }
}

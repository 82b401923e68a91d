//! PAC sample bound and the per-cluster reconstruction check.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imputers::Imputer;
use crate::patterns::ProjectedSample;
use crate::types::PacConfig;

/// Minimum observable mass `ceil((1/eps) (3 ln(1/eps) + ln(1/delta)))`.
/// The 3 is the VC dimension of the linear decision boundary in
/// (alpha, beta) space.
pub fn pac_sample_bound(cfg: &PacConfig) -> u64 {
    let inv_e = 1.0 / cfg.epsilon;
    (inv_e * (3.0 * inv_e.ln() + (1.0 / cfg.delta).ln())).ceil() as u64
}

/// 1 when every projected (really missing) position is reconstructed
/// within `tau`; `None` when the sample hides nothing.
pub fn test_statistic(pred: &[f64], sample: &ProjectedSample, tau: f64) -> Option<bool> {
    let mut any = false;
    for i in sample.proj_mask.hidden() {
        any = true;
        if (pred[i] - sample.ground_truth[i]).abs() > tau {
            return Some(false);
        }
    }
    any.then_some(true)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportions {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub infeasible: bool,
}

/// Real-missing share `alpha`, artificial share `beta = m*`, and what is
/// left to learn from, `gamma`, clamped at 0.
pub fn compute_proportions(samples: &[ProjectedSample], m_star: f64) -> Proportions {
    let alpha = if samples.is_empty() {
        0.0
    } else {
        samples
            .iter()
            .map(|s| s.proj_mask.missing_rate())
            .sum::<f64>()
            / samples.len() as f64
    };
    proportions(alpha, m_star)
}

pub fn proportions(alpha: f64, beta: f64) -> Proportions {
    let gamma = 1.0 - alpha - beta;
    Proportions {
        alpha,
        beta,
        gamma: gamma.max(0.0),
        infeasible: gamma < 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    BoundUnmet,
    Infeasible,
    InsufficientData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacReport {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub n_samples: usize,
    pub n_req: u64,
    pub observables: f64,
    pub satisfied: bool,
    pub tau: f64,
    /// Samples with at least one projected position.
    pub tested: usize,
    pub passed: usize,
    pub pass_rate: f64,
    pub verdict: Verdict,
}

/// Decide a verdict from counts. Checks run in order: data present,
/// gamma feasible, bound met, pass rate.
pub fn verdict(
    props: &Proportions,
    n_samples: usize,
    tested: usize,
    passed: usize,
    cfg: &PacConfig,
) -> (Verdict, f64, bool) {
    let n_req = pac_sample_bound(cfg);
    let observables = n_samples as f64 * props.gamma;
    let satisfied = observables >= n_req as f64;
    let pass_rate = if tested == 0 {
        0.0
    } else {
        passed as f64 / tested as f64
    };
    let v = if n_samples == 0 || tested == 0 {
        Verdict::InsufficientData
    } else if props.infeasible || props.gamma < cfg.gamma_min {
        Verdict::Infeasible
    } else if !satisfied {
        Verdict::BoundUnmet
    } else if pass_rate < 1.0 - cfg.delta {
        Verdict::Fail
    } else {
        Verdict::Pass
    };
    (v, pass_rate, satisfied)
}

/// Run the reconstruction test on every projected sample and combine it
/// with the sample bound. `tau = tau_frac * sigma_data`.
pub fn validate_cluster(
    model: &dyn Imputer,
    samples: &[ProjectedSample],
    cfg: &PacConfig,
    m_star: f64,
    sigma_data: f64,
) -> Result<PacReport> {
    cfg.validate()?;
    let tau = cfg.tau_frac * sigma_data;
    let props = compute_proportions(samples, m_star);
    let views: Vec<_> = samples.iter().map(ProjectedSample::proj_view).collect();
    let preds = model.impute_batch(&views)?;
    let outcomes: Vec<bool> = preds
        .iter()
        .zip(samples)
        .filter_map(|(p, s)| test_statistic(p, s, tau))
        .collect();
    let tested = outcomes.len();
    let passed = outcomes.iter().filter(|b| **b).count();
    let (verdict, pass_rate, satisfied) = verdict(&props, samples.len(), tested, passed, cfg);
    Ok(PacReport {
        alpha: props.alpha,
        beta: props.beta,
        gamma: props.gamma,
        n_samples: samples.len(),
        n_req: pac_sample_bound(cfg),
        observables: samples.len() as f64 * props.gamma,
        satisfied,
        tau,
        tested,
        passed,
        pass_rate,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imputers::LinearImputer;
    use crate::patterns::project;
    use crate::seed::RunSeed;
    use crate::types::{MaskVector, SeriesWindow};
    use num_bigint::BigInt;
    use num_traits::{Signed, ToPrimitive, Zero};
    use proptest::prelude::*;
    use rand::Rng;

    /// Fixed-point decimal arithmetic with `DIGITS` fractional digits.
    const DIGITS: u32 = 60;

    fn scale() -> BigInt {
        BigInt::from(10).pow(DIGITS)
    }

    fn mul(a: &BigInt, b: &BigInt) -> BigInt {
        a * b / scale()
    }

    fn div(a: &BigInt, b: &BigInt) -> BigInt {
        a * scale() / b
    }

    /// ln(x) for x > 0 via ln(x) = 2 atanh((x-1)/(x+1)) after halving into
    /// [1, 2) and adding k ln 2.
    fn ln_fixed(x: &BigInt) -> BigInt {
        let one = scale();
        let two = &one * 2;
        let mut x = x.clone();
        let mut k: i64 = 0;
        while x >= two {
            x = &x / 2;
            k += 1;
        }
        while x < one {
            x = &x * 2;
            k -= 1;
        }
        let atanh2 = |y: &BigInt| {
            let y2 = mul(y, y);
            let mut term = y.clone();
            let mut sum = BigInt::zero();
            let mut n = 1i64;
            while !term.is_zero() {
                sum += &term / n;
                term = mul(&term, &y2);
                n += 2;
            }
            sum * 2
        };
        let ln2 = atanh2(&div(&one, &(&one * 3)));
        atanh2(&div(&(&x - &one), &(&x + &one))) + ln2 * k
    }

    /// Exact rational input p/q as fixed point.
    fn frac(p: u64, q: u64) -> BigInt {
        BigInt::from(p) * scale() / BigInt::from(q)
    }

    fn oracle_bound(e_num: u64, e_den: u64, d_num: u64, d_den: u64) -> u64 {
        let inv_e = frac(e_den, e_num);
        let inv_d = frac(d_den, d_num);
        let inner = ln_fixed(&inv_e) * 3 + ln_fixed(&inv_d);
        let v = mul(&inv_e, &inner);
        let (q, r) = (&v / scale(), &v % scale());
        let q = q.to_u64().unwrap();
        if r.is_positive() {
            q + 1
        } else {
            q
        }
    }

    #[test]
    fn ln_oracle_sanity() {
        for (p, q) in [(10u64, 1u64), (1, 1), (1, 3), (333, 10), (7, 1000)] {
            let got = (ln_fixed(&frac(p, q)) / BigInt::from(10).pow(DIGITS - 17))
                .to_f64()
                .unwrap()
                / 1e17;
            assert!((got - (p as f64 / q as f64).ln()).abs() < 1e-14, "{p}/{q}");
        }
    }

    #[test]
    fn experimental_setting_is_428() {
        let cfg = PacConfig::new(0.03, 0.1, 0.1, 0.2).unwrap();
        assert_eq!(pac_sample_bound(&cfg), 428);
        assert_eq!(oracle_bound(3, 100, 1, 10), 428);
    }

    #[test]
    fn half_half_is_6() {
        assert_eq!(
            pac_sample_bound(&PacConfig::new(0.5, 0.5, 0.1, 0.2).unwrap()),
            6
        );
        assert_eq!(oracle_bound(1, 2, 1, 2), 6);
    }

    #[test]
    fn matches_oracle_on_random_pairs() {
        let mut rng = RunSeed(2024).rng();
        for _ in 0..100 {
            let (e, d) = (rng.random_range(1..1000u64), rng.random_range(1..1000u64));
            let cfg = PacConfig::new(e as f64 / 1000.0, d as f64 / 1000.0, 0.1, 0.2).unwrap();
            assert_eq!(
                pac_sample_bound(&cfg),
                oracle_bound(e, 1000, d, 1000),
                "eps={e}/1000 delta={d}/1000"
            );
        }
    }

    #[test]
    fn smaller_epsilon_needs_more() {
        let mut last = 0;
        for e in [0.5, 0.2, 0.1, 0.05, 0.03, 0.01] {
            let n = pac_sample_bound(&PacConfig::new(e, 0.1, 0.1, 0.2).unwrap());
            assert!(n > last);
            last = n;
        }
    }

    fn sample(truth: Vec<f64>, bits: &[u8]) -> ProjectedSample {
        let src =
            SeriesWindow::new("s", 0, vec![0.0; bits.len()], MaskVector::from_u8(bits)).unwrap();
        project(&src, &SeriesWindow::complete("c", 0, truth).unwrap()).unwrap()
    }

    #[test]
    fn statistic_examples() {
        let s = sample(vec![1.0, 2.0, 3.0], &[1, 0, 0]);
        assert_eq!(test_statistic(&[1.0, 2.0, 3.0], &s, 0.1), Some(true));
        assert_eq!(test_statistic(&[1.0, 2.2, 3.0], &s, 0.1), Some(false));
        assert_eq!(test_statistic(&[1.0, 2.5, 2.5], &s, 0.5), Some(true));
        let none = sample(vec![1.0, 2.0], &[1, 1]);
        assert_eq!(test_statistic(&[0.0, 0.0], &none, 0.1), None);
    }

    #[test]
    fn proportion_examples() {
        assert_eq!(
            compute_proportions(&[sample(vec![1.0; 4], &[1, 1, 1, 1])], 0.0),
            proportions(0.0, 0.0)
        );
        assert_eq!(proportions(0.0, 0.0).gamma, 1.0);
        assert!((proportions(0.4, 0.1).gamma - 0.5).abs() < 1e-15);
        let p = proportions(0.7, 0.4);
        assert_eq!(p.gamma, 0.0);
        assert!(p.infeasible);
    }

    #[test]
    fn verdict_examples() {
        let cfg = PacConfig::new(0.5, 0.1, 0.1, 0.2).unwrap();
        let n_req = pac_sample_bound(&cfg) as usize;
        let props = proportions(0.0, 0.0);
        assert_eq!(verdict(&props, n_req, n_req, n_req, &cfg).0, Verdict::Pass);
        assert_eq!(
            verdict(&props, n_req - 1, n_req - 1, n_req - 1, &cfg).0,
            Verdict::BoundUnmet
        );
        assert_eq!(verdict(&props, 100, 100, 85, &cfg).0, Verdict::Fail);
        assert_eq!(verdict(&props, 0, 0, 0, &cfg).0, Verdict::InsufficientData);
        assert_eq!(
            verdict(&proportions(0.7, 0.2), 1000, 1000, 1000, &cfg).0,
            Verdict::Infeasible
        );
    }

    #[test]
    fn perfect_model_passes() {
        // Affine windows with interior holes: linear interpolation is exact.
        let cfg = PacConfig::new(0.5, 0.1, 0.1, 0.2).unwrap();
        let samples: Vec<_> = (0..20)
            .map(|i| {
                sample(
                    (0..8).map(|t| i as f64 + t as f64).collect(),
                    &[1, 0, 1, 1, 0, 0, 1, 1],
                )
            })
            .collect();
        let mut lin = LinearImputer::new();
        lin.fit(&[], RunSeed(0)).unwrap();
        let r = validate_cluster(&lin, &samples, &cfg, 0.0, 1.0).unwrap();
        assert_eq!((r.verdict, r.passed, r.tested), (Verdict::Pass, 20, 20));
        assert!((r.alpha + r.beta + r.gamma - 1.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn statistic_monotone(errs in prop::collection::vec(-1.0f64..1.0, 6), shrink in 0.0f64..1.0) {
            let s = sample(vec![0.0; 6], &[0, 1, 0, 0, 1, 0]);
            let tau = 0.5;
            let pred: Vec<f64> = errs.clone();
            let better: Vec<f64> = errs.iter().map(|e| e * shrink).collect();
            if test_statistic(&pred, &s, tau) == Some(true) {
                prop_assert_eq!(test_statistic(&better, &s, tau), Some(true));
            }
        }

        #[test]
        fn proportions_sum_to_one(a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let p = proportions(a, b);
            if !p.infeasible {
                prop_assert!((p.alpha + p.beta + p.gamma - 1.0).abs() < 1e-9);
            }
        }
    }
}

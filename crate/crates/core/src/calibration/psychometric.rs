//! Detection-probability records, cubic fits, threshold inversion and
//! bootstrap intervals.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Aggregated 2AFC outcomes at one stimulus level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsychometricRecord {
    pub eccentricity_deg: f64,
    /// Guiding percentage or blur sigma.
    pub stimulus_level: f64,
    pub detections: u32,
    pub trials: u32,
}

impl PsychometricRecord {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 || self.detections > self.trials || !self.stimulus_level.is_finite() {
            return Err(Error::invalid(format!("bad psychometric record {self:?}")));
        }
        Ok(())
    }

    pub fn probability(&self) -> f64 {
        self.detections as f64 / self.trials as f64
    }
}

/// `p(level) = c0 + c1·x + c2·x² + c3·x³`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubicFit {
    pub coefficients: [f64; 4],
    pub eccentricity_deg: f64,
    /// Mean squared residual of the fitted records.
    pub residual_mse: f64,
    /// Measured stimulus range `[min, max]`.
    pub level_range: (f64, f64),
}

impl CubicFit {
    pub fn eval(&self, x: f64) -> f64 {
        let c = &self.coefficients;
        c[0] + x * (c[1] + x * (c[2] + x * c[3]))
    }
}

/// Least-squares cubic of detection probability against stimulus level.
pub fn fit_cubic(records: &[PsychometricRecord]) -> Result<CubicFit> {
    for r in records {
        r.validate()?;
    }
    let mut levels: Vec<f64> = records.iter().map(|r| r.stimulus_level).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    if levels.len() < 4 {
        return Err(Error::invalid(format!(
            "a cubic fit needs at least 4 distinct levels, got {}",
            levels.len()
        )));
    }
    let ecc = records[0].eccentricity_deg;
    // Center and scale the levels for conditioning, then expand back.
    let (lo, hi) = (levels[0], levels[levels.len() - 1]);
    let mid = 0.5 * (lo + hi);
    let half = (0.5 * (hi - lo)).max(f64::MIN_POSITIVE);
    let n = records.len();
    let a = DMatrix::from_fn(n, 4, |i, j| ((records[i].stimulus_level - mid) / half).powi(j as i32));
    let b = DVector::from_iterator(n, records.iter().map(|r| r.probability()));
    let svd = a.clone().svd(true, true);
    let s = svd
        .solve(&b, 1e-13)
        .map_err(|e| Error::Convergence(format!("cubic least squares: {e}")))?;
    // p(x) = Σ s_j ((x − m)/h)^j, expanded into monomials of x.
    let mut c = [0.0f64; 4];
    for (j, &sj) in s.iter().enumerate() {
        let scale = sj / half.powi(j as i32);
        for i in 0..=j {
            let binom = [1.0, 1.0, 1.0, 1.0, 2.0, 1.0, 1.0, 3.0, 3.0, 1.0][j * (j + 1) / 2 + i];
            c[i] += scale * binom * (-mid).powi((j - i) as i32);
        }
    }
    let resid = &a * &s - &b;
    Ok(CubicFit {
        coefficients: c,
        eccentricity_deg: ecc,
        residual_mse: resid.norm_squared() / n as f64,
        level_range: (lo, hi),
    })
}

/// Smallest level in the measured range where the fit equals `prob`, or
/// `None` when it never does.
pub fn threshold_at(fit: &CubicFit, prob: f64) -> Option<f64> {
    let (lo, hi) = fit.level_range;
    let f = |x: f64| fit.eval(x) - prob;
    // Split the range at the cubic's stationary points; each piece is monotone.
    let c = &fit.coefficients;
    let mut knots = vec![lo, hi];
    let (qa, qb, qc) = (3.0 * c[3], 2.0 * c[2], c[1]);
    if qa.abs() > 1e-300 {
        let disc = qb * qb - 4.0 * qa * qc;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            knots.push((-qb - sq) / (2.0 * qa));
            knots.push((-qb + sq) / (2.0 * qa));
        }
    } else if qb.abs() > 1e-300 {
        knots.push(-qc / qb);
    }
    knots.retain(|&k| k >= lo && k <= hi && k.is_finite());
    knots.sort_by(f64::total_cmp);
    knots.dedup();
    for w in knots.windows(2) {
        let (mut a, mut b) = (w[0], w[1]);
        let (fa, fb) = (f(a), f(b));
        if fa == 0.0 {
            return Some(a);
        }
        if fa.signum() == fb.signum() && fb != 0.0 {
            continue;
        }
        if fb == 0.0 {
            return Some(b);
        }
        let s = fa.signum();
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if m <= a || m >= b {
                break;
            }
            if f(m).signum() == s {
                a = m;
            } else {
                b = m;
            }
        }
        return Some(0.5 * (a + b));
    }
    if knots.len() == 1 && f(knots[0]) == 0.0 {
        return Some(knots[0]);
    }
    None
}

/// Percentile bootstrap interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub estimate: Option<f64>,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    /// Resamples whose statistic could not be computed.
    pub failures: usize,
    pub n_boot: usize,
}

/// Resample each record's trial outcomes with replacement, recompute the
/// statistic, and take the central `level` percentile interval.
pub fn bootstrap_ci(
    records: &[PsychometricRecord],
    statistic: impl Fn(&[PsychometricRecord]) -> Result<Option<f64>>,
    level: f64,
    n_boot: usize,
    seed: u64,
) -> Result<BootstrapCi> {
    for r in records {
        r.validate()?;
    }
    if !(level > 0.0 && level < 1.0) || n_boot == 0 {
        return Err(Error::invalid("bootstrap needs 0 < level < 1 and n_boot > 0"));
    }
    let estimate = statistic(records).ok().flatten();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n_boot);
    let mut failures = 0;
    let mut resampled = records.to_vec();
    for _ in 0..n_boot {
        for (dst, src) in resampled.iter_mut().zip(records) {
            let dist = Binomial::new(src.trials as u64, src.probability()).expect("valid binomial");
            dst.detections = dist.sample(&mut rng) as u32;
        }
        match statistic(&resampled) {
            Ok(Some(v)) if v.is_finite() => values.push(v),
            _ => failures += 1,
        }
    }
    if failures * 5 > n_boot {
        return Err(Error::Convergence(format!(
            "{failures} of {n_boot} bootstrap resamples failed"
        )));
    }
    values.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    Ok(BootstrapCi {
        estimate,
        lower: quantile(&values, alpha),
        upper: quantile(&values, 1.0 - alpha),
        level,
        failures,
        n_boot,
    })
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    let t = pos - i as f64;
    sorted[i] * (1.0 - t) + sorted[j] * t
}

/// Statistic for [`bootstrap_ci`]: the `prob` crossing of a cubic fit.
pub fn cubic_threshold(prob: f64) -> impl Fn(&[PsychometricRecord]) -> Result<Option<f64>> {
    move |recs| Ok(threshold_at(&fit_cubic(recs)?, prob))
}

/// Records drawn from a known detection curve `p(level)`.
pub fn simulate_records(
    curve: impl Fn(f64) -> f64,
    levels: &[f64],
    trials: u32,
    eccentricity_deg: f64,
    seed: u64,
) -> Vec<PsychometricRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    levels
        .iter()
        .map(|&x| {
            let p = curve(x).clamp(0.0, 1.0);
            PsychometricRecord {
                eccentricity_deg,
                stimulus_level: x,
                detections: Binomial::new(trials as u64, p).expect("valid").sample(&mut rng) as u32,
                trials,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_cubic() {
        let c = [0.9, -0.05, 0.002, -0.00005];
        let levels = [1.0, 2.0, 4.0, 6.0, 8.0, 10.0];
        let recs: Vec<_> = levels
            .iter()
            .map(|&x| PsychometricRecord {
                eccentricity_deg: 8.0,
                stimulus_level: x,
                detections: 0,
                trials: 1,
            })
            .collect();
        let fit = fit_cubic_values(&recs, |x| c[0] + c[1] * x + c[2] * x * x + c[3] * x * x * x);
        for i in 0..4 {
            assert!((fit.coefficients[i] - c[i]).abs() < 1e-8, "{:?}", fit.coefficients);
        }
    }

    fn fit_cubic_values(recs: &[PsychometricRecord], p: impl Fn(f64) -> f64) -> CubicFit {
        // 2^31 trials per level: counts carry the probability to ~1e-10.
        let t = 1u64 << 31;
        let recs: Vec<_> = recs
            .iter()
            .map(|r| PsychometricRecord {
                detections: (p(r.stimulus_level) * t as f64).round() as u32,
                trials: t as u32,
                ..*r
            })
            .collect();
        fit_cubic(&recs).unwrap()
    }

    #[test]
    fn constant_detection() {
        let recs: Vec<_> = (1..=6)
            .map(|i| PsychometricRecord {
                eccentricity_deg: 14.0,
                stimulus_level: i as f64,
                detections: 10,
                trials: 20,
            })
            .collect();
        let f = fit_cubic(&recs).unwrap();
        assert!((f.coefficients[0] - 0.5).abs() < 1e-10);
        assert!(f.coefficients[1..].iter().all(|c| c.abs() < 1e-10));
        assert!(threshold_at(&f, 0.75).is_none());
        let too_few: Vec<_> = recs.iter().take(3).copied().collect();
        assert!(fit_cubic(&too_few).is_err());
    }

    #[test]
    fn threshold_inverts_planted_root() {
        // p(x) = 0.75 + (6.89 − x)(α + β(x − 4)²): decreasing through 0.75 at 6.89.
        let (alpha, beta) = (0.04, 0.002);
        let root = 6.89;
        let c0 = 0.75 + root * (alpha + 16.0 * beta);
        let c1 = -(alpha + 16.0 * beta) + root * (-8.0 * beta);
        let c2 = 8.0 * beta + root * beta;
        let c3 = -beta;
        let fit = CubicFit {
            coefficients: [c0, c1, c2, c3],
            eccentricity_deg: 14.0,
            residual_mse: 0.0,
            level_range: (1.0, 12.0),
        };
        assert!((fit.eval(root) - 0.75).abs() < 1e-12);
        let t = threshold_at(&fit, 0.75).unwrap();
        assert!((t - root).abs() < 1e-6, "{t}");
        // Entirely above 0.75 within range.
        let high = CubicFit {
            coefficients: [0.95, -0.001, 0.0, 0.0],
            ..fit
        };
        assert!(threshold_at(&high, 0.75).is_none());
    }

    #[test]
    fn noisy_fit_residual_below_noise() {
        let levels: Vec<f64> = (0..40).map(|i| 1.0 + i as f64 * 0.25).collect();
        let trials = 200;
        let recs = simulate_records(|x| 0.95 - 0.05 * x, &levels, trials, 8.0, 3);
        let fit = fit_cubic(&recs).unwrap();
        let noise_var = levels
            .iter()
            .map(|x| {
                let p = 0.95 - 0.05 * x;
                p * (1.0 - p) / trials as f64
            })
            .sum::<f64>()
            / levels.len() as f64;
        assert!(fit.residual_mse < noise_var, "{} vs {noise_var}", fit.residual_mse);
    }

    #[test]
    fn bootstrap_degenerate_and_deterministic() {
        let recs: Vec<_> = (1..=5)
            .map(|i| PsychometricRecord {
                eccentricity_deg: 8.0,
                stimulus_level: i as f64,
                detections: if i < 3 { 30 } else { 0 },
                trials: 30,
            })
            .collect();
        let mean_p = |r: &[PsychometricRecord]| -> Result<Option<f64>> {
            Ok(Some(r.iter().map(|x| x.probability()).sum::<f64>() / r.len() as f64))
        };
        let ci = bootstrap_ci(&recs, mean_p, 0.95, 200, 1).unwrap();
        assert_eq!(ci.lower, ci.upper);
        let noisy: Vec<_> = recs.iter().map(|r| PsychometricRecord { detections: 12, ..*r }).collect();
        let a = bootstrap_ci(&noisy, mean_p, 0.95, 200, 9).unwrap();
        let b = bootstrap_ci(&noisy, mean_p, 0.95, 200, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.lower < a.upper);
        let fail = |_: &[PsychometricRecord]| -> Result<Option<f64>> { Ok(None) };
        assert!(bootstrap_ci(&noisy, fail, 0.95, 50, 0).is_err());
    }
}

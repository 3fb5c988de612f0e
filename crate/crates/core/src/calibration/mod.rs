//! Psychometric analysis and calibrated quality metrics.
//!
//! Detection probabilities measured at several stimulus levels are summarized
//! by cubic fits and 75 % thresholds. Objective metrics are mapped to
//! detection probability through a six-parameter logistic fitted per
//! eccentricity; the backbone-based metric additionally learns nonnegative
//! layer weights.

pub mod calvgg;
pub mod logistic;
pub mod metrics;
pub mod psychometric;
pub mod synthetic;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use calvgg::{
    calibrate_scalar, calibrate_vgg, predict_full_image, sweep_far_boundary, CalibratedMetric, EccCalibration,
    MethodOutputs, SweepRow,
};
pub use logistic::{fit_logistic, levenberg_marquardt, LmConfig, LogisticFit, LogisticParams};
pub use metrics::{layer_distances, metric_score, MetricId, CALVGG_LAYERS};
pub use psychometric::{bootstrap_ci, fit_cubic, threshold_at, BootstrapCi, CubicFit, PsychometricRecord};

/// Pearson correlation, `None` when either side has zero variance or fewer
/// than two points.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Fold index of every item; items sharing an eccentricity are spread evenly
/// over the folds.
pub fn stratified_folds(eccentricities: &[f64], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::invalid("cross-validation needs k >= 2"));
    }
    if eccentricities.len() < k {
        return Err(Error::invalid(format!(
            "{} items cannot fill {k} folds",
            eccentricities.len()
        )));
    }
    let mut strata: Vec<(f64, Vec<usize>)> = Vec::new();
    for (i, &e) in eccentricities.iter().enumerate() {
        match strata.iter_mut().find(|(v, _)| *v == e) {
            Some((_, idx)) => idx.push(i),
            None => strata.push((e, vec![i])),
        }
    }
    strata.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut folds = vec![0; eccentricities.len()];
    let mut next = 0;
    for (_, mut idx) in strata {
        idx.shuffle(&mut rng);
        for i in idx {
            folds[i] = next % k;
            next += 1;
        }
    }
    Ok(folds)
}

/// Per-fold and mean held-out correlation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    /// Held-out Pearson r per fold; zero-variance predictions count as 0.
    pub fold_r: Vec<f64>,
    pub mean_r: f64,
    pub folds: Vec<usize>,
}

/// Minimum held-out items per fold.
pub const MIN_FOLD_SIZE: usize = 3;

/// k-fold cross-validation. `fitter` receives the training items and returns
/// a predictor; `measured` gives each item's observed probability.
pub fn cross_validate<T, P>(
    items: &[T],
    eccentricity: impl Fn(&T) -> f64,
    measured: impl Fn(&T) -> f64,
    fitter: impl Fn(&[&T]) -> Result<P>,
    k: usize,
    seed: u64,
) -> Result<CvReport>
where
    P: Fn(&T) -> f64,
{
    let ecc: Vec<f64> = items.iter().map(&eccentricity).collect();
    let folds = stratified_folds(&ecc, k, seed)?;
    let mut fold_r = Vec::with_capacity(k);
    for f in 0..k {
        let train: Vec<&T> = items.iter().zip(&folds).filter(|(_, &g)| g != f).map(|(t, _)| t).collect();
        let test: Vec<&T> = items.iter().zip(&folds).filter(|(_, &g)| g == f).map(|(t, _)| t).collect();
        if test.len() < MIN_FOLD_SIZE {
            return Err(Error::invalid(format!(
                "fold {f} holds {} items, need at least {MIN_FOLD_SIZE}",
                test.len()
            )));
        }
        let predict = fitter(&train)?;
        let pred: Vec<f64> = test.iter().map(|t| predict(t)).collect();
        let obs: Vec<f64> = test.iter().map(|t| measured(t)).collect();
        fold_r.push(pearson(&pred, &obs).unwrap_or(0.0));
    }
    let mean_r = fold_r.iter().sum::<f64>() / k as f64;
    Ok(CvReport { fold_r, mean_r, folds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn textbook(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let sx: f64 = x.iter().sum();
        let sy: f64 = y.iter().sum();
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
    }

    proptest! {
        #[test]
        fn pearson_matches_textbook(seed in any::<u64>(), n in 3usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = x.iter().map(|v| 0.3 * v + rng.random_range(-1.0..1.0)).collect();
            let r = pearson(&x, &y).unwrap();
            prop_assert!((r - textbook(&x, &y)).abs() < 1e-12);
        }
    }

    #[test]
    fn pearson_degenerate() {
        assert!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).is_none());
        assert!(pearson(&[1.0], &[1.0]).is_none());
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn folds_are_stratified_and_seeded() {
        let ecc: Vec<f64> = (0..30).map(|i| [8.0, 14.0, 20.0][i % 3]).collect();
        let a = stratified_folds(&ecc, 5, 4).unwrap();
        assert_eq!(a, stratified_folds(&ecc, 5, 4).unwrap());
        for f in 0..5 {
            for e in [8.0, 14.0, 20.0] {
                let n = a.iter().zip(&ecc).filter(|(&g, &x)| g == f && x == e).count();
                assert_eq!(n, 2);
            }
        }
        assert!(stratified_folds(&ecc[..4], 5, 0).is_err());
    }

    #[test]
    fn perfect_and_noise_predictors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let items: Vec<(f64, f64)> = (0..100).map(|i| ([8.0, 20.0][i % 2], rng.random_range(0.0..1.0))).collect();
        let perfect = cross_validate(&items, |t| t.0, |t| t.1, |_| Ok(|t: &(f64, f64)| t.1), 5, 0).unwrap();
        assert!(perfect.fold_r.iter().all(|r| (r - 1.0).abs() < 1e-12));
        // A predictor unrelated to the labels.
        let noise = cross_validate(
            &items,
            |t| t.0,
            |t| t.1,
            |_| Ok(|t: &(f64, f64)| (t.1 * 1e6).sin()),
            5,
            0,
        )
        .unwrap();
        assert!(noise.mean_r.abs() < 0.3, "{}", noise.mean_r);
        assert!(cross_validate(&items[..10], |t| t.0, |t| t.1, |_| Ok(|t: &(f64, f64)| t.1), 5, 0).is_err());
    }
}

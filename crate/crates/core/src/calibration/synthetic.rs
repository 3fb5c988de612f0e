//! Synthetic calibration data with known generating models.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use super::calvgg::{calibrate_vgg, CalibratedMetric, EccCalibration};
use super::logistic::{LmConfig, LogisticParams};
use super::metrics::{layer_distances, MetricId, CALVGG_LAYERS};
use crate::error::Result;
use crate::features::Vgg19;
use crate::imaging::{gaussian_blur, ImagePatch};

/// Blur levels of the calibration ladder.
pub const BLUR_LADDER: [f64; 5] = [0.25, 1.25, 2.25, 3.25, 4.25];

/// One scored stimulus with its measured detection probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub eccentricity_deg: f64,
    pub score: f64,
    pub probability: f64,
}

fn observe(p: f64, trials: Option<u32>, rng: &mut impl Rng) -> f64 {
    let p = p.clamp(0.0, 1.0);
    match trials {
        Some(n) => Binomial::new(n as u64, p).expect("valid").sample(rng) as f64 / n as f64,
        None => p,
    }
}

/// Generating logistic per eccentricity: increasing in score, centered later
/// and flatter further out. Scores span `[0, 20]`, where the plain sigmoid is
/// saturated for most of the range.
pub fn monotone_truth(eccentricity_deg: f64) -> LogisticParams {
    let s = (eccentricity_deg / 20.0).clamp(0.0, 1.0);
    let b = 0.8 - 0.4 * s;
    let center = 8.0 + 4.0 * s;
    LogisticParams {
        a: 0.5,
        b,
        c: 1.0,
        k: 0.98,
        q: (b * center).exp(),
        v: 1.0,
    }
}

/// `n` items spread over 8°, 14° and 20° with binomial observation noise.
pub fn monotone_dataset(n: usize, trials: u32, seed: u64) -> Vec<ScoredItem> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let e = [8.0, 14.0, 20.0][i % 3];
            let t = rng.random_range(0.0..20.0);
            ScoredItem {
                eccentricity_deg: e,
                score: t,
                probability: observe(monotone_truth(e).eval(t), Some(trials), &mut rng),
            }
        })
        .collect()
}

/// Hidden layer weights of the ladder model: a few nonzero layers spanning
/// shallow to deep.
pub fn ladder_truth_weights() -> Vec<f64> {
    let mut w = vec![0.0; CALVGG_LAYERS.len()];
    w[1] = 1.0;
    w[6] = 0.5;
    w[12] = 0.25;
    w
}

/// Reference-blurred pairs of every exemplar at every ladder level.
#[derive(Debug, Clone)]
pub struct LadderSet {
    /// Layer distances per pair.
    pub distances: Vec<Vec<f64>>,
    pub sigmas: Vec<f64>,
    /// Per calibrated eccentricity, the observed probability of each pair.
    pub probabilities: Vec<(f64, Vec<f64>)>,
}

/// Build ladder pairs from `exemplars` and label them with the hidden model:
/// weighted layer distance, normalized to unit mean, through an increasing
/// logistic that is steeper at smaller eccentricity.
pub fn blur_ladder_set(
    vgg: &Vgg19<f32>,
    exemplars: &[ImagePatch],
    eccentricities: &[f64],
    trials: Option<u32>,
    seed: u64,
) -> Result<LadderSet> {
    let mut distances = Vec::new();
    let mut sigmas = Vec::new();
    for ex in exemplars {
        for &s in &BLUR_LADDER {
            let blurred = gaussian_blur(ex, s)?;
            distances.push(layer_distances(vgg, ex, &blurred)?);
            sigmas.push(s);
        }
    }
    let w = ladder_truth_weights();
    let raw: Vec<f64> = distances.iter().map(|d| w.iter().zip(d).map(|(a, b)| a * b).sum()).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probabilities = eccentricities
        .iter()
        .map(|&e| {
            let lp = LogisticParams {
                a: 0.5,
                b: 4.0 * 8.0 / e.max(1.0),
                c: 1.0,
                k: 1.0,
                q: 8.0,
                v: 1.0,
            };
            let p = raw.iter().map(|t| observe(lp.eval(t / mean), trials, &mut rng)).collect();
            (e, p)
        })
        .collect();
    Ok(LadderSet {
        distances,
        sigmas,
        probabilities,
    })
}

/// Fit a calibrated backbone metric to a ladder set.
pub fn fit_ladder_model(set: &LadderSet, cfg: &LmConfig) -> Result<CalibratedMetric> {
    let cals: Vec<EccCalibration> = set
        .probabilities
        .iter()
        .map(|(e, p)| calibrate_vgg(&set.distances, p, *e, cfg))
        .collect::<Result<_>>()?;
    CalibratedMetric::new(MetricId::CalVgg, cals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{cross_validate, fit_logistic};

    #[test]
    fn monotone_truth_is_increasing() {
        for e in [8.0, 14.0, 20.0] {
            let lp = monotone_truth(e);
            let v: Vec<f64> = (0..=20).map(|t| lp.eval(t as f64)).collect();
            assert!(v.windows(2).all(|w| w[1] > w[0]));
            assert!(v[0] < 0.52 && v[20] > 0.9, "{e}: {v:?}");
        }
    }

    #[test]
    fn calibrated_beats_sigmoid_on_every_fold() {
        let items = monotone_dataset(150, 40, 2);
        let cfg = LmConfig {
            restarts: 8,
            ..Default::default()
        };
        let fitter = |train: &[&ScoredItem]| -> Result<Box<dyn Fn(&ScoredItem) -> f64>> {
            let mut fits = Vec::new();
            for e in [8.0, 14.0, 20.0] {
                let (t, y): (Vec<f64>, Vec<f64>) = train
                    .iter()
                    .filter(|i| i.eccentricity_deg == e)
                    .map(|i| (i.score, i.probability))
                    .unzip();
                fits.push((e, fit_logistic(&t, &y, &cfg)?.params));
            }
            Ok(Box::new(move |i: &ScoredItem| {
                fits.iter().find(|(e, _)| *e == i.eccentricity_deg).unwrap().1.eval(i.score)
            }))
        };
        let cal = cross_validate(&items, |i| i.eccentricity_deg, |i| i.probability, fitter, 5, 0).unwrap();
        let base = cross_validate(
            &items,
            |i| i.eccentricity_deg,
            |i| i.probability,
            |_| Ok(|i: &ScoredItem| LogisticParams::STANDARD.eval(i.score)),
            5,
            0,
        )
        .unwrap();
        for (c, b) in cal.fold_r.iter().zip(&base.fold_r) {
            assert!(c > b, "{:?} vs {:?}", cal.fold_r, base.fold_r);
        }
    }
}

//! Per-eccentricity calibrated metrics and full-image prediction.

use std::path::Path;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::logistic::{fit_logistic, levenberg_marquardt, random_start, LmConfig, LogisticParams};
use super::metrics::{layer_distances, metric_score, MetricId, CALVGG_LAYERS};
use crate::error::{Error, Result};
use crate::features::Vgg19;
use crate::imaging::filter::reflect_index;
use crate::imaging::{composite_foveated, partition_weights, pixel_eccentricity, FieldGeometry, ImageBuf, ImagePatch, RangeTag, RegionPartition};

/// Calibration fitted at one eccentricity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EccCalibration {
    pub eccentricity_deg: f64,
    /// Nonnegative weights over [`CALVGG_LAYERS`]; `None` for scalar metrics.
    pub layer_weights: Option<Vec<f64>>,
    pub logistic: LogisticParams,
    /// Mean squared error of the fitted probabilities.
    pub mse: f64,
}

impl EccCalibration {
    /// Score fed to the logistic.
    pub fn score(&self, features: &[f64]) -> f64 {
        match &self.layer_weights {
            Some(w) => w.iter().zip(features).map(|(a, b)| a * b).sum(),
            None => features[0],
        }
    }

    /// Detection probability clamped to the logistic's envelope.
    pub fn predict(&self, features: &[f64]) -> f64 {
        let (lo, hi) = self.logistic.envelope();
        let y = self.logistic.eval(self.score(features));
        if y.is_nan() {
            return lo;
        }
        y.clamp(lo, hi)
    }
}

/// A metric with one calibration per measured eccentricity. Immutable after
/// fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedMetric {
    pub metric: MetricId,
    /// Backbone layers behind the weights (empty for scalar metrics).
    pub layers: Vec<String>,
    /// Sorted by eccentricity.
    pub calibrations: Vec<EccCalibration>,
}

impl CalibratedMetric {
    pub fn new(metric: MetricId, mut calibrations: Vec<EccCalibration>) -> Result<Self> {
        if calibrations.is_empty() {
            return Err(Error::invalid("a calibrated metric needs at least one eccentricity"));
        }
        calibrations.sort_by(|a, b| a.eccentricity_deg.total_cmp(&b.eccentricity_deg));
        let layers = if metric == MetricId::CalVgg {
            CALVGG_LAYERS.iter().map(|s| s.to_string()).collect()
        } else {
            Vec::new()
        };
        let m = CalibratedMetric {
            metric,
            layers,
            calibrations,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.calibrations {
            match (&c.layer_weights, self.metric) {
                (Some(w), MetricId::CalVgg) => {
                    if w.len() != CALVGG_LAYERS.len() || w.iter().any(|v| !(*v >= 0.0)) {
                        return Err(Error::invalid(format!(
                            "layer weights at {}° must be {} nonnegative values",
                            c.eccentricity_deg,
                            CALVGG_LAYERS.len()
                        )));
                    }
                }
                (None, m) if m != MetricId::CalVgg => {}
                _ => {
                    return Err(Error::invalid(format!(
                        "calibration at {}° does not match metric {}",
                        c.eccentricity_deg, self.metric
                    )))
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_vec_pretty(self).map_err(|e| Error::format("calibrated metric", e.to_string()))?;
        crate::util::write_atomic(path, &s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let m: CalibratedMetric =
            serde_json::from_slice(&s).map_err(|e| Error::format(path.display().to_string(), e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    /// Raw features of a pair: layer distances, or a one-element score.
    pub fn features(&self, vgg: Option<&Vgg19<f32>>, reference: &ImagePatch, test: &ImagePatch) -> Result<Vec<f64>> {
        match self.metric {
            MetricId::CalVgg => {
                let vgg = vgg.ok_or_else(|| Error::invalid("the calibrated backbone metric needs weights"))?;
                layer_distances(vgg, reference, test)
            }
            m => Ok(vec![metric_score(m, vgg, reference, test)?]),
        }
    }

    /// Prediction from precomputed features. Between two calibrated
    /// eccentricities the two predictions are blended linearly; outside the
    /// calibrated span the nearest calibration is used.
    pub fn predict_features(&self, features: &[f64], eccentricity_deg: f64) -> f64 {
        let cal = &self.calibrations;
        let first = &cal[0];
        let last = &cal[cal.len() - 1];
        let p = if eccentricity_deg <= first.eccentricity_deg {
            first.predict(features)
        } else if eccentricity_deg >= last.eccentricity_deg {
            last.predict(features)
        } else {
            let i = cal.iter().rposition(|c| c.eccentricity_deg <= eccentricity_deg).expect("inside span");
            let (lo, hi) = (&cal[i], &cal[i + 1]);
            if eccentricity_deg == lo.eccentricity_deg {
                lo.predict(features)
            } else {
                let t = (eccentricity_deg - lo.eccentricity_deg) / (hi.eccentricity_deg - lo.eccentricity_deg);
                (1.0 - t) * lo.predict(features) + t * hi.predict(features)
            }
        };
        p.clamp(0.0, 1.0)
    }

    pub fn predict_patch(
        &self,
        vgg: Option<&Vgg19<f32>>,
        reference: &ImagePatch,
        test: &ImagePatch,
        eccentricity_deg: f64,
    ) -> Result<f64> {
        if !(eccentricity_deg >= 0.0) {
            return Err(Error::invalid(format!("eccentricity must be >= 0, got {eccentricity_deg}")));
        }
        Ok(self.predict_features(&self.features(vgg, reference, test)?, eccentricity_deg))
    }
}

/// Logistic fit of a scalar metric at one eccentricity.
pub fn calibrate_scalar(scores: &[f64], probs: &[f64], eccentricity_deg: f64, cfg: &LmConfig) -> Result<EccCalibration> {
    let fit = fit_logistic(scores, probs, cfg)?;
    Ok(EccCalibration {
        eccentricity_deg,
        layer_weights: None,
        logistic: fit.params,
        mse: fit.mse,
    })
}

/// Joint fit of nonnegative layer weights and the logistic at one
/// eccentricity. Weights are projected onto `w >= 0` after every step.
pub fn calibrate_vgg(
    distances: &[Vec<f64>],
    probs: &[f64],
    eccentricity_deg: f64,
    cfg: &LmConfig,
) -> Result<EccCalibration> {
    let n = distances.len();
    if n != probs.len() {
        return Err(Error::shape(format!("{n} pairs vs {} probabilities", probs.len())));
    }
    if n < 6 {
        return Err(Error::invalid(format!("need at least 6 pairs, got {n}")));
    }
    let l = distances[0].len();
    if l == 0 || distances.iter().any(|d| d.len() != l) {
        return Err(Error::shape("every pair needs the same number of layer distances"));
    }
    if distances.iter().flatten().chain(probs).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("calibration input".into()));
    }
    // Work with distances normalized by their mean so weights start on one scale.
    let scale: Vec<f64> = (0..l)
        .map(|j| {
            let m = distances.iter().map(|d| d[j]).sum::<f64>() / n as f64;
            if m > 0.0 {
                m
            } else {
                1.0
            }
        })
        .collect();
    let x: Vec<Vec<f64>> = distances.iter().map(|d| d.iter().zip(&scale).map(|(a, s)| a / s).collect()).collect();

    let residuals = |p: &[f64]| -> Option<(Vec<f64>, DMatrix<f64>)> {
        let (w, lp) = p.split_at(l);
        let lp = LogisticParams::from_slice(lp);
        if lp.v.abs() < 1e-9 {
            return None;
        }
        let mut r = Vec::with_capacity(n);
        let mut j = DMatrix::zeros(n, l + 6);
        for (i, (xi, &yi)) in x.iter().zip(probs).enumerate() {
            let t: f64 = w.iter().zip(xi).map(|(a, b)| a * b).sum();
            if !(lp.denominator_base(t) > 0.0) {
                return None;
            }
            let (y, g, dt) = lp.eval_with_grad(t);
            if !y.is_finite() || !dt.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return None;
            }
            r.push(y - yi);
            for (k, xv) in xi.iter().enumerate() {
                j[(i, k)] = dt * xv;
            }
            for (k, gv) in g.iter().enumerate() {
                j[(i, l + k)] = *gv;
            }
        }
        Some((r, j))
    };
    let project = |p: &mut [f64]| {
        for w in &mut p[..l] {
            if !(*w >= 0.0) {
                *w = 0.0;
            }
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..cfg.restarts.max(1) {
        let w: Vec<f64> = (0..l).map(|_| rng.random_range(0.0..1.0) / l as f64).collect();
        let t: Vec<f64> = x.iter().map(|xi| w.iter().zip(xi).map(|(a, b)| a * b).sum()).collect();
        let mut start = w;
        start.extend(random_start(&t, probs, &mut rng));
        if let Some((p, cost)) = levenberg_marquardt(&start, residuals, project, cfg) {
            if best.as_ref().is_none_or(|(_, c)| cost < *c) {
                best = Some((p, cost));
            }
        }
    }
    let (p, cost) = best.ok_or_else(|| Error::Convergence(format!("layer-weight fit at {eccentricity_deg}° failed from every start")))?;
    let weights: Vec<f64> = p[..l].iter().zip(&scale).map(|(w, s)| (w / s).max(0.0)).collect();
    Ok(EccCalibration {
        eccentricity_deg,
        layer_weights: Some(weights),
        logistic: LogisticParams::from_slice(&p[l..]),
        mse: cost / n as f64,
    })
}

/// One patch of a full-image evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchPrediction {
    /// Top-left corner `(y, x)` in the padded image.
    pub origin: (usize, usize),
    pub eccentricity_deg: f64,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullImagePrediction {
    /// Mean over patches.
    pub mean: f64,
    pub patches: Vec<PatchPrediction>,
}

fn pad_to(img: &ImagePatch, hp: usize, wp: usize) -> Result<ImagePatch> {
    let u = img.to_unit()?;
    let (h, w) = (u.height(), u.width());
    if (hp, wp) == (h, w) {
        return Ok(u);
    }
    let buf = ImageBuf::from_fn(3, hp, wp, |c, y, x| u.get(c, reflect_index(y as isize, h), reflect_index(x as isize, w)));
    ImagePatch::new(buf, RangeTag::Unit)
}

/// Tile the image pair into non-overlapping `patch × patch` squares
/// (reflect-padding the bottom and right edges), predict each at its
/// center's eccentricity, and average.
pub fn predict_full_image(
    model: &CalibratedMetric,
    vgg: Option<&Vgg19<f32>>,
    reference: &ImagePatch,
    test: &ImagePatch,
    gaze_px: (f64, f64),
    geom: &FieldGeometry,
    patch: usize,
) -> Result<FullImagePrediction> {
    if !reference.same_dims(test) {
        return Err(Error::shape("reference and test images differ in size"));
    }
    let (h, w) = (reference.height(), reference.width());
    if patch == 0 || h < patch || w < patch {
        return Err(Error::invalid(format!("image {h}×{w} is smaller than one {patch}×{patch} patch")));
    }
    let (hp, wp) = (h.div_ceil(patch) * patch, w.div_ceil(patch) * patch);
    let (r, t) = (pad_to(reference, hp, wp)?, pad_to(test, hp, wp)?);
    let mut patches = Vec::new();
    for y in (0..hp).step_by(patch) {
        for x in (0..wp).step_by(patch) {
            let center = (x as f64 + patch as f64 / 2.0, y as f64 + patch as f64 / 2.0);
            let e = pixel_eccentricity(geom, gaze_px, center);
            let p = model.predict_patch(vgg, &r.crop(y, x, patch, patch)?, &t.crop(y, x, patch, patch)?, e)?;
            patches.push(PatchPrediction {
                origin: (y, x),
                eccentricity_deg: e,
                probability: p,
            });
        }
    }
    let mean = patches.iter().map(|p| p.probability).sum::<f64>() / patches.len() as f64;
    Ok(FullImagePrediction { mean, patches })
}

/// A test image with its viewing setup.
#[derive(Debug, Clone)]
pub struct SweepScene {
    pub name: String,
    pub reference: ImagePatch,
    pub gaze_px: (f64, f64),
    pub geom: FieldGeometry,
}

/// One method's regional reconstructions, indexed like the scenes. `None`
/// marks a missing reconstruction.
#[derive(Debug, Clone)]
pub struct MethodOutputs {
    pub method: String,
    pub near: Vec<Option<ImagePatch>>,
    pub far: Vec<Option<ImagePatch>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub far_boundary_deg: f64,
    pub detection_rate: f64,
    pub n_images: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// `(method, boundary, scene)` triples that had no reconstruction.
    pub missing: Vec<(String, f64, String)>,
}

/// Composite each method's reconstructions with the far-periphery boundary
/// moved through `boundaries` and record the mean predicted detection rate.
/// Missing reconstructions are reported and skipped.
#[allow(clippy::too_many_arguments)]
pub fn sweep_far_boundary(
    model: &CalibratedMetric,
    vgg: Option<&Vgg19<f32>>,
    scenes: &[SweepScene],
    methods: &[MethodOutputs],
    boundaries: &[f64],
    near_boundary_deg: f64,
    blend_band_deg: f64,
    patch: usize,
) -> Result<SweepReport> {
    for m in methods {
        if m.near.len() != scenes.len() || m.far.len() != scenes.len() {
            return Err(Error::shape(format!(
                "method {} has {}/{} reconstructions for {} scenes",
                m.method,
                m.near.len(),
                m.far.len(),
                scenes.len()
            )));
        }
    }
    let mut rows = Vec::new();
    let mut missing = Vec::new();
    for m in methods {
        for &b in boundaries {
            let mut preds = Vec::new();
            for (i, s) in scenes.iter().enumerate() {
                let (Some(near), Some(far)) = (&m.near[i], &m.far[i]) else {
                    log::warn!("{}: no reconstruction for {} at {b}°", m.method, s.name);
                    missing.push((m.method.clone(), b, s.name.clone()));
                    continue;
                };
                let part = RegionPartition {
                    gaze_px: s.gaze_px,
                    near_boundary_deg,
                    far_boundary_deg: b,
                    blend_band_deg: blend_band_deg.min(b - near_boundary_deg),
                };
                let weights = partition_weights(&s.geom, &part)?;
                let comp = composite_foveated(&s.reference, near, far, &weights)?;
                preds.push(predict_full_image(model, vgg, &s.reference, &comp, s.gaze_px, &s.geom, patch)?.mean);
            }
            if preds.is_empty() {
                continue;
            }
            rows.push(SweepRow {
                method: m.method.clone(),
                far_boundary_deg: b,
                detection_rate: preds.iter().sum::<f64>() / preds.len() as f64,
                n_images: preds.len(),
            });
        }
    }
    Ok(SweepReport { rows, missing })
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::format("sweep csv", e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("sweep csv", e.to_string()))?;
    crate::util::write_atomic(path, &bytes)
}

/// Read sweep rows; errors name the offending line.
pub fn read_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let mut rows = Vec::new();
    for (i, rec) in r.deserialize::<SweepRow>().enumerate() {
        let row = rec.map_err(|e| Error::format(path.display().to_string(), format!("line {}: {e}", i + 2)))?;
        if !row.detection_rate.is_finite() || !row.far_boundary_deg.is_finite() {
            return Err(Error::format(path.display().to_string(), format!("line {}: non-finite value", i + 2)));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::format(path.display().to_string(), "no rows"));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::pearson;

    fn lm(seed: u64) -> LmConfig {
        LmConfig {
            seed,
            restarts: 8,
            ..Default::default()
        }
    }

    fn scalar_model(ecc: &[f64]) -> CalibratedMetric {
        let cals = ecc
            .iter()
            .enumerate()
            .map(|(i, &e)| EccCalibration {
                eccentricity_deg: e,
                layer_weights: None,
                logistic: LogisticParams {
                    b: 1.0 + i as f64,
                    ..LogisticParams::STANDARD
                },
                mse: 0.0,
            })
            .collect();
        CalibratedMetric::new(MetricId::L2, cals).unwrap()
    }

    #[test]
    fn eccentricity_blend() {
        let m = scalar_model(&[20.0, 8.0]);
        let f = [0.7];
        let p8 = m.calibrations[0].predict(&f);
        let p20 = m.calibrations[1].predict(&f);
        assert_eq!(m.predict_features(&f, 8.0), p8);
        assert_eq!(m.predict_features(&f, 3.0), p8);
        assert_eq!(m.predict_features(&f, 25.0), p20);
        assert!((m.predict_features(&f, 14.0) - 0.5 * (p8 + p20)).abs() < 1e-15);
    }

    #[test]
    fn envelope_clamp() {
        let cal = EccCalibration {
            eccentricity_deg: 8.0,
            layer_weights: None,
            logistic: LogisticParams {
                a: 0.1,
                k: 0.9,
                c: 0.5,
                ..LogisticParams::STANDARD
            },
            mse: 0.0,
        };
        // c < 1 lets the raw formula exceed k.
        assert!(cal.logistic.eval(10.0) > 0.9);
        assert_eq!(cal.predict(&[10.0]), 0.9);
    }

    #[test]
    fn recovers_sparse_layer_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let l = CALVGG_LAYERS.len();
        let mut truth = vec![0.0; l];
        truth[3] = 2.0;
        truth[10] = 0.5;
        truth[17] = 1.0;
        let truth_lp = LogisticParams {
            a: 0.5,
            b: 1.5,
            c: 1.0,
            k: 1.0,
            q: 8.0,
            v: 1.0,
        };
        let d: Vec<Vec<f64>> = (0..120).map(|_| (0..l).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let p: Vec<f64> = d
            .iter()
            .map(|x| truth_lp.eval(truth.iter().zip(x).map(|(a, b)| a * b).sum()))
            .collect();
        let cal = calibrate_vgg(&d, &p, 8.0, &lm(0)).unwrap();
        let w = cal.layer_weights.as_ref().unwrap();
        assert!(w.iter().all(|v| *v >= 0.0));
        let pred: Vec<f64> = d.iter().map(|x| cal.predict(x)).collect();
        assert!(pearson(&pred, &p).unwrap() >= 0.99);
        // Flat probabilities: still fits and weights stay nonnegative.
        let flat = vec![0.6; d.len()];
        let cal = calibrate_vgg(&d, &flat, 8.0, &lm(1)).unwrap();
        assert!(cal.layer_weights.unwrap().iter().all(|v| *v >= 0.0));
        assert!(cal.mse < 1e-6);
    }

    #[test]
    fn json_round_trip() {
        let m = scalar_model(&[8.0, 20.0]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(CalibratedMetric::load(&p).unwrap(), m);
    }

    #[test]
    fn full_image_and_sweep() {
        let m = scalar_model(&[8.0, 20.0]);
        let geom = FieldGeometry::with_reference_pitch(48, 40);
        let reference = ImagePatch::new(
            ImageBuf::from_fn(3, 40, 48, |c, y, x| 0.2 + 0.02 * ((x + 2 * y + c) % 30) as f32),
            RangeTag::Unit,
        )
        .unwrap();
        let same = predict_full_image(&m, None, &reference, &reference, (0.0, 0.0), &geom, 16).unwrap();
        assert_eq!(same.patches.len(), 9);
        let zero = same.patches.iter().map(|p| m.predict_features(&[0.0], p.eccentricity_deg)).sum::<f64>() / 9.0;
        assert!((same.mean - zero).abs() < 1e-15);
        assert!(predict_full_image(&m, None, &reference, &reference, (0.0, 0.0), &geom, 64).is_err());

        let scene = SweepScene {
            name: "s".into(),
            reference: reference.clone(),
            gaze_px: (24.0, 20.0),
            geom,
        };
        let dark = ImagePatch::filled(40, 48, 0.0).unwrap();
        let methods = vec![
            MethodOutputs {
                method: "gt".into(),
                near: vec![Some(reference.clone())],
                far: vec![Some(reference.clone())],
            },
            MethodOutputs {
                method: "dark".into(),
                near: vec![Some(dark.clone())],
                far: vec![Some(dark)],
            },
            MethodOutputs {
                method: "none".into(),
                near: vec![None],
                far: vec![None],
            },
        ];
        let bounds = [0.2, 0.3, 0.4];
        let rep = sweep_far_boundary(&m, None, &[scene], &methods, &bounds, 0.1, 0.05, 16).unwrap();
        assert_eq!(rep.rows.len(), 6);
        assert_eq!(rep.missing.len(), 3);
        for b in bounds {
            let get = |name: &str| rep.rows.iter().find(|r| r.method == name && r.far_boundary_deg == b).unwrap().detection_rate;
            assert!(get("gt") <= get("dark"));
        }
        let p = tempfile::tempdir().unwrap().keep().join("sweep.csv");
        write_sweep_csv(&p, &rep.rows).unwrap();
        assert_eq!(read_sweep_csv(&p).unwrap(), rep.rows);
    }
}

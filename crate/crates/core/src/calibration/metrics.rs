//! Raw (pre-logistic) dissimilarity scores.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{layer_index, vgg19_layers, LayerKind, Lpips, Vgg19};
use crate::imaging::filter::{filter_separable, gaussian_kernel};
use crate::imaging::ImagePatch;
use crate::nn::{Graph, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricId {
    L2,
    Ssim,
    MsSsim,
    Lpips,
    CalVgg,
}

impl MetricId {
    pub const ALL: [MetricId; 5] = [MetricId::L2, MetricId::Ssim, MetricId::MsSsim, MetricId::Lpips, MetricId::CalVgg];

    pub fn name(self) -> &'static str {
        match self {
            MetricId::L2 => "l2",
            MetricId::Ssim => "ssim",
            MetricId::MsSsim => "msssim",
            MetricId::Lpips => "lpips",
            MetricId::CalVgg => "calvgg",
        }
    }

    /// Whether the metric needs backbone features.
    pub fn uses_backbone(self) -> bool {
        matches!(self, MetricId::Lpips | MetricId::CalVgg)
    }
}

impl fmt::Display for MetricId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let k = s.to_ascii_lowercase().replace(['-', '_', '.'], "");
        MetricId::ALL
            .into_iter()
            .find(|m| m.name() == k)
            .ok_or_else(|| Error::invalid(format!("unknown metric {s:?} (l2, ssim, msssim, lpips, calvgg)")))
    }
}

/// Layers whose distances the calibrated backbone metric reweights: every
/// convolution (after its activation) and every pooling layer.
pub const CALVGG_LAYERS: [&str; 21] = [
    "relu1_1", "relu1_2", "pool1", "relu2_1", "relu2_2", "pool2", "relu3_1", "relu3_2", "relu3_3", "relu3_4", "pool3",
    "relu4_1", "relu4_2", "relu4_3", "relu4_4", "pool4", "relu5_1", "relu5_2", "relu5_3", "relu5_4", "pool5",
];

const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const SSIM_SIGMA: f64 = 1.5;
const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const NORM_EPS: f64 = 1e-10;

fn check_dims(a: &ImagePatch, b: &ImagePatch) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::shape(format!(
            "reference is {}×{}, test is {}×{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

pub fn mse(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    check_dims(a, b)?;
    let (a, b) = (a.to_unit()?, b.to_unit()?);
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>() / n)
}

/// Mean SSIM map and mean contrast-structure map of one plane.
fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> (f64, f64) {
    let k = gaussian_kernel(SSIM_SIGMA);
    let f = |v: &[f64]| filter_separable(v, h, w, &k);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a * b).collect::<Vec<_>>();
    let mx = f(x);
    let my = f(y);
    let sxx = f(&prod(x, x));
    let syy = f(&prod(y, y));
    let sxy = f(&prod(x, y));
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let (mut s, mut cs) = (0.0, 0.0);
    for i in 0..h * w {
        let vx = sxx[i] - mx[i] * mx[i];
        let vy = syy[i] - my[i] * my[i];
        let cov = sxy[i] - mx[i] * my[i];
        let l = (2.0 * mx[i] * my[i] + c1) / (mx[i] * mx[i] + my[i] * my[i] + c1);
        let c = (2.0 * cov + c2) / (vx + vy + c2);
        s += l * c;
        cs += c;
    }
    let n = (h * w) as f64;
    (s / n, cs / n)
}

fn planes(p: &ImagePatch) -> Result<Vec<Vec<f64>>> {
    let u = p.to_unit()?;
    let (h, w) = (u.height(), u.width());
    Ok((0..3).map(|c| u.buf().plane(c)[..h * w].iter().map(|&v| v as f64).collect()).collect())
}

/// Mean structural similarity over the three channels (11×11 Gaussian
/// window, σ = 1.5, reflect borders).
pub fn ssim(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    check_dims(a, b)?;
    let (h, w) = (a.height(), a.width());
    let (pa, pb) = (planes(a)?, planes(b)?);
    Ok(pa.iter().zip(&pb).map(|(x, y)| ssim_plane(x, y, h, w).0).sum::<f64>() / 3.0)
}

fn halve(v: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (h2, w2) = (h / 2, w / 2);
    let mut out = vec![0.0; h2 * w2];
    for y in 0..h2 {
        for x in 0..w2 {
            out[y * w2 + x] =
                0.25 * (v[2 * y * w + 2 * x] + v[2 * y * w + 2 * x + 1] + v[(2 * y + 1) * w + 2 * x] + v[(2 * y + 1) * w + 2 * x + 1]);
        }
    }
    (out, h2, w2)
}

/// Five-scale structural similarity with 2×2 average downsampling. Negative
/// per-scale terms are clamped to zero before exponentiation.
pub fn ms_ssim(a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    check_dims(a, b)?;
    let (h0, w0) = (a.height(), a.width());
    if h0 >> 4 == 0 || w0 >> 4 == 0 {
        return Err(Error::invalid(format!("five-scale similarity needs at least 16×16 pixels, got {h0}×{w0}")));
    }
    let (pa, pb) = (planes(a)?, planes(b)?);
    let mut total = 0.0;
    for (mut x, mut y) in pa.into_iter().zip(pb) {
        let (mut h, mut w) = (h0, w0);
        let mut prod = 1.0;
        for (s, &wt) in MS_SSIM_WEIGHTS.iter().enumerate() {
            let (full, cs) = ssim_plane(&x, &y, h, w);
            let term = if s + 1 == MS_SSIM_WEIGHTS.len() { full } else { cs };
            prod *= term.max(0.0).powf(wt);
            if s + 1 < MS_SSIM_WEIGHTS.len() {
                let (xs, h2, w2) = halve(&x, h, w);
                let (ys, _, _) = halve(&y, h, w);
                x = xs;
                y = ys;
                h = h2;
                w = w2;
            }
        }
        total += prod;
    }
    Ok(total / 3.0)
}

fn tap_positions() -> Vec<usize> {
    CALVGG_LAYERS.iter().map(|l| layer_index(l).expect("known layer")).collect()
}

/// Per-layer feature distance between two images over [`CALVGG_LAYERS`]:
/// activations are unit-normalized across channels at each position, and the
/// squared difference is summed over channels and averaged over positions.
pub fn layer_distances(vgg: &Vgg19<f32>, a: &ImagePatch, b: &ImagePatch) -> Result<Vec<f64>> {
    check_dims(a, b)?;
    let (ua, ub) = (a.to_unit()?, b.to_unit()?);
    let mut data = ua.to_tensor::<f32>().into_data();
    data.extend(ub.to_tensor::<f32>().into_data());
    let g = Graph::<f32>::new();
    let x = g.constant(Tensor::from_vec(&[2, 3, a.height(), a.width()], data));
    let outs = vgg.forward(x, &tap_positions());
    Ok(outs.iter().map(|v| pair_distance(&v.value())).collect())
}

fn pair_distance(t: &Tensor<f32>) -> f64 {
    let (_, c, h, w) = t.dims4();
    let hw = h * w;
    let d = t.data();
    let (fa, fb) = d.split_at(c * hw);
    let mut total = 0.0;
    for p in 0..hw {
        let na = (0..c).map(|k| (fa[k * hw + p] as f64).powi(2)).sum::<f64>().sqrt() + NORM_EPS;
        let nb = (0..c).map(|k| (fb[k * hw + p] as f64).powi(2)).sum::<f64>().sqrt() + NORM_EPS;
        total += (0..c)
            .map(|k| (fa[k * hw + p] as f64 / na - fb[k * hw + p] as f64 / nb).powi(2))
            .sum::<f64>();
    }
    total / hw as f64
}

/// Backbone layers used by the calibrated metric, with their kinds, for
/// reports.
pub fn calvgg_layer_kinds() -> Vec<(String, LayerKind)> {
    let all = vgg19_layers();
    CALVGG_LAYERS
        .iter()
        .map(|n| {
            let l = all.iter().find(|l| l.name == *n).expect("known layer");
            (l.name.clone(), l.kind)
        })
        .collect()
}

/// Raw dissimilarity: zero for identical images under every metric. The
/// backbone metric here is the unweighted mean of its layer distances;
/// calibrated weights are applied by
/// [`CalibratedMetric`](super::CalibratedMetric).
pub fn metric_score(metric: MetricId, vgg: Option<&Vgg19<f32>>, a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
    check_dims(a, b)?;
    let need = || vgg.ok_or_else(|| Error::invalid(format!("metric {metric} needs backbone weights")));
    match metric {
        MetricId::L2 => mse(a, b),
        MetricId::Ssim => Ok(1.0 - ssim(a, b)?),
        MetricId::MsSsim => Ok(1.0 - ms_ssim(a, b)?),
        MetricId::Lpips => Lpips::bundled().distance(need()?, a, b),
        MetricId::CalVgg => {
            let d = layer_distances(need()?, a, b)?;
            Ok(d.iter().sum::<f64>() / d.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{gaussian_blur, ImageBuf, RangeTag};

    fn img(h: usize, w: usize, seed: u32) -> ImagePatch {
        let buf = ImageBuf::from_fn(3, h, w, |c, y, x| {
            let v = ((x * 7 + y * 13 + c * 5 + seed as usize) % 29) as f32 / 29.0;
            0.2 + 0.6 * v
        });
        ImagePatch::new(buf, RangeTag::Unit).unwrap()
    }

    #[test]
    fn identical_images_score_zero() {
        let a = img(32, 32, 0);
        let vgg = Vgg19::surrogate(0);
        for m in MetricId::ALL {
            let s = metric_score(m, Some(&vgg), &a, &a).unwrap();
            assert!(s.abs() < 1e-9, "{m}: {s}");
        }
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        assert!(metric_score(MetricId::L2, None, &img(16, 16, 0), &img(16, 32, 0)).is_err());
        assert!(metric_score(MetricId::Lpips, None, &img(16, 16, 0), &img(16, 16, 1)).is_err());
    }

    #[test]
    fn ssim_scalar_oracle() {
        // Constant planes: SSIM reduces to the luminance term.
        let a = ImagePatch::filled(16, 16, 0.3).unwrap();
        let b = ImagePatch::filled(16, 16, 0.6).unwrap();
        let c1 = 0.01f64 * 0.01;
        let (x, y) = (0.3f32 as f64, 0.6f32 as f64);
        let expect = (2.0 * x * y + c1) / (x * x + y * y + c1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-9);
        assert!((ms_ssim(&a, &b).unwrap() - expect.powf(0.1333)).abs() < 1e-9);
    }

    #[test]
    fn blur_increases_dissimilarity() {
        let a = img(32, 32, 3);
        let vgg = Vgg19::surrogate(1);
        for m in MetricId::ALL {
            let s1 = metric_score(m, Some(&vgg), &a, &gaussian_blur(&a, 0.5).unwrap()).unwrap();
            let s2 = metric_score(m, Some(&vgg), &a, &gaussian_blur(&a, 2.0).unwrap()).unwrap();
            assert!(s2 > s1 && s1 > 0.0, "{m}: {s1} {s2}");
        }
    }

    #[test]
    fn names_round_trip() {
        for m in MetricId::ALL {
            assert_eq!(m.name().parse::<MetricId>().unwrap(), m);
        }
        assert_eq!("MS-SSIM".parse::<MetricId>().unwrap(), MetricId::MsSsim);
        assert_eq!(calvgg_layer_kinds().len(), 21);
    }
}

//! Learned perceptual distance: unit-normalized backbone activations,
//! channel-weighted squared differences, spatial mean, summed over layers.

use crate::error::{Error, Result};
use crate::imaging::ImagePatch;
use crate::nn::{read_safetensors, Graph, Real, Var};

use super::{layer_index, Vgg19};

/// Backbone taps the linear heads are applied to (last activation of each
/// block).
pub const LPIPS_LAYERS: [&str; 5] = ["relu1_2", "relu2_2", "relu3_4", "relu4_4", "relu5_4"];

static LIN_WEIGHTS: &[u8] = include_bytes!("../../assets/weights/lpips_vgg_lin_v0.1.safetensors");

const NORM_EPS: f64 = 1e-10;

/// Per-channel non-negative weights for each tap.
#[derive(Debug, Clone)]
pub struct Lpips {
    pub weights: Vec<Vec<f64>>,
}

impl Lpips {
    /// The bundled linear heads.
    pub fn bundled() -> Self {
        let map = read_safetensors::<f64>(LIN_WEIGHTS).expect("bundled weights decode");
        let weights = (0..LPIPS_LAYERS.len())
            .map(|i| map[&format!("lin{i}")].data().to_vec())
            .collect();
        Lpips { weights }
    }

    /// Every channel weighted 1.
    pub fn uniform() -> Self {
        Lpips {
            weights: [64, 128, 256, 512, 512].iter().map(|&c| vec![1.0; c]).collect(),
        }
    }

    fn taps() -> Vec<usize> {
        LPIPS_LAYERS.iter().map(|l| layer_index(l).expect("known layer")).collect()
    }

    /// Differentiable distance between two unit-range batches, averaged over
    /// the batch.
    pub fn distance_var<'g, T: Real>(&self, vgg: &Vgg19<T>, a: Var<'g, T>, b: Var<'g, T>) -> Var<'g, T> {
        let taps = Lpips::taps();
        let fa = vgg.forward(a, &taps);
        let fb = vgg.forward(b, &taps);
        let eps = T::lit(NORM_EPS);
        let mut total: Option<Var<'g, T>> = None;
        for ((x, y), w) in fa.into_iter().zip(fb).zip(&self.weights) {
            let wt: Vec<T> = w.iter().map(|&v| T::lit(v)).collect();
            let d = x
                .unit_normalize_channels(eps)
                .sub(y.unit_normalize_channels(eps))
                .square()
                .weighted_channel_sum(&wt);
            let term = d.mean();
            total = Some(match total {
                Some(t) => t.add(term),
                None => term,
            });
        }
        total.expect("five layers")
    }

    /// Distance between two images.
    pub fn distance(&self, vgg: &Vgg19<f32>, a: &ImagePatch, b: &ImagePatch) -> Result<f64> {
        if !a.same_dims(b) {
            return Err(Error::shape("distance between images of different sizes"));
        }
        let g = Graph::<f32>::new();
        let x = g.constant(a.to_unit()?.to_tensor());
        let y = g.constant(b.to_unit()?.to_tensor());
        Ok(self.distance_var(vgg, x, y).item() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{ImageBuf, RangeTag};

    #[test]
    fn bundled_heads_have_expected_widths() {
        let l = Lpips::bundled();
        let widths: Vec<usize> = l.weights.iter().map(|w| w.len()).collect();
        assert_eq!(widths, vec![64, 128, 256, 512, 512]);
        assert!(l.weights.iter().flatten().all(|&v| v >= 0.0));
    }

    #[test]
    fn distance_is_zero_on_identity_and_symmetric() {
        let vgg = Vgg19::<f32>::surrogate(0);
        let l = Lpips::bundled();
        let a = ImagePatch::new(ImageBuf::from_fn(3, 32, 32, |c, y, x| ((c + 2 * y + 3 * x) % 11) as f32 / 10.0), RangeTag::Unit).unwrap();
        let b = ImagePatch::new(ImageBuf::from_fn(3, 32, 32, |c, y, x| ((c * 5 + y + x) % 7) as f32 / 6.0), RangeTag::Unit).unwrap();
        assert_eq!(l.distance(&vgg, &a, &a).unwrap(), 0.0);
        let ab = l.distance(&vgg, &a, &b).unwrap();
        let ba = l.distance(&vgg, &b, &a).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-6 * ab);
    }
}

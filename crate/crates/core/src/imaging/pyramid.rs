//! Burt–Adelson Laplacian pyramid with the 5-tap binomial kernel.
//!
//! A pyramid with `n` levels stores `n - 1` band-pass images (level 0 is the
//! finest) plus the coarsest Gaussian level as the residual, so level `l`
//! always has size `ceil(H/2^l) × ceil(W/2^l)`.

use num_traits::Float;

use super::filter::{filter_separable, filter_separable_adjoint};
use super::{ImageBuf, ImagePatch};
use crate::error::{Error, Result};

const BINOMIAL: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

fn kernel<F: Float>() -> [F; 5] {
    BINOMIAL.map(|v| F::from(v).expect("kernel literal"))
}

/// Keep even rows and columns: `h×w -> ceil(h/2)×ceil(w/2)`.
pub fn decimate<F: Float>(src: &[F], h: usize, w: usize) -> Vec<F> {
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Vec::with_capacity(h2 * w2);
    for y in 0..h2 {
        for x in 0..w2 {
            out.push(src[2 * y * w + 2 * x]);
        }
    }
    out
}

/// Zero insertion into an `h×w` grid; adjoint of [`decimate`].
pub fn zero_insert<F: Float>(src: &[F], h: usize, w: usize) -> Vec<F> {
    let w2 = w.div_ceil(2);
    let mut out = vec![F::zero(); h * w];
    for y in (0..h).step_by(2) {
        for x in (0..w).step_by(2) {
            out[y * w + x] = src[(y / 2) * w2 + x / 2];
        }
    }
    out
}

/// Blur and decimate.
pub fn reduce<F: Float>(src: &[F], h: usize, w: usize) -> Vec<F> {
    decimate(&filter_separable(src, h, w, &kernel::<F>()), h, w)
}

/// Adjoint of [`reduce`]; `g` has the coarse size.
pub fn reduce_adjoint<F: Float>(g: &[F], h: usize, w: usize) -> Vec<F> {
    filter_separable_adjoint(&zero_insert(g, h, w), h, w, &kernel::<F>())
}

/// Upsample a coarse plane to `h×w` (zero insertion, blur, gain 4).
pub fn expand<F: Float>(coarse: &[F], h: usize, w: usize) -> Vec<F> {
    let four = F::from(4.0).unwrap();
    filter_separable(&zero_insert(coarse, h, w), h, w, &kernel::<F>())
        .into_iter()
        .map(|v| v * four)
        .collect()
}

/// Adjoint of [`expand`]; returns a coarse-sized plane.
pub fn expand_adjoint<F: Float>(g: &[F], h: usize, w: usize) -> Vec<F> {
    let four = F::from(4.0).unwrap();
    decimate(&filter_separable_adjoint(g, h, w, &kernel::<F>()), h, w)
        .into_iter()
        .map(|v| v * four)
        .collect()
}

/// Sizes `(h, w)` of each level.
pub fn level_sizes(h: usize, w: usize, n_levels: usize) -> Vec<(usize, usize)> {
    let mut sizes = Vec::with_capacity(n_levels);
    let (mut lh, mut lw) = (h, w);
    for _ in 0..n_levels {
        sizes.push((lh, lw));
        lh = lh.div_ceil(2);
        lw = lw.div_ceil(2);
    }
    sizes
}

/// Check that `n_levels` fits an `h×w` image.
pub fn validate_levels(h: usize, w: usize, n_levels: usize) -> Result<()> {
    if n_levels == 0 {
        return Err(Error::invalid("a pyramid needs at least one level"));
    }
    let coarsest = h.min(w) as f64 / 2f64.powi(n_levels as i32 - 1);
    if coarsest < 2.0 {
        return Err(Error::invalid(format!(
            "{n_levels} pyramid levels are too many for a {h}×{w} image (coarsest side would be {coarsest:.2} < 2)"
        )));
    }
    Ok(())
}

/// Band planes (finest first) and the residual plane of one channel.
pub fn decompose_plane<F: Float>(src: &[F], h: usize, w: usize, n_levels: usize) -> (Vec<Vec<F>>, Vec<F>) {
    let sizes = level_sizes(h, w, n_levels);
    let mut bands = Vec::with_capacity(n_levels.saturating_sub(1));
    let mut cur = src.to_vec();
    for l in 0..n_levels - 1 {
        let (lh, lw) = sizes[l];
        let next = reduce(&cur, lh, lw);
        let up = expand(&next, lh, lw);
        bands.push(cur.iter().zip(&up).map(|(&a, &b)| a - b).collect());
        cur = next;
    }
    (bands, cur)
}

/// Inverse of [`decompose_plane`].
pub fn reconstruct_plane<F: Float>(bands: &[Vec<F>], residual: &[F], h: usize, w: usize) -> Vec<F> {
    let sizes = level_sizes(h, w, bands.len() + 1);
    let mut cur = residual.to_vec();
    for l in (0..bands.len()).rev() {
        let (lh, lw) = sizes[l];
        let up = expand(&cur, lh, lw);
        cur = bands[l].iter().zip(&up).map(|(&a, &b)| a + b).collect();
    }
    cur
}

/// Adjoint of the map `image -> (bands, residual)`.
pub fn decompose_plane_adjoint<F: Float>(g_bands: &[Vec<F>], g_residual: &[F], h: usize, w: usize) -> Vec<F> {
    let n_levels = g_bands.len() + 1;
    let sizes = level_sizes(h, w, n_levels);
    // band_l = G_l - expand(reduce(G_l)), G_{l+1} = reduce(G_l): walk from coarse to fine.
    let mut g_cur = g_residual.to_vec();
    for l in (0..n_levels - 1).rev() {
        let (lh, lw) = sizes[l];
        let gb = &g_bands[l];
        let through_expand = expand_adjoint(gb, lh, lw);
        let coarse: Vec<F> = g_cur.iter().zip(&through_expand).map(|(&a, &b)| a - b).collect();
        let back = reduce_adjoint(&coarse, lh, lw);
        g_cur = gb.iter().zip(&back).map(|(&a, &b)| a + b).collect();
    }
    g_cur
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaplacianPyramid {
    /// Band-pass levels, finest first.
    pub levels: Vec<ImageBuf>,
    /// Coarsest Gaussian level.
    pub residual: ImageBuf,
}

impl LaplacianPyramid {
    /// Total number of levels including the residual.
    pub fn n_levels(&self) -> usize {
        self.levels.len() + 1
    }

    /// Level `l` (bands, then the residual as the last level).
    pub fn level(&self, l: usize) -> &ImageBuf {
        if l < self.levels.len() {
            &self.levels[l]
        } else {
            &self.residual
        }
    }

    pub fn level_mut(&mut self, l: usize) -> &mut ImageBuf {
        if l < self.levels.len() {
            &mut self.levels[l]
        } else {
            &mut self.residual
        }
    }

    fn check_dims(&self) -> Result<(usize, usize, usize)> {
        let (c, h, w) = self.level(0).dims();
        for (l, (lh, lw)) in level_sizes(h, w, self.n_levels()).into_iter().enumerate() {
            let d = self.level(l).dims();
            if d != (c, lh, lw) {
                return Err(Error::shape(format!(
                    "pyramid level {l} is {}×{}×{}, expected {c}×{lh}×{lw}",
                    d.0, d.1, d.2
                )));
            }
        }
        Ok((c, h, w))
    }
}

/// Decompose a buffer of any channel count.
pub fn build_pyramid_buf(img: &ImageBuf, n_levels: usize) -> Result<LaplacianPyramid> {
    let (c, h, w) = img.dims();
    validate_levels(h, w, n_levels)?;
    let sizes = level_sizes(h, w, n_levels);
    let mut levels: Vec<ImageBuf> = sizes[..n_levels - 1]
        .iter()
        .map(|&(lh, lw)| ImageBuf::zeros(c, lh, lw))
        .collect();
    let (rh, rw) = sizes[n_levels - 1];
    let mut residual = ImageBuf::zeros(c, rh, rw);
    for ch in 0..c {
        let (bands, res) = decompose_plane(img.plane(ch), h, w, n_levels);
        for (lvl, band) in levels.iter_mut().zip(bands) {
            lvl.plane_mut(ch).copy_from_slice(&band);
        }
        residual.plane_mut(ch).copy_from_slice(&res);
    }
    Ok(LaplacianPyramid { levels, residual })
}

pub fn build_laplacian_pyramid(img: &ImagePatch, n_levels: usize) -> Result<LaplacianPyramid> {
    build_pyramid_buf(img.buf(), n_levels)
}

/// Collapse into a raw buffer (no range contract).
pub fn collapse_pyramid_buf(pyr: &LaplacianPyramid) -> Result<ImageBuf> {
    let (c, h, w) = pyr.check_dims()?;
    let mut out = ImageBuf::zeros(c, h, w);
    for ch in 0..c {
        let bands: Vec<Vec<f32>> = pyr.levels.iter().map(|b| b.plane(ch).to_vec()).collect();
        let plane = reconstruct_plane(&bands, pyr.residual.plane(ch), h, w);
        out.plane_mut(ch).copy_from_slice(&plane);
    }
    Ok(out)
}

/// Collapse into a unit-range patch (values clamped into range).
pub fn collapse_pyramid(pyr: &LaplacianPyramid) -> Result<ImagePatch> {
    ImagePatch::from_clamped(collapse_pyramid_buf(pyr)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::RangeTag;

    fn noise(h: usize, w: usize, seed: u64) -> ImagePatch {
        ImagePatch::new(
            ImageBuf::from_fn(3, h, w, |c, y, x| {
                let mut s = seed ^ ((c * h + y) * w + x) as u64;
                for _ in 0..3 {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                }
                (s >> 40) as f32 / (1u64 << 24) as f32
            }),
            RangeTag::Unit,
        )
        .unwrap()
    }

    #[test]
    fn level_geometry() {
        let img = ImagePatch::filled(256, 256, 0.5).unwrap();
        let p = build_laplacian_pyramid(&img, 5).unwrap();
        let sides: Vec<usize> = (0..5).map(|l| p.level(l).height()).collect();
        assert_eq!(sides, vec![256, 128, 64, 32, 16]);
        assert_eq!(p.residual.dims(), (3, 16, 16));

        let odd = noise(37, 21, 3);
        let p = build_laplacian_pyramid(&odd, 4).unwrap();
        let dims: Vec<(usize, usize)> = (0..4).map(|l| (p.level(l).height(), p.level(l).width())).collect();
        assert_eq!(dims, vec![(37, 21), (19, 11), (10, 6), (5, 3)]);
    }

    #[test]
    fn constant_image_has_no_band_energy() {
        let img = ImagePatch::filled(64, 48, 0.37).unwrap();
        let p = build_laplacian_pyramid(&img, 4).unwrap();
        for b in &p.levels {
            assert!(b.data().iter().all(|v| v.abs() < 1e-6));
        }
        assert!(p.residual.data().iter().all(|v| (v - 0.37).abs() < 1e-6));
        let back = collapse_pyramid(&p).unwrap();
        assert!(back.buf().max_abs_diff(img.buf()) < 1e-6);
    }

    #[test]
    fn zeroed_bands_give_blurred_residual() {
        let img = noise(32, 32, 9);
        let mut p = build_laplacian_pyramid(&img, 3).unwrap();
        for b in p.levels.iter_mut() {
            b.data_mut().fill(0.0);
        }
        let blurred = collapse_pyramid_buf(&p).unwrap();
        let up1 = expand(p.residual.plane(0), 16, 16);
        let up0 = expand(&up1, 32, 32);
        for (a, b) in blurred.plane(0).iter().zip(&up0) {
            assert!((a - b).abs() < 1e-6);
        }
        // A low-passed copy has less variance than the noise it came from.
        let var = |v: &[f32]| {
            let m = v.iter().sum::<f32>() / v.len() as f32;
            v.iter().map(|x| (x - m).powi(2)).sum::<f32>() / v.len() as f32
        };
        assert!(var(blurred.plane(0)) < 0.5 * var(img.buf().plane(0)));
    }

    #[test]
    fn too_many_levels_rejected() {
        let img = ImagePatch::filled(32, 32, 0.5).unwrap();
        assert!(build_laplacian_pyramid(&img, 5).is_ok());
        let err = build_laplacian_pyramid(&img, 6).unwrap_err();
        assert!(err.to_string().contains("too many"));
        assert!(build_laplacian_pyramid(&img, 0).is_err());
    }

    #[test]
    fn inconsistent_pyramid_rejected() {
        let img = noise(32, 32, 1);
        let mut p = build_laplacian_pyramid(&img, 3).unwrap();
        p.levels[1] = ImageBuf::zeros(3, 15, 16);
        assert!(collapse_pyramid(&p).is_err());
    }

    #[test]
    fn decomposition_adjoint() {
        let (h, w, n) = (13usize, 10usize, 3usize);
        let x: Vec<f64> = (0..h * w).map(|i| ((i * 29) % 17) as f64 / 17.0).collect();
        let (bands, res) = decompose_plane(&x, h, w, n);
        let gb: Vec<Vec<f64>> = bands
            .iter()
            .enumerate()
            .map(|(l, b)| (0..b.len()).map(|i| ((i * 7 + l) % 5) as f64 - 2.0).collect())
            .collect();
        let gr: Vec<f64> = (0..res.len()).map(|i| (i % 3) as f64).collect();
        let lhs: f64 = bands
            .iter()
            .zip(&gb)
            .map(|(b, g)| b.iter().zip(g).map(|(p, q)| p * q).sum::<f64>())
            .sum::<f64>()
            + res.iter().zip(&gr).map(|(p, q)| p * q).sum::<f64>();
        let back = decompose_plane_adjoint(&gb, &gr, h, w);
        let rhs: f64 = x.iter().zip(&back).map(|(p, q)| p * q).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}

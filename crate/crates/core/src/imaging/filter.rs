//! Separable filtering with reflect (mirror, edge not repeated) padding.
//!
//! Every linear operator here has an explicit adjoint so pyramid-based losses
//! can be differentiated exactly.

use num_traits::Float;

use super::{ImageBuf, ImagePatch};
use crate::error::{Error, Result};

/// Mirror an out-of-range index back into `[0, n)`.
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Normalized sampled Gaussian with radius `ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Filter every row of an `h×w` plane with an odd-length kernel.
pub fn filter_rows<F: Float>(src: &[F], h: usize, w: usize, kernel: &[F]) -> Vec<F> {
    let r = (kernel.len() / 2) as isize;
    let mut dst = vec![F::zero(); h * w];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = F::zero();
            for (t, &kv) in kernel.iter().enumerate() {
                acc = acc + kv * row[reflect_index(x as isize + t as isize - r, w)];
            }
            dst[y * w + x] = acc;
        }
    }
    dst
}

/// Adjoint of [`filter_rows`].
pub fn filter_rows_adjoint<F: Float>(g: &[F], h: usize, w: usize, kernel: &[F]) -> Vec<F> {
    let r = (kernel.len() / 2) as isize;
    let mut dst = vec![F::zero(); h * w];
    for y in 0..h {
        for x in 0..w {
            let gv = g[y * w + x];
            for (t, &kv) in kernel.iter().enumerate() {
                let j = y * w + reflect_index(x as isize + t as isize - r, w);
                dst[j] = dst[j] + kv * gv;
            }
        }
    }
    dst
}

/// Filter every column of an `h×w` plane.
pub fn filter_cols<F: Float>(src: &[F], h: usize, w: usize, kernel: &[F]) -> Vec<F> {
    let r = (kernel.len() / 2) as isize;
    let mut dst = vec![F::zero(); h * w];
    for y in 0..h {
        for (t, &kv) in kernel.iter().enumerate() {
            let sy = reflect_index(y as isize + t as isize - r, h);
            let srow = &src[sy * w..(sy + 1) * w];
            let drow = &mut dst[y * w..(y + 1) * w];
            for (d, &s) in drow.iter_mut().zip(srow) {
                *d = *d + kv * s;
            }
        }
    }
    dst
}

/// Adjoint of [`filter_cols`].
pub fn filter_cols_adjoint<F: Float>(g: &[F], h: usize, w: usize, kernel: &[F]) -> Vec<F> {
    let r = (kernel.len() / 2) as isize;
    let mut dst = vec![F::zero(); h * w];
    for y in 0..h {
        for (t, &kv) in kernel.iter().enumerate() {
            let sy = reflect_index(y as isize + t as isize - r, h);
            for x in 0..w {
                dst[sy * w + x] = dst[sy * w + x] + kv * g[y * w + x];
            }
        }
    }
    dst
}

/// Separable 2-D filter (rows then columns).
pub fn filter_separable<F: Float>(src: &[F], h: usize, w: usize, kernel: &[F]) -> Vec<F> {
    filter_cols(&filter_rows(src, h, w, kernel), h, w, kernel)
}

/// Adjoint of [`filter_separable`].
pub fn filter_separable_adjoint<F: Float>(g: &[F], h: usize, w: usize, kernel: &[F]) -> Vec<F> {
    filter_rows_adjoint(&filter_cols_adjoint(g, h, w, kernel), h, w, kernel)
}

/// Gaussian blur of a buffer (all channels).
pub fn blur_buf(img: &ImageBuf, sigma: f64) -> ImageBuf {
    if sigma == 0.0 {
        return img.clone();
    }
    let k: Vec<f32> = gaussian_kernel(sigma).into_iter().map(|v| v as f32).collect();
    let (c, h, w) = img.dims();
    let mut out = ImageBuf::zeros(c, h, w);
    for ch in 0..c {
        let f = filter_separable(img.plane(ch), h, w, &k);
        out.plane_mut(ch).copy_from_slice(&f);
    }
    out
}

/// Separable sampled-Gaussian blur, radius `ceil(3σ)`, reflect padding.
/// `sigma = 0` is the identity.
pub fn gaussian_blur(img: &ImagePatch, sigma: f64) -> Result<ImagePatch> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("blur sigma must be a non-negative number, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(img.clone());
    }
    ImagePatch::new(blur_buf(img.buf(), sigma), img.range())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::RangeTag;

    #[test]
    fn reflect_indices() {
        let v: Vec<usize> = (-3..8).map(|i| reflect_index(i, 5)).collect();
        assert_eq!(v, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect_index(-4, 1), 0);
    }

    #[test]
    fn kernel_is_normalized() {
        for s in [0.5, 1.0, 2.5] {
            let k = gaussian_kernel(s);
            assert_eq!(k.len(), 2 * (3.0f64 * s).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoints_are_exact() {
        let (h, w) = (5, 7);
        let x: Vec<f64> = (0..h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let g: Vec<f64> = (0..h * w).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let k = [0.1, 0.2, 0.4, 0.2, 0.1];
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let lhs = dot(&filter_separable(&x, h, w, &k), &g);
        let rhs = dot(&x, &filter_separable_adjoint(&g, h, w, &k));
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn negative_sigma_rejected() {
        let p = ImagePatch::new(ImageBuf::filled(3, 16, 16, 0.3), RangeTag::Unit).unwrap();
        assert!(gaussian_blur(&p, -1.0).is_err());
        assert!(gaussian_blur(&p, f64::NAN).is_err());
    }
}

//! Stride-1 "same" convolution via im2col + GEMM.

use super::tensor::{gemm, Real, Tensor};

/// Upper bound on the im2col scratch buffer, in elements.
const COL_BUDGET: usize = 1 << 22;

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    dst: &mut [T],
    ld: usize,
    col_off: usize,
) {
    let pad = k / 2;
    for c in 0..ci {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let base = row * ld + col_off;
                let x_lo = pad.saturating_sub(kx).min(w);
                let x_hi = (w + pad).saturating_sub(kx).min(w).max(x_lo);
                for y in 0..h {
                    let seg = &mut dst[base + y * w..base + (y + 1) * w];
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    seg[..x_lo].fill(T::zero());
                    seg[x_hi..].fill(T::zero());
                    let shift = kx as isize - pad as isize;
                    let s0 = (x_lo as isize + shift) as usize;
                    seg[x_lo..x_hi].copy_from_slice(&src_row[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    cols: &[T],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    ld: usize,
    col_off: usize,
    dx: &mut [T],
) {
    let pad = k / 2;
    for c in 0..ci {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let base = row * ld + col_off;
                let x_lo = pad.saturating_sub(kx).min(w);
                let x_hi = (w + pad).saturating_sub(kx).min(w).max(x_lo);
                let shift = kx as isize - pad as isize;
                for y in 0..h {
                    let iy = y as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let seg = &cols[base + y * w + x_lo..base + y * w + x_hi];
                    let s0 = (x_lo as isize + shift) as usize;
                    let dst = &mut plane[iy as usize * w + s0..iy as usize * w + s0 + seg.len()];
                    for (d, &s) in dst.iter_mut().zip(seg) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn chunk_size(rows: usize, hw: usize, n: usize) -> usize {
    (COL_BUDGET / (rows * hw).max(1)).clamp(1, n.max(1))
}

/// Forward convolution. `x: [N,Ci,H,W]`, `w: [Co,Ci,k,k]`, `b: [Co]`.
pub fn conv2d_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let (n, ci, h, wd) = x.dims4();
    let (co, wci, k, k2) = w.dims4();
    assert_eq!(ci, wci, "conv2d: input has {ci} channels, kernel expects {wci}");
    assert_eq!(k, k2, "conv2d: square kernels only");
    assert!(k % 2 == 1, "conv2d: odd kernel sizes only");
    let hw = h * wd;
    let rows = ci * k * k;
    let mut out = Tensor::zeros(&[n, co, h, wd]);
    let nb = chunk_size(rows, hw, n);
    let mut cols = vec![T::zero(); rows * nb * hw];
    let mut obuf = vec![T::zero(); co * nb * hw];
    let xd = x.data();
    let mut s0 = 0;
    while s0 < n {
        let cnt = nb.min(n - s0);
        let ld = cnt * hw;
        for s in 0..cnt {
            let xs = &xd[(s0 + s) * ci * hw..(s0 + s + 1) * ci * hw];
            if k == 1 {
                for c in 0..ci {
                    cols[c * ld + s * hw..c * ld + (s + 1) * hw].copy_from_slice(&xs[c * hw..(c + 1) * hw]);
                }
            } else {
                im2col(xs, ci, h, wd, k, &mut cols, ld, s * hw);
            }
        }
        gemm(co, rows, ld, T::one(), w.data(), false, &cols[..rows * ld], false, T::zero(), &mut obuf[..co * ld]);
        let od = out.data_mut();
        for s in 0..cnt {
            for o in 0..co {
                let bias = b.map(|b| b.data()[o]).unwrap_or_else(T::zero);
                let src = &obuf[o * ld + s * hw..o * ld + (s + 1) * hw];
                let dst = &mut od[((s0 + s) * co + o) * hw..((s0 + s) * co + o + 1) * hw];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + bias;
                }
            }
        }
        s0 += cnt;
    }
    out
}

/// Gradients of a convolution; each output is computed only when requested.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, ci, h, wd) = x.dims4();
    let (co, _, k, _) = w.dims4();
    let hw = h * wd;
    let rows = ci * k * k;
    let gyd = gy.data();

    let gb = need_b.then(|| {
        let mut gb = Tensor::zeros(&[co]);
        let d = gb.data_mut();
        for s in 0..n {
            for (o, acc) in d.iter_mut().enumerate() {
                *acc += gyd[(s * co + o) * hw..(s * co + o + 1) * hw].iter().copied().sum::<T>();
            }
        }
        gb
    });
    if !need_x && !need_w {
        return (None, None, gb);
    }

    let mut gx = need_x.then(|| Tensor::zeros(&[n, ci, h, wd]));
    let mut gw = need_w.then(|| Tensor::zeros(&[co, ci, k, k]));
    let nb = chunk_size(rows, hw, n);
    let mut cols = vec![T::zero(); rows * nb * hw];
    let mut gbuf = vec![T::zero(); co * nb * hw];
    let xd = x.data();
    let mut s0 = 0;
    while s0 < n {
        let cnt = nb.min(n - s0);
        let ld = cnt * hw;
        for s in 0..cnt {
            for o in 0..co {
                gbuf[o * ld + s * hw..o * ld + (s + 1) * hw]
                    .copy_from_slice(&gyd[((s0 + s) * co + o) * hw..((s0 + s) * co + o + 1) * hw]);
            }
        }
        if let Some(gw) = gw.as_mut() {
            for s in 0..cnt {
                let xs = &xd[(s0 + s) * ci * hw..(s0 + s + 1) * ci * hw];
                if k == 1 {
                    for c in 0..ci {
                        cols[c * ld + s * hw..c * ld + (s + 1) * hw].copy_from_slice(&xs[c * hw..(c + 1) * hw]);
                    }
                } else {
                    im2col(xs, ci, h, wd, k, &mut cols, ld, s * hw);
                }
            }
            gemm(co, ld, rows, T::one(), &gbuf[..co * ld], false, &cols[..rows * ld], true, T::one(), gw.data_mut());
        }
        if let Some(gx) = gx.as_mut() {
            gemm(rows, co, ld, T::one(), w.data(), true, &gbuf[..co * ld], false, T::zero(), &mut cols[..rows * ld]);
            let gxd = gx.data_mut();
            for s in 0..cnt {
                let dst = &mut gxd[(s0 + s) * ci * hw..(s0 + s + 1) * ci * hw];
                if k == 1 {
                    for c in 0..ci {
                        for (d, &v) in dst[c * hw..(c + 1) * hw].iter_mut().zip(&cols[c * ld + s * hw..c * ld + (s + 1) * hw]) {
                            *d += v;
                        }
                    }
                } else {
                    col2im(&cols, ci, h, wd, k, ld, s * hw, dst);
                }
            }
        }
        s0 += cnt;
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4();
        let (co, _, k, _) = w.dims4();
        let p = (k / 2) as isize;
        let mut out = Tensor::zeros(&[n, co, h, wd]);
        for s in 0..n {
            for o in 0..co {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = b.data()[o];
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = y as isize + ky as isize - p;
                                    let ix = xx as isize + kx as isize - p;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += w.data()[((o * ci + c) * k + ky) * k + kx]
                                        * x.data()[((s * ci + c) * h + iy as usize) * wd + ix as usize];
                                }
                            }
                        }
                        out.data_mut()[((s * co + o) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut s = seed;
        let data = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect();
        Tensor::from_vec(shape, data)
    }

    #[test]
    fn matches_direct_convolution() {
        for &k in &[1usize, 3, 5] {
            let x = pseudo(&[2, 3, 7, 6], 1);
            let w = pseudo(&[4, 3, k, k], 2);
            let b = pseudo(&[4], 3);
            let fast = conv2d_forward(&x, &w, Some(&b));
            let slow = naive(&x, &w, &b);
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <gy, conv(x)> linear in x and w: check against the naive forward.
        let x = pseudo(&[2, 2, 5, 5], 4);
        let w = pseudo(&[3, 2, 3, 3], 5);
        let gy = pseudo(&[2, 3, 5, 5], 6);
        let (gx, gw, gb) = conv2d_backward(&x, &w, &gy, true, true, true);
        let zero_b = Tensor::zeros(&[3]);
        let f = |x: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
            naive(x, w, &zero_b).data().iter().zip(gy.data()).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for i in [0usize, 7, 23, 49] {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let fd = (f(&xp, &w) - f(&xm, &w)) / (2.0 * eps);
            assert!((fd - gx.as_ref().unwrap().data()[i]).abs() < 1e-6);
            let mut wp = w.clone();
            wp.data_mut()[i % 54] += eps;
            let mut wm = w.clone();
            wm.data_mut()[i % 54] -= eps;
            let fd = (f(&x, &wp) - f(&x, &wm)) / (2.0 * eps);
            assert!((fd - gw.as_ref().unwrap().data()[i % 54]).abs() < 1e-6);
        }
        let sum0: f64 = gy.data()[..25].iter().sum::<f64>() + gy.data()[75..100].iter().sum::<f64>();
        assert!((gb.unwrap().data()[0] - sum0).abs() < 1e-12);
    }
}

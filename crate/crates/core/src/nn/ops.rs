//! Differentiable ops on [`Var`].

use std::sync::Arc;

use super::conv::{conv2d_backward, conv2d_forward};
use super::graph::Var;
use super::tensor::{gemm, Real, Tensor};

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

impl<'g, T: Real> Var<'g, T> {
    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "add");
        let out = a.zip_map(&b, |x, y| x + y);
        self.graph().record(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "sub");
        let out = a.zip_map(&b, |x, y| x - y);
        self.graph()
            .record(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        same_shape(&a, &b, "mul");
        let out = a.zip_map(&b, |x, y| x * y);
        self.graph().record(out, &[self, other], move |g, need| {
            vec![
                need[0].then(|| g.zip_map(&b, |gv, bv| gv * bv)),
                need[1].then(|| g.zip_map(&a, |gv, av| gv * av)),
            ]
        })
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        let out = self.value().scale(s);
        self.graph().record(out, &[self], move |g, _| vec![Some(g.scale(s))])
    }

    pub fn add_scalar(self, s: T) -> Var<'g, T> {
        let out = self.value().map(|v| v + s);
        self.graph().record(out, &[self], |g, _| vec![Some(g.clone())])
    }

    pub fn square(self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| v * v);
        let two = T::lit(2.0);
        self.graph()
            .record(out, &[self], move |g, _| vec![Some(g.zip_map(&x, |gv, xv| two * gv * xv))])
    }

    pub fn tanh(self) -> Var<'g, T> {
        let y = Arc::new(self.value().map(|v| v.tanh()));
        let yc = y.clone();
        self.graph().record((*y).clone(), &[self], move |g, _| {
            vec![Some(g.zip_map(&yc, |gv, yv| gv * (T::one() - yv * yv)))]
        })
    }

    pub fn leaky_relu(self, slope: T) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| if v > T::zero() { v } else { v * slope });
        self.graph().record(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&x, |gv, xv| if xv > T::zero() { gv } else { gv * slope }))]
        })
    }

    pub fn relu(self) -> Var<'g, T> {
        self.leaky_relu(T::zero())
    }

    /// Tangent of `pre.leaky_relu(slope)` along `self`: `self · act'(pre)`,
    /// with the activation pattern held fixed (exact almost everywhere).
    pub fn leaky_relu_tangent(self, pre: Var<'g, T>, slope: T) -> Var<'g, T> {
        let mask = Arc::new(pre.value().map(|v| if v > T::zero() { T::one() } else { slope }));
        let m = mask.clone();
        let out = self.value().zip_map(&mask, |t, k| t * k);
        self.graph().record(out, &[self], move |g, _| vec![Some(g.zip_map(&m, |gv, k| gv * k))])
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.graph()
            .record(out, &[self], move |g, _| vec![Some(Tensor::full(&shape, g.item()))])
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = T::from_usize(self.value().numel()).unwrap();
        self.sum().scale(T::one() / n)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshape(shape);
        self.graph()
            .record(out, &[self], move |g, _| vec![Some(g.clone().reshape(&old))])
    }

    /// Mean squared error against another var, shape `[1]`.
    pub fn mse(self, other: Var<'g, T>) -> Var<'g, T> {
        self.sub(other).square().mean()
    }

    /// Per-channel `x * scale[c] + shift[c]` on an NCHW tensor.
    pub fn channel_affine(self, scale: &[T], shift: &[T]) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(scale.len() == c && shift.len() == c, "channel_affine: {c} channels");
        let hw = h * w;
        let mut out = (*x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let ch = i % c;
            for v in chunk {
                *v = *v * scale[ch] + shift[ch];
            }
        }
        let scale = scale.to_vec();
        let _ = n;
        self.graph().record(out, &[self], move |g, _| {
            let mut gx = g.clone();
            for (i, chunk) in gx.data_mut().chunks_mut(hw).enumerate() {
                let s = scale[i % c];
                for v in chunk {
                    *v *= s;
                }
            }
            vec![Some(gx)]
        })
    }

    /// Zero-padded "same" convolution, stride 1.
    pub fn conv2d(self, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Var<'g, T> {
        let x = self.value();
        let wv = w.value();
        let bv = b.map(|b| b.value());
        let out = conv2d_forward(&x, &wv, bv.as_deref());
        let mut parents = vec![self, w];
        if let Some(b) = b {
            parents.push(b);
        }
        self.graph().record(out, &parents, move |g, need| {
            let need_b = need.get(2).copied().unwrap_or(false);
            let (gx, gw, gb) = conv2d_backward(&x, &wv, g, need[0], need[1], need_b);
            let mut v = vec![gx, gw];
            if need.len() == 3 {
                v.push(gb);
            }
            v
        })
    }

    /// `x [N,F] · wᵀ [F,O] + b [O]`.
    pub fn linear(self, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Var<'g, T> {
        let x = self.value();
        let wv = w.value();
        let (n, f) = (x.shape()[0], x.numel() / x.shape()[0]);
        let o = wv.shape()[0];
        assert_eq!(wv.numel(), o * f, "linear: weight shape {:?} vs {f} features", wv.shape());
        let mut out = Tensor::zeros(&[n, o]);
        gemm(n, f, o, T::one(), x.data(), false, wv.data(), true, T::zero(), out.data_mut());
        if let Some(b) = b {
            let bv = b.value();
            for row in out.data_mut().chunks_mut(o) {
                for (v, &bb) in row.iter_mut().zip(bv.data()) {
                    *v += bb;
                }
            }
        }
        let mut parents = vec![self, w];
        if let Some(b) = b {
            parents.push(b);
        }
        let xshape = x.shape().to_vec();
        let wshape = wv.shape().to_vec();
        self.graph().record(out, &parents, move |g, need| {
            let gx = need[0].then(|| {
                let mut gx = Tensor::zeros(&xshape);
                gemm(n, o, f, T::one(), g.data(), false, wv.data(), false, T::zero(), gx.data_mut());
                gx
            });
            let gw = need[1].then(|| {
                let mut gw = Tensor::zeros(&wshape);
                gemm(o, n, f, T::one(), g.data(), true, x.data(), false, T::zero(), gw.data_mut());
                gw
            });
            let mut v = vec![gx, gw];
            if need.len() == 3 {
                v.push(need[2].then(|| {
                    let mut gb = Tensor::zeros(&[o]);
                    for row in g.data().chunks(o) {
                        for (acc, &r) in gb.data_mut().iter_mut().zip(row) {
                            *acc += r;
                        }
                    }
                    gb
                }));
            }
            v
        })
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool2(self) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (h2, w2) = (h / 2, w / 2);
        let mut out = Tensor::zeros(&[n, c, h2, w2]);
        let mut arg = vec![0u32; n * c * h2 * w2];
        let xd = x.data();
        {
            let od = out.data_mut();
            for p in 0..n * c {
                let base = p * h * w;
                for y in 0..h2 {
                    for xx in 0..w2 {
                        let i0 = base + 2 * y * w + 2 * xx;
                        let mut best = i0;
                        for &i in &[i0 + 1, i0 + w, i0 + w + 1] {
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                        let o = (p * h2 + y) * w2 + xx;
                        od[o] = xd[best];
                        arg[o] = best as u32;
                    }
                }
            }
        }
        let shape = x.shape().to_vec();
        self.graph().record(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&shape);
            let gd = gx.data_mut();
            for (o, &i) in arg.iter().enumerate() {
                gd[i as usize] += g.data()[o];
            }
            vec![Some(gx)]
        })
    }

    /// 2×2 average pooling with stride 2; spatial dimensions must be even.
    pub fn avg_pool2(self) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even dimensions, got {h}×{w}");
        let (h2, w2) = (h / 2, w / 2);
        let q = T::lit(0.25);
        let mut out = Tensor::zeros(&[n, c, h2, w2]);
        {
            let xd = x.data();
            let od = out.data_mut();
            for p in 0..n * c {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        let i0 = p * h * w + 2 * y * w + 2 * xx;
                        od[(p * h2 + y) * w2 + xx] = (xd[i0] + xd[i0 + 1] + xd[i0 + w] + xd[i0 + w + 1]) * q;
                    }
                }
            }
        }
        let shape = x.shape().to_vec();
        self.graph().record(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&shape);
            let gd = gx.data_mut();
            for p in 0..n * c {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        let v = g.data()[(p * h2 + y) * w2 + xx] * q;
                        let i0 = p * h * w + 2 * y * w + 2 * xx;
                        gd[i0] += v;
                        gd[i0 + 1] += v;
                        gd[i0 + w] += v;
                        gd[i0 + w + 1] += v;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// 2× bilinear upsampling (half-pixel centers, edge clamped).
    pub fn upsample_bilinear2(self) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let out = upsample2_forward(&x, n * c, h, w);
        self.graph().record(out, &[self], move |g, _| {
            vec![Some(upsample2_adjoint(g, n, c, h, w))]
        })
    }

    /// Concatenate along channels.
    pub fn concat_channels(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let (n, ca, h, w) = a.dims4();
        let (nb, cb, hb, wb) = b.dims4();
        assert!(n == nb && h == hb && w == wb, "concat_channels: {:?} vs {:?}", a.shape(), b.shape());
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, ca + cb, h, w]);
        {
            let od = out.data_mut();
            for s in 0..n {
                let o = s * (ca + cb) * hw;
                od[o..o + ca * hw].copy_from_slice(&a.data()[s * ca * hw..(s + 1) * ca * hw]);
                od[o + ca * hw..o + (ca + cb) * hw].copy_from_slice(&b.data()[s * cb * hw..(s + 1) * cb * hw]);
            }
        }
        self.graph().record(out, &[self, other], move |g, need| {
            let split = |first: bool| {
                let (cc, off) = if first { (ca, 0) } else { (cb, ca) };
                let mut t = Tensor::zeros(&[n, cc, h, w]);
                for s in 0..n {
                    let src = s * (ca + cb) * hw + off * hw;
                    t.data_mut()[s * cc * hw..(s + 1) * cc * hw].copy_from_slice(&g.data()[src..src + cc * hw]);
                }
                t
            };
            vec![need[0].then(|| split(true)), need[1].then(|| split(false))]
        })
    }

    /// Per-sample Gram matrices `F Fᵀ`: `[N,C,H,W] -> [N,C,C]`.
    pub fn gram(self) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let m = h * w;
        let mut out = Tensor::zeros(&[n, c, c]);
        for s in 0..n {
            let f = &x.data()[s * c * m..(s + 1) * c * m];
            gemm(c, m, c, T::one(), f, false, f, true, T::zero(), &mut out.data_mut()[s * c * c..(s + 1) * c * c]);
        }
        self.graph().record(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            let mut sym = vec![T::zero(); c * c];
            for s in 0..n {
                let gs = &g.data()[s * c * c..(s + 1) * c * c];
                for i in 0..c {
                    for j in 0..c {
                        sym[i * c + j] = gs[i * c + j] + gs[j * c + i];
                    }
                }
                let f = &x.data()[s * c * m..(s + 1) * c * m];
                gemm(c, c, m, T::one(), &sym, false, f, false, T::zero(), &mut gx.data_mut()[s * c * m..(s + 1) * c * m]);
            }
            vec![Some(gx)]
        })
    }

    /// Split into non-overlapping `t×t` tiles: `[N,C,H,W] -> [N·(H/t)·(W/t), C, t, t]`.
    pub fn tiles(self, t: usize) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert!(h % t == 0 && w % t == 0, "tiles: {h}×{w} not divisible by {t}");
        let (ty, tx) = (h / t, w / t);
        let map = move |src: &[T], dst: &mut [T], forward: bool| {
            for s in 0..n {
                for by in 0..ty {
                    for bx in 0..tx {
                        let tile = (s * ty + by) * tx + bx;
                        for ch in 0..c {
                            for y in 0..t {
                                let a = ((s * c + ch) * h + by * t + y) * w + bx * t;
                                let b = ((tile * c + ch) * t + y) * t;
                                if forward {
                                    dst[b..b + t].copy_from_slice(&src[a..a + t]);
                                } else {
                                    dst[a..a + t].copy_from_slice(&src[b..b + t]);
                                }
                            }
                        }
                    }
                }
            }
        };
        let mut out = Tensor::zeros(&[n * ty * tx, c, t, t]);
        map(x.data(), out.data_mut(), true);
        self.graph().record(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            map(g.data(), gx.data_mut(), false);
            vec![Some(gx)]
        })
    }

    /// Row means of a `[N, K]` tensor, giving `[N, 1]`.
    pub fn mean_rows(self) -> Var<'g, T> {
        let x = self.value();
        let n = x.shape()[0];
        let k = x.numel() / n;
        let inv = T::one() / T::from_usize(k).unwrap();
        let data = x.data().chunks(k).map(|r| r.iter().copied().sum::<T>() * inv).collect();
        let out = Tensor::from_vec(&[n, 1], data);
        let shape = x.shape().to_vec();
        self.graph().record(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&shape);
            for (row, &gv) in gx.data_mut().chunks_mut(k).zip(g.data()) {
                row.fill(gv * inv);
            }
            vec![Some(gx)]
        })
    }

    /// Normalize every spatial position's channel vector to unit length.
    pub fn unit_normalize_channels(self, eps: T) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut norms = vec![T::zero(); n * hw];
        for s in 0..n {
            for ch in 0..c {
                let plane = &x.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                for (acc, &v) in norms[s * hw..(s + 1) * hw].iter_mut().zip(plane) {
                    *acc += v * v;
                }
            }
        }
        norms.iter_mut().for_each(|v| *v = v.sqrt());
        let mut out = (*x).clone();
        for s in 0..n {
            for ch in 0..c {
                let plane = &mut out.data_mut()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                for (v, &nm) in plane.iter_mut().zip(&norms[s * hw..(s + 1) * hw]) {
                    *v /= nm + eps;
                }
            }
        }
        self.graph().record(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            let xd = x.data();
            let gd = g.data();
            for s in 0..n {
                for p in 0..hw {
                    let nm = norms[s * hw + p];
                    let d = nm + eps;
                    let mut dot = T::zero();
                    for ch in 0..c {
                        let i = (s * c + ch) * hw + p;
                        dot += gd[i] * xd[i];
                    }
                    let corr = if nm > T::zero() { dot / (d * d * nm) } else { T::zero() };
                    for ch in 0..c {
                        let i = (s * c + ch) * hw + p;
                        gx.data_mut()[i] = gd[i] / d - xd[i] * corr;
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// `Σ_c w[c] · x[:, c]`, giving `[N,1,H,W]`.
    pub fn weighted_channel_sum(self, weights: &[T]) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        assert_eq!(weights.len(), c, "weighted_channel_sum: {c} channels");
        let hw = h * w;
        let mut out = Tensor::zeros(&[n, 1, h, w]);
        for s in 0..n {
            for ch in 0..c {
                let wc = weights[ch];
                let plane = &x.data()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                for (o, &v) in out.data_mut()[s * hw..(s + 1) * hw].iter_mut().zip(plane) {
                    *o += wc * v;
                }
            }
        }
        let weights = weights.to_vec();
        self.graph().record(out, &[self], move |g, _| {
            let mut gx = Tensor::zeros(&[n, c, h, w]);
            for s in 0..n {
                for (ch, &wc) in weights.iter().enumerate() {
                    let dst = &mut gx.data_mut()[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                    for (d, &gv) in dst.iter_mut().zip(&g.data()[s * hw..(s + 1) * hw]) {
                        *d = gv * wc;
                    }
                }
            }
            vec![Some(gx)]
        })
    }
}

fn upsample2_forward<T: Real>(x: &Tensor<T>, planes: usize, h: usize, w: usize) -> Tensor<T> {
    let (a, b) = (T::lit(0.25), T::lit(0.75));
    let mut tmp = vec![T::zero(); planes * h * 2 * w];
    for (src, dst) in x.data().chunks(w).zip(tmp.chunks_mut(2 * w)) {
        for i in 0..w {
            let l = i.saturating_sub(1);
            let r = (i + 1).min(w - 1);
            dst[2 * i] = a * src[l] + b * src[i];
            dst[2 * i + 1] = b * src[i] + a * src[r];
        }
    }
    let w2 = 2 * w;
    let mut shape = x.shape().to_vec();
    let rank = shape.len();
    shape[rank - 2] = 2 * h;
    shape[rank - 1] = w2;
    let mut out = Tensor::zeros(&shape);
    for (src, dst) in tmp.chunks(h * w2).zip(out.data_mut().chunks_mut(4 * h * w)) {
        for i in 0..h {
            let l = i.saturating_sub(1);
            let r = (i + 1).min(h - 1);
            for x in 0..w2 {
                dst[2 * i * w2 + x] = a * src[l * w2 + x] + b * src[i * w2 + x];
                dst[(2 * i + 1) * w2 + x] = b * src[i * w2 + x] + a * src[r * w2 + x];
            }
        }
    }
    out
}

fn upsample2_adjoint<T: Real>(g: &Tensor<T>, n: usize, c: usize, h: usize, w: usize) -> Tensor<T> {
    let (a, b) = (T::lit(0.25), T::lit(0.75));
    let w2 = 2 * w;
    let mut tmp = vec![T::zero(); n * c * h * w2];
    for (src, dst) in g.data().chunks(4 * h * w).zip(tmp.chunks_mut(h * w2)) {
        for i in 0..h {
            let l = i.saturating_sub(1);
            let r = (i + 1).min(h - 1);
            for x in 0..w2 {
                let g0 = src[2 * i * w2 + x];
                let g1 = src[(2 * i + 1) * w2 + x];
                dst[l * w2 + x] += a * g0;
                dst[i * w2 + x] += b * (g0 + g1);
                dst[r * w2 + x] += a * g1;
            }
        }
    }
    let mut gx = Tensor::zeros(&[n, c, h, w]);
    for (src, dst) in tmp.chunks(w2).zip(gx.data_mut().chunks_mut(w)) {
        for i in 0..w {
            let l = i.saturating_sub(1);
            let r = (i + 1).min(w - 1);
            dst[l] += a * src[2 * i];
            dst[i] += b * (src[2 * i] + src[2 * i + 1]);
            dst[r] += a * src[2 * i + 1];
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::super::graph::Graph;
    use super::*;

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

    /// Central-difference check of d(Σ r ⊙ f(x))/dx on a handful of entries.
    fn check(f: impl for<'g> Fn(Var<'g, f64>) -> Var<'g, f64>, shape: &[usize]) {
        let x0 = pseudo(shape, 11);
        let g = Graph::new();
        let x = g.leaf(x0.clone());
        let y = f(x);
        let r = pseudo(&y.shape(), 12);
        let loss = y.mul(g.constant(r.clone())).sum();
        let grads = g.backward(loss);
        let gx = grads.get(x).unwrap().clone();
        let eval = |xv: Tensor<f64>| {
            let g = Graph::new();
            let y = f(g.constant(xv));
            y.value().data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let n = x0.numel();
        for i in (0..n).step_by((n / 7).max(1)) {
            let eps = 1e-6;
            let mut p = x0.clone();
            p.data_mut()[i] += eps;
            let mut m = x0.clone();
            m.data_mut()[i] -= eps;
            let fd = (eval(p) - eval(m)) / (2.0 * eps);
            assert!((fd - gx.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()), "entry {i}: fd {fd} vs {}", gx.data()[i]);
        }
    }

    #[test]
    fn upsample_gradient() {
        check(|x| x.upsample_bilinear2(), &[1, 2, 3, 4]);
    }

    #[test]
    fn upsample_matches_half_pixel_bilinear() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_vec(&[1, 1, 1, 3], vec![0.0, 1.0, 2.0]));
        let y = x.upsample_bilinear2().value();
        // row is replicated vertically; horizontally: 0, .25, .75, 1.25, 1.75, 2
        let expect = [0.0, 0.25, 0.75, 1.25, 1.75, 2.0];
        for r in 0..2 {
            for (i, e) in expect.iter().enumerate() {
                assert!((y.data()[r * 6 + i] - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pooling_gradients() {
        check(|x| x.avg_pool2(), &[2, 2, 4, 6]);
        check(|x| x.max_pool2(), &[2, 2, 4, 6]);
    }

    #[test]
    fn gram_and_normalization_gradients() {
        check(|x| x.gram(), &[2, 3, 3, 4]);
        check(|x| x.unit_normalize_channels(1e-10), &[2, 4, 3, 3]);
        check(|x| x.weighted_channel_sum(&[0.5, -1.0, 2.0]), &[2, 3, 2, 2]);
    }

    #[test]
    fn structural_op_gradients() {
        check(|x| x.tiles(2), &[2, 3, 4, 6]);
        check(|x| x.reshape(&[6, 8]).mean_rows(), &[2, 3, 2, 4]);
        check(|x| x.concat_channels(x.scale(2.0)), &[2, 3, 2, 2]);
        check(|x| x.channel_affine(&[2.0, -1.0], &[0.1, 0.2]).tanh().leaky_relu(0.2), &[2, 2, 3, 3]);
        check(|x| x.square().mul(x).add(x).sub(x.scale(0.5)), &[3, 4]);
    }

    #[test]
    fn linear_gradient() {
        let w = pseudo(&[3, 8], 21);
        let b = pseudo(&[3], 22);
        check(
            move |x| {
                let g = x.graph();
                x.linear(g.constant(w.clone()), Some(g.constant(b.clone())))
            },
            &[2, 2, 2, 2],
        );
    }
}

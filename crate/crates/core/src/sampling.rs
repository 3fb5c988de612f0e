//! Blue-noise sampling masks (void-and-cluster), sparse subsampling and
//! scattered-sample densification.

use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::imaging::{ImageBuf, ImagePatch, RangeTag};

/// Width of the Gaussian energy kernel used by void-and-cluster.
pub const VC_SIGMA: f64 = 1.5;

/// Binary sampling pattern with the rate and seed that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
    pub rate: f64,
    pub seed: u64,
}

impl SamplingMask {
    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>, seed: u64) -> Result<Self> {
        if bits.len() != height * width || bits.is_empty() {
            return Err(Error::shape(format!("{} mask bits for {height}×{width}", bits.len())));
        }
        let n = bits.iter().filter(|&&b| b).count();
        Ok(SamplingMask {
            height,
            width,
            bits,
            rate: n as f64 / (height * width) as f64,
            seed,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        SamplingMask {
            height,
            width,
            bits: vec![true; height * width],
            rate: 1.0,
            seed: 0,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Sample positions as `(y, x)`.
    pub fn positions(&self) -> Vec<(usize, usize)> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| (i / self.width, i % self.width))
            .collect()
    }

    /// Write as a 1-bit grayscale PNG with `rate` and `seed` text chunks.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let png_err = |e: png::EncodingError| Error::format("mask png", e.to_string());
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        enc.add_text_chunk("rate".into(), format!("{}", self.rate)).map_err(png_err)?;
        enc.add_text_chunk("seed".into(), self.seed.to_string()).map_err(png_err)?;
        let stride = self.width.div_ceil(8);
        let mut packed = vec![0u8; stride * self.height];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    packed[y * stride + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        let mut w = enc.write_header().map_err(png_err)?;
        w.write_image_data(&packed).map_err(png_err)?;
        w.finish().map_err(png_err)
    }

    /// Read a mask PNG. Any non-zero pixel is a sample. The rate is
    /// recomputed from the bits; the seed is taken from the text chunk when
    /// present.
    pub fn load_png(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let fmt = |e: png::DecodingError| Error::format("mask png", format!("{}: {e}", path.display()));
        let mut dec = png::Decoder::new(BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = dec.read_info().map_err(fmt)?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::format("mask png", "image too large"))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(fmt)?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = info.color_type.samples();
        let seed = reader
            .info()
            .uncompressed_latin1_text
            .iter()
            .find(|t| t.keyword == "seed")
            .and_then(|t| t.text.parse().ok())
            .unwrap_or(0);
        let mut bits = Vec::with_capacity(w * h);
        for y in 0..h {
            let row = &buf[y * info.line_size..];
            for x in 0..w {
                bits.push(row[x * channels] != 0);
            }
        }
        SamplingMask::from_bits(h, w, bits, seed)
    }
}

/// Void-and-cluster ordering of every pixel of an `h×w` torus. Thresholding
/// the ranks at `n` yields the `n`-sample blue-noise pattern.
#[derive(Debug, Clone, PartialEq)]
pub struct RankMatrix {
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    ranks: Vec<u32>,
}

/// Incremental Gaussian energy on a torus. The self-term is left out, which
/// does not change any argmax/argmin over equal-state pixels but keeps tiny
/// long-range contributions resolvable in floating point.
struct Energy {
    h: usize,
    w: usize,
    gy: Vec<(usize, f64)>,
    gx: Vec<(usize, f64)>,
    e: Vec<f64>,
}

impl Energy {
    fn new(h: usize, w: usize, sigma: f64) -> Self {
        // exp(-d²/2σ²) underflows f64 past this radius.
        let reach = (2.0 * sigma * sigma * 700.0).sqrt().ceil() as usize;
        let axis = |n: usize| -> Vec<(usize, f64)> {
            let offsets: Vec<isize> = if n <= 2 * reach + 1 {
                (0..n as isize).collect()
            } else {
                (-(reach as isize)..=reach as isize).collect()
            };
            offsets
                .into_iter()
                .map(|o| {
                    let r = o.rem_euclid(n as isize) as usize;
                    let d = r.min(n - r) as f64;
                    (r, (-d * d / (2.0 * sigma * sigma)).exp())
                })
                .collect()
        };
        Energy {
            h,
            w,
            gy: axis(h),
            gx: axis(w),
            e: vec![0.0; h * w],
        }
    }

    fn splat(&mut self, p: usize, sign: f64) {
        let (py, px) = (p / self.w, p % self.w);
        for &(dy, vy) in &self.gy {
            let y = (py + dy) % self.h;
            let row = &mut self.e[y * self.w..(y + 1) * self.w];
            let s = sign * vy;
            for &(dx, vx) in &self.gx {
                let x = px + dx;
                let x = if x >= self.w { x - self.w } else { x };
                row[x] += s * vx;
            }
        }
        // Drop the self-term added above.
        self.e[p] -= sign;
    }
}

impl RankMatrix {
    /// Full ordering of all pixels.
    pub fn compute(height: usize, width: usize, seed: u64) -> Result<Self> {
        RankMatrix::compute_upto(height, width, seed, height * width)
    }

    /// Ordering of the first `upto` ranks; pixels beyond get `u32::MAX`.
    /// The ranks that are assigned equal those of [`RankMatrix::compute`].
    pub fn compute_upto(height: usize, width: usize, seed: u64, upto: usize) -> Result<Self> {
        let n = height * width;
        if n == 0 {
            return Err(Error::invalid("mask must have at least one pixel"));
        }
        if n > u32::MAX as usize {
            return Err(Error::invalid("mask too large"));
        }
        let upto = upto.min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n0 = (n / 10).max(1);
        let mut bits = vec![false; n];
        let mut energy = Energy::new(height, width, VC_SIGMA);
        for p in rand::seq::index::sample(&mut rng, n, n0).into_iter() {
            bits[p] = true;
            energy.splat(p, 1.0);
        }

        // Relax the initial pattern by moving the tightest cluster into the
        // largest void until the two coincide.
        for _ in 0..n {
            let cluster = tightest_cluster(&energy.e, &bits);
            bits[cluster] = false;
            energy.splat(cluster, -1.0);
            let void = largest_void(&energy.e, &bits);
            bits[void] = true;
            energy.splat(void, 1.0);
            if void == cluster {
                break;
            }
        }

        let mut ranks = vec![u32::MAX; n];
        let proto_bits = bits.clone();
        let proto_energy = energy.e.clone();

        // Ranks below the prototype count: peel off clusters.
        let mut ones: Vec<usize> = (0..n).filter(|&p| bits[p]).collect();
        for r in (0..n0).rev() {
            let (k, &p) = ones
                .iter()
                .enumerate()
                .max_by(|a, b| energy.e[*a.1].total_cmp(&energy.e[*b.1]).then(b.1.cmp(a.1)))
                .expect("non-empty");
            ones.swap_remove(k);
            bits[p] = false;
            energy.splat(p, -1.0);
            if r < upto {
                ranks[p] = r as u32;
            }
        }

        // Ranks from the prototype upward: fill voids. Once ones are the
        // majority, the tightest cluster of zeros is the zero pixel of lowest
        // energy as well, so the same rule covers the dense half.
        bits = proto_bits;
        energy.e = proto_energy;
        for r in n0..upto {
            let p = largest_void(&energy.e, &bits);
            bits[p] = true;
            energy.splat(p, 1.0);
            ranks[p] = r as u32;
        }
        Ok(RankMatrix {
            height,
            width,
            seed,
            ranks,
        })
    }

    pub fn rank(&self, y: usize, x: usize) -> u32 {
        self.ranks[y * self.width + x]
    }

    /// Pattern of the `count` lowest ranks.
    pub fn threshold_count(&self, count: usize) -> Result<SamplingMask> {
        let n = self.height * self.width;
        if count > n {
            return Err(Error::invalid(format!("{count} samples requested from {n} pixels")));
        }
        let assigned = self.ranks.iter().filter(|&&r| r != u32::MAX).count();
        if count > assigned {
            return Err(Error::invalid(format!(
                "rank matrix only orders {assigned} pixels, {count} requested"
            )));
        }
        let bits: Vec<bool> = self.ranks.iter().map(|&r| (r as usize) < count).collect();
        let mut m = SamplingMask::from_bits(self.height, self.width, bits, self.seed)?;
        m.rate = count as f64 / n as f64;
        Ok(m)
    }

    pub fn threshold(&self, rate: f64) -> Result<SamplingMask> {
        check_rate(rate)?;
        let n = self.height * self.width;
        let mut m = self.threshold_count(sample_count(n, rate))?;
        m.rate = rate;
        Ok(m)
    }
}

fn tightest_cluster(e: &[f64], bits: &[bool]) -> usize {
    let mut best = usize::MAX;
    let mut best_e = f64::NEG_INFINITY;
    for (p, (&v, &b)) in e.iter().zip(bits).enumerate() {
        if b && v > best_e {
            best_e = v;
            best = p;
        }
    }
    best
}

fn largest_void(e: &[f64], bits: &[bool]) -> usize {
    let mut best = usize::MAX;
    let mut best_e = f64::INFINITY;
    for (p, (&v, &b)) in e.iter().zip(bits).enumerate() {
        if !b && v < best_e {
            best_e = v;
            best = p;
        }
    }
    best
}

fn check_rate(rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::invalid(format!("sampling rate must be in (0, 1], got {rate}")));
    }
    Ok(())
}

/// `round(rate · n)`.
pub fn sample_count(n: usize, rate: f64) -> usize {
    (rate * n as f64).round() as usize
}

/// Blue-noise mask with exactly `round(rate·H·W)` samples.
pub fn void_and_cluster_mask(height: usize, width: usize, rate: f64, seed: u64) -> Result<SamplingMask> {
    check_rate(rate)?;
    let count = sample_count(height * width, rate);
    let ranks = RankMatrix::compute_upto(height, width, seed, count)?;
    ranks.threshold(rate)
}

/// White-noise mask with the same sample count as `void_and_cluster_mask`.
pub fn uniform_random_mask(height: usize, width: usize, rate: f64, seed: u64) -> Result<SamplingMask> {
    check_rate(rate)?;
    let n = height * width;
    let count = sample_count(n, rate);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bits = vec![false; n];
    for p in rand::seq::index::sample(&mut rng, n, count).into_iter() {
        bits[p] = true;
    }
    let mut m = SamplingMask::from_bits(height, width, bits, seed)?;
    m.rate = rate;
    Ok(m)
}

/// Smallest pairwise distance between samples, measured on the torus.
pub fn min_sample_distance(mask: &SamplingMask) -> f64 {
    let pos = mask.positions();
    let (h, w) = (mask.height as f64, mask.width as f64);
    let mut best = f64::INFINITY;
    for i in 0..pos.len() {
        for j in i + 1..pos.len() {
            let dy = (pos[i].0 as f64 - pos[j].0 as f64).abs();
            let dx = (pos[i].1 as f64 - pos[j].1 as f64).abs();
            let (dy, dx) = (dy.min(h - dy), dx.min(w - dx));
            best = best.min(dy.hypot(dx));
        }
    }
    best
}

/// Radially averaged power spectrum of the zero-mean mask. Bin `k` averages
/// frequencies with `|f|` in `[k, k+1)` cycles per image width (square
/// masks); bin 0 is DC.
pub fn radial_power_spectrum(mask: &SamplingMask) -> Vec<f64> {
    let (h, w) = (mask.height, mask.width);
    let mean = mask.count() as f64 / (h * w) as f64;
    let mut data: Vec<Complex<f64>> = mask
        .bits
        .iter()
        .map(|&b| Complex::new(if b { 1.0 } else { 0.0 } - mean, 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    for row in data.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = data[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            data[y * w + x] = col[y];
        }
    }
    let nbins = h.min(w) / 2 + 1;
    let mut sum = vec![0.0; nbins];
    let mut cnt = vec![0usize; nbins];
    let norm = (h * w) as f64;
    for y in 0..h {
        let fy = if y <= h / 2 { y as f64 } else { y as f64 - h as f64 } * (w as f64 / h as f64);
        for x in 0..w {
            let fx = if x <= w / 2 { x as f64 } else { x as f64 - w as f64 };
            let k = fx.hypot(fy).floor() as usize;
            if k < nbins {
                sum[k] += data[y * w + x].norm_sqr() / norm;
                cnt[k] += 1;
            }
        }
    }
    sum.iter().zip(&cnt).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect()
}

/// Mean spectral power over the lowest octave of non-DC frequencies,
/// `0 < |f| ≤ 1/8` cycles per pixel.
pub fn low_frequency_energy(mask: &SamplingMask) -> f64 {
    let spec = radial_power_spectrum(mask);
    let top = (mask.width / 8).max(1).min(spec.len() - 1);
    spec[1..=top].iter().sum::<f64>() / top as f64
}

/// Dense image plus the mask of positions that carry values. Pixels outside
/// the mask are zero and meaningless.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseImage {
    pub values: ImageBuf,
    pub mask: SamplingMask,
}

/// Keep only the pixels selected by `mask`.
pub fn subsample(img: &ImagePatch, mask: &SamplingMask) -> Result<SparseImage> {
    let img = img.to_unit()?;
    if img.height() != mask.height || img.width() != mask.width {
        return Err(Error::shape(format!(
            "mask is {}×{}, image is {}×{}",
            mask.height,
            mask.width,
            img.height(),
            img.width()
        )));
    }
    let values = ImageBuf::from_fn(3, mask.height, mask.width, |c, y, x| {
        if mask.get(y, x) {
            img.get(c, y, x)
        } else {
            0.0
        }
    });
    Ok(SparseImage {
        values,
        mask: mask.clone(),
    })
}

/// Per-cell least-squares plane statistics.
#[derive(Clone, Copy, Default)]
struct Moments {
    n: f64,
    sx: f64,
    sy: f64,
    sxx: f64,
    sxy: f64,
    syy: f64,
    sv: [f64; 3],
    svx: [f64; 3],
    svy: [f64; 3],
}

impl Moments {
    fn add(&mut self, o: &Moments) {
        self.n += o.n;
        self.sx += o.sx;
        self.sy += o.sy;
        self.sxx += o.sxx;
        self.sxy += o.sxy;
        self.syy += o.syy;
        for c in 0..3 {
            self.sv[c] += o.sv[c];
            self.svx[c] += o.svx[c];
            self.svy[c] += o.svy[c];
        }
    }
}

/// Fitted plane `v = a + b·(x - cx) + c·(y - cy)` per channel.
#[derive(Clone, Copy)]
struct Plane {
    cx: f64,
    cy: f64,
    coef: [[f64; 3]; 3],
}

impl Plane {
    fn eval(&self, ch: usize, x: f64, y: f64) -> f64 {
        let k = self.coef[ch];
        k[0] + k[1] * (x - self.cx) + k[2] * (y - self.cy)
    }

    /// Least-squares plane, or `None` when the samples do not span two
    /// directions well enough to fix a slope at scale `scale`.
    fn fit(m: &Moments, scale: f64) -> Option<Plane> {
        if m.n < 3.0 {
            return None;
        }
        let (cx, cy) = (m.sx / m.n, m.sy / m.n);
        let vxx = m.sxx / m.n - cx * cx;
        let vyy = m.syy / m.n - cy * cy;
        let vxy = m.sxy / m.n - cx * cy;
        // Spread in both directions of at least a fraction of the cell size.
        let s2 = (0.25 * scale).powi(2);
        if vxx * vyy - vxy * vxy < s2 * s2 || vxx < s2 || vyy < s2 {
            return None;
        }
        let a = Matrix3::new(
            m.n, 0.0, 0.0,
            0.0, m.n * vxx, m.n * vxy,
            0.0, m.n * vxy, m.n * vyy,
        );
        let inv = a.try_inverse()?;
        let mut coef = [[0.0; 3]; 3];
        for c in 0..3 {
            let r = Vector3::new(
                m.sv[c],
                m.svx[c] - cx * m.sv[c],
                m.svy[c] - cy * m.sv[c],
            );
            let k = inv * r;
            coef[c] = [k[0], k[1], k[2]];
        }
        Some(Plane { cx, cy, coef })
    }

    fn constant(m: &Moments) -> Plane {
        let mut coef = [[0.0; 3]; 3];
        for c in 0..3 {
            coef[c][0] = m.sv[c] / m.n;
        }
        Plane { cx: 0.0, cy: 0.0, coef }
    }
}

/// Fill the holes of a sparse image.
///
/// A multi-scale local plane fit: at every scale `s = 2^l` each cell fits a
/// least-squares plane to the samples in its 3×3 cell neighbourhood; each
/// pixel blends the planes of its four nearest cell centers bilinearly,
/// taking the finest scale at which all four fits are well posed. Linear
/// ramps are reproduced exactly. The result is clamped to the per-channel
/// sample range and the samples are written back unchanged.
pub fn densify(sparse: &SparseImage) -> Result<ImagePatch> {
    let mask = &sparse.mask;
    let (h, w) = (mask.height, mask.width);
    if sparse.values.dims() != (3, h, w) {
        return Err(Error::shape("sparse values do not match the mask"));
    }
    let samples = mask.positions();
    if samples.len() < 3 {
        return Err(Error::invalid(format!(
            "densification needs at least 3 samples, mask has {}",
            samples.len()
        )));
    }

    let mut lo = [f32::INFINITY; 3];
    let mut hi = [f32::NEG_INFINITY; 3];
    for &(y, x) in &samples {
        for c in 0..3 {
            let v = sparse.values.get(c, y, x);
            lo[c] = lo[c].min(v);
            hi[c] = hi[c].max(v);
        }
    }

    let mut out = ImageBuf::zeros(3, h, w);
    let mut done = vec![false; h * w];
    for &(y, x) in &samples {
        done[y * w + x] = true;
    }
    let mut remaining = h * w - samples.len();

    let mut level = 1u32;
    while remaining > 0 {
        let s = 1usize << level;
        let (gh, gw) = (h.div_ceil(s), w.div_ceil(s));
        let top = gh == 1 && gw == 1;

        let mut cells = vec![Moments::default(); gh * gw];
        for &(y, x) in &samples {
            let m = &mut cells[(y / s) * gw + x / s];
            let (fx, fy) = (x as f64, y as f64);
            m.n += 1.0;
            m.sx += fx;
            m.sy += fy;
            m.sxx += fx * fx;
            m.sxy += fx * fy;
            m.syy += fy * fy;
            for c in 0..3 {
                let v = sparse.values.get(c, y, x) as f64;
                m.sv[c] += v;
                m.svx[c] += v * fx;
                m.svy[c] += v * fy;
            }
        }
        let mut planes: Vec<Option<Plane>> = Vec::with_capacity(gh * gw);
        for cy in 0..gh {
            for cx in 0..gw {
                let mut m = Moments::default();
                for ny in cy.saturating_sub(1)..(cy + 2).min(gh) {
                    for nx in cx.saturating_sub(1)..(cx + 2).min(gw) {
                        m.add(&cells[ny * gw + nx]);
                    }
                }
                let fit = Plane::fit(&m, s as f64);
                planes.push(if top { fit.or(Some(Plane::constant(&m))) } else { fit });
            }
        }

        for y in 0..h {
            let fy = ((y as f64 + 0.5) / s as f64 - 0.5).max(0.0);
            let y0 = (fy.floor() as usize).min(gh - 1);
            let y1 = (y0 + 1).min(gh - 1);
            let ty = (fy - y0 as f64).clamp(0.0, 1.0);
            for x in 0..w {
                if done[y * w + x] {
                    continue;
                }
                let fx = ((x as f64 + 0.5) / s as f64 - 0.5).max(0.0);
                let x0 = (fx.floor() as usize).min(gw - 1);
                let x1 = (x0 + 1).min(gw - 1);
                let tx = (fx - x0 as f64).clamp(0.0, 1.0);
                let corners = [
                    (planes[y0 * gw + x0], (1.0 - ty) * (1.0 - tx)),
                    (planes[y0 * gw + x1], (1.0 - ty) * tx),
                    (planes[y1 * gw + x0], ty * (1.0 - tx)),
                    (planes[y1 * gw + x1], ty * tx),
                ];
                if corners.iter().any(|(p, _)| p.is_none()) {
                    continue;
                }
                for c in 0..3 {
                    let v: f64 = corners
                        .iter()
                        .map(|(p, wt)| wt * p.unwrap().eval(c, x as f64, y as f64))
                        .sum();
                    out.set(c, y, x, (v as f32).clamp(lo[c], hi[c]));
                }
                done[y * w + x] = true;
                remaining -= 1;
            }
        }
        if top {
            debug_assert_eq!(remaining, 0);
            break;
        }
        level += 1;
    }

    for &(y, x) in &samples {
        for c in 0..3 {
            out.set(c, y, x, sparse.values.get(c, y, x));
        }
    }
    ImagePatch::new(out, RangeTag::Unit)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn popcount_matches_rate() {
        let m = void_and_cluster_mask(256, 256, 0.12, 7).unwrap();
        assert_eq!(m.count(), 7864);
        let full = void_and_cluster_mask(16, 16, 1.0, 1).unwrap();
        assert!(full.bits().iter().all(|&b| b));
        assert!(void_and_cluster_mask(16, 16, 0.0, 1).is_err());
        assert!(void_and_cluster_mask(16, 16, 1.5, 1).is_err());
    }

    #[test]
    fn deterministic_and_nested() {
        let a = void_and_cluster_mask(48, 40, 0.2, 3).unwrap();
        let b = void_and_cluster_mask(48, 40, 0.2, 3).unwrap();
        assert_eq!(a, b);
        let c = void_and_cluster_mask(48, 40, 0.2, 4).unwrap();
        assert_ne!(a.bits(), c.bits());

        let full = RankMatrix::compute(48, 40, 3).unwrap();
        let mut ranks: Vec<u32> = (0..48).flat_map(|y| (0..40).map(move |x| (y, x))).map(|(y, x)| full.rank(y, x)).collect();
        ranks.sort_unstable();
        assert!(ranks.iter().enumerate().all(|(i, &r)| r as usize == i));
        assert_eq!(full.threshold(0.2).unwrap(), a);
        let lo = full.threshold(0.05).unwrap();
        assert!(lo.bits().iter().zip(a.bits()).all(|(&l, &h)| !l || h));
    }

    #[test]
    fn sparse_masks_are_spread_out() {
        let (mut vc, mut rnd) = (0.0, 0.0);
        for seed in 0..20 {
            vc += min_sample_distance(&void_and_cluster_mask(128, 128, 0.007, seed).unwrap());
            rnd += min_sample_distance(&uniform_random_mask(128, 128, 0.007, 1000 + seed).unwrap());
        }
        assert!(vc > rnd, "void-and-cluster {vc} vs random {rnd}");
    }

    #[test]
    fn mask_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = void_and_cluster_mask(21, 19, 0.3, 11).unwrap();
        let p = dir.path().join("m.png");
        m.save_png(&p).unwrap();
        let back = SamplingMask::load_png(&p).unwrap();
        assert_eq!(back.bits(), m.bits());
        assert_eq!(back.seed, 11);
        assert_eq!(back.count(), m.count());
    }

    fn ramp(h: usize, w: usize) -> ImagePatch {
        ImagePatch::new(
            ImageBuf::from_fn(3, h, w, |c, y, x| {
                (0.1 + 0.6 * x as f32 / w as f32 + 0.25 * y as f32 / h as f32) * (1.0 - 0.2 * c as f32)
            }),
            RangeTag::Unit,
        )
        .unwrap()
    }

    #[test]
    fn densify_reproduces_ramp() {
        let img = ramp(64, 64);
        let mask = void_and_cluster_mask(64, 64, 0.12, 2).unwrap();
        let out = densify(&subsample(&img, &mask).unwrap()).unwrap();
        let mut worst = 0.0f32;
        for c in 0..3 {
            for y in 4..60 {
                for x in 4..60 {
                    worst = worst.max((out.get(c, y, x) - img.get(c, y, x)).abs());
                }
            }
        }
        assert!(worst < 2.0 / 255.0, "{worst}");
    }

    #[test]
    fn densify_contract() {
        let img = ramp(32, 32);
        let full = SamplingMask::full(32, 32);
        assert_eq!(densify(&subsample(&img, &full).unwrap()).unwrap(), img);

        let flat = ImagePatch::filled(32, 32, 0.42).unwrap();
        let mask = void_and_cluster_mask(32, 32, 0.05, 1).unwrap();
        let out = densify(&subsample(&flat, &mask).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.42).abs() < 1e-6));

        let mut bits = vec![false; 32 * 32];
        bits[5] = true;
        bits[700] = true;
        let two = SamplingMask::from_bits(32, 32, bits, 0).unwrap();
        assert!(densify(&subsample(&img, &two).unwrap()).is_err());
        assert!(subsample(&img, &SamplingMask::full(16, 32)).is_err());
    }

    #[test]
    fn densify_with_collinear_samples_falls_back() {
        let img = ramp(32, 32);
        let mut bits = vec![false; 32 * 32];
        for x in [3, 10, 20] {
            bits[7 * 32 + x] = true;
        }
        let m = SamplingMask::from_bits(32, 32, bits, 0).unwrap();
        let out = densify(&subsample(&img, &m).unwrap()).unwrap();
        for &(y, x) in &m.positions() {
            assert_eq!(out.get(0, y, x), img.get(0, y, x));
        }
    }
}

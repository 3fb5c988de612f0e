//! UNet generator and PatchGAN-style critic.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{he_normal, Bound, Graph, ParamId, ParamStore, Real, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub encoder_filters: Vec<usize>,
    pub decoder_filters: Vec<usize>,
    pub conv_kernel: usize,
    pub leaky_slope: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            encoder_filters: vec![16, 32, 64, 128, 128],
            decoder_filters: vec![128, 64, 32, 16],
            conv_kernel: 5,
            leaky_slope: LEAKY_SLOPE,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.encoder_filters.len();
        if n < 2 || self.decoder_filters.len() != n - 1 {
            return Err(Error::invalid(format!(
                "generator needs k encoder blocks and k-1 decoder blocks, got {} and {}",
                n,
                self.decoder_filters.len()
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::invalid("generator kernel must be odd"));
        }
        if self.encoder_filters.iter().chain(&self.decoder_filters).any(|&f| f == 0) {
            return Err(Error::invalid("filter counts must be positive"));
        }
        Ok(())
    }

    /// Input sides must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.encoder_filters.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticSpec {
    pub patch_size: usize,
    pub block_filters: Vec<usize>,
    pub conv_kernel: usize,
    pub leaky_slope: f64,
}

impl Default for CriticSpec {
    fn default() -> Self {
        CriticSpec {
            patch_size: 64,
            block_filters: vec![16, 32, 64, 128, 128],
            conv_kernel: 5,
            leaky_slope: LEAKY_SLOPE,
        }
    }
}

impl CriticSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.block_filters.len();
        if k == 0 || self.patch_size == 0 || self.patch_size % (1 << k) != 0 {
            return Err(Error::invalid(format!(
                "critic patch size {} must be a positive multiple of 2^{k}",
                self.patch_size
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::invalid("critic kernel must be odd"));
        }
        Ok(())
    }

    /// Flattened feature length fed to the final linear layer.
    pub fn head_features(&self) -> usize {
        let side = self.patch_size >> self.block_filters.len();
        self.block_filters.last().copied().unwrap_or(0) * side * side
    }
}

/// Two k×k convolutions with LeakyReLU plus a 1×1 projection shortcut.
#[derive(Debug, Clone, Copy)]
struct ResBlock {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ws: ParamId,
    bs: ParamId,
}

impl ResBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let mut conv = |suffix: &str, ci: usize, co: usize, kk: usize| {
            let w = store.add(format!("{name}.{suffix}.weight"), he_normal(rng, &[co, ci, kk, kk], ci * kk * kk));
            let b = store.add(format!("{name}.{suffix}.bias"), Tensor::zeros(&[co]));
            (w, b)
        };
        let (w1, b1) = conv("conv1", cin, cout, k);
        let (w2, b2) = conv("conv2", cout, cout, k);
        let (ws, bs) = conv("skip", cin, cout, 1);
        ResBlock { w1, b1, w2, b2, ws, bs }
    }

    fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, x: Var<'g, T>, slope: T) -> Var<'g, T> {
        let main = x
            .conv2d(p.var(self.w1), Some(p.var(self.b1)))
            .leaky_relu(slope)
            .conv2d(p.var(self.w2), Some(p.var(self.b2)))
            .leaky_relu(slope);
        let skip = x.conv2d(p.var(self.ws), Some(p.var(self.bs)));
        main.add(skip)
    }

    /// Forward pass plus its directional derivative along `v`.
    fn forward_tangent<'g, T: Real>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        v: Var<'g, T>,
        slope: T,
    ) -> (Var<'g, T>, Var<'g, T>) {
        let a1 = x.conv2d(p.var(self.w1), Some(p.var(self.b1)));
        let t1 = v.conv2d(p.var(self.w1), None).leaky_relu_tangent(a1, slope);
        let h1 = a1.leaky_relu(slope);
        let a2 = h1.conv2d(p.var(self.w2), Some(p.var(self.b2)));
        let t2 = t1.conv2d(p.var(self.w2), None).leaky_relu_tangent(a2, slope);
        let h2 = a2.leaky_relu(slope);
        let skip = x.conv2d(p.var(self.ws), Some(p.var(self.bs)));
        let tskip = v.conv2d(p.var(self.ws), None);
        (h2.add(skip), t2.add(tskip))
    }
}

/// Residual UNet mapping a signed-range RGB image to a signed-range RGB image.
#[derive(Debug, Clone)]
pub struct Generator<T: Real> {
    pub spec: GeneratorSpec,
    pub params: ParamStore<T>,
    encoder: Vec<ResBlock>,
    decoder: Vec<ResBlock>,
    out_w: ParamId,
    out_b: ParamId,
}

impl<T: Real> Generator<T> {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let k = spec.conv_kernel;
        let mut encoder = Vec::new();
        let mut cin = 3;
        for (i, &f) in spec.encoder_filters.iter().enumerate() {
            encoder.push(ResBlock::new(&mut params, &mut rng, &format!("enc{i}"), cin, f, k));
            cin = f;
        }
        let mut decoder = Vec::new();
        let n = spec.encoder_filters.len();
        for (j, &f) in spec.decoder_filters.iter().enumerate() {
            let skip = spec.encoder_filters[n - 2 - j];
            decoder.push(ResBlock::new(&mut params, &mut rng, &format!("dec{j}"), cin + skip, f, k));
            cin = f;
        }
        let out_w = params.add("out.weight", he_normal(&mut rng, &[3, cin + 3, k, k], (cin + 3) * k * k));
        let out_b = params.add("out.bias", Tensor::zeros(&[3]));
        Ok(Generator {
            spec,
            params,
            encoder,
            decoder,
            out_w,
            out_b,
        })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.spec.size_multiple();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape(format!("generator input must be [N,3,H,W], got {shape:?}")));
        }
        if shape[2] % m != 0 || shape[3] % m != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::shape(format!(
                "generator input {}×{} must be a multiple of {m}",
                shape[2], shape[3]
            )));
        }
        Ok(())
    }

    /// Forward pass on bound parameters.
    pub fn forward<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let slope = T::lit(self.spec.leaky_slope);
        let mut skips = Vec::new();
        let mut h = x;
        for b in &self.encoder {
            let f = b.forward(p, h, slope).avg_pool2();
            skips.push(f);
            h = f;
        }
        // The deepest encoder output feeds the bridge, not a skip.
        skips.pop();
        h = h.upsample_bilinear2();
        for b in &self.decoder {
            let s = skips.pop().expect("one skip per decoder block");
            h = b.forward(p, h.concat_channels(s), slope).upsample_bilinear2();
        }
        h.concat_channels(x)
            .conv2d(p.var(self.out_w), Some(p.var(self.out_b)))
            .tanh()
    }

    /// Inference without gradients.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x.shape())?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let xv = g.constant(x.clone());
        Ok((*self.forward(&p, xv).value()).clone())
    }
}

/// Scores 64×64 tiles and averages them per image.
#[derive(Debug, Clone)]
pub struct Critic<T: Real> {
    pub spec: CriticSpec,
    pub params: ParamStore<T>,
    blocks: Vec<ResBlock>,
    fc_w: ParamId,
    fc_b: ParamId,
}

impl<T: Real> Critic<T> {
    pub fn new(spec: CriticSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut blocks = Vec::new();
        let mut cin = 3;
        for (i, &f) in spec.block_filters.iter().enumerate() {
            blocks.push(ResBlock::new(&mut params, &mut rng, &format!("block{i}"), cin, f, spec.conv_kernel));
            cin = f;
        }
        let feat = spec.head_features();
        let fc_w = params.add("fc.weight", he_normal(&mut rng, &[1, feat], feat).scale(T::lit(0.5)));
        let fc_b = params.add("fc.bias", Tensor::zeros(&[1]));
        Ok(Critic {
            spec,
            params,
            blocks,
            fc_w,
            fc_b,
        })
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let t = self.spec.patch_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] % t != 0 || shape[3] % t != 0 || shape[2] == 0 || shape[3] == 0 {
            return Err(Error::shape(format!(
                "critic input {shape:?} does not split into {t}×{t} RGB tiles"
            )));
        }
        Ok(())
    }

    /// One score per tile: `[N·T, 1]`.
    pub fn tile_scores<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let slope = T::lit(self.spec.leaky_slope);
        let mut h = x.tiles(self.spec.patch_size);
        for b in &self.blocks {
            h = b.forward(p, h, slope).avg_pool2();
        }
        let n = h.shape()[0];
        h.reshape(&[n, self.spec.head_features()])
            .linear(p.var(self.fc_w), Some(p.var(self.fc_b)))
    }

    /// Mean tile score per image: `[N, 1]`.
    pub fn forward<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let n = x.shape()[0];
        let scores = self.tile_scores(p, x);
        let per = scores.shape()[0] / n;
        scores.reshape(&[n, per]).mean_rows()
    }

    /// Scores `[N,1]` and their directional derivatives `⟨∇ₓD, v⟩` `[N,1]`.
    pub fn forward_tangent<'g>(&self, p: &Bound<'g, T>, x: Var<'g, T>, v: Var<'g, T>) -> (Var<'g, T>, Var<'g, T>) {
        let slope = T::lit(self.spec.leaky_slope);
        let n = x.shape()[0];
        let t = self.spec.patch_size;
        let (mut h, mut dh) = (x.tiles(t), v.tiles(t));
        for b in &self.blocks {
            let (a, da) = b.forward_tangent(p, h, dh, slope);
            h = a.avg_pool2();
            dh = da.avg_pool2();
        }
        let m = h.shape()[0];
        let f = self.spec.head_features();
        let s = h.reshape(&[m, f]).linear(p.var(self.fc_w), Some(p.var(self.fc_b)));
        let ds = dh.reshape(&[m, f]).linear(p.var(self.fc_w), None);
        let per = m / n;
        (s.reshape(&[n, per]).mean_rows(), ds.reshape(&[n, per]).mean_rows())
    }

    /// Scores without gradients.
    pub fn score(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        self.check_input(x.shape())?;
        let g = Graph::new();
        let p = self.params.bind(&g, false);
        let v = self.forward(&p, g.constant(x.clone()));
        Ok(v.value().data().iter().map(|s| s.to_f64_lossy()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_shapes_and_range() {
        let gen = Generator::<f32>::new(GeneratorSpec::default(), 1).unwrap();
        let x = Tensor::zeros(&[1, 3, 64, 64]);
        let y = gen.infer(&x).unwrap();
        assert_eq!(y.shape(), &[1, 3, 64, 64]);
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
        assert_eq!(gen.infer(&x).unwrap(), y);
        assert!(gen.infer(&Tensor::zeros(&[1, 3, 48, 64])).is_err());
        assert!(gen.infer(&Tensor::zeros(&[1, 4, 64, 64])).is_err());
    }

    #[test]
    fn critic_tiles_and_averages() {
        let critic = Critic::<f64>::new(CriticSpec::default(), 2).unwrap();
        let mut data = vec![0.0; 3 * 128 * 64];
        for (i, v) in data.iter_mut().enumerate() {
            *v = ((i * 7919) % 201) as f64 / 100.0 - 1.0;
        }
        let x = Tensor::from_vec(&[1, 3, 128, 64], data.clone());
        let s = critic.score(&x).unwrap();
        assert_eq!(s.len(), 1);
        // Swap the two tiles.
        let half = 64 * 64;
        let mut swapped = data.clone();
        for c in 0..3 {
            let base = c * 2 * half;
            swapped[base..base + half].copy_from_slice(&data[base + half..base + 2 * half]);
            swapped[base + half..base + 2 * half].copy_from_slice(&data[base..base + half]);
        }
        let s2 = critic.score(&Tensor::from_vec(&[1, 3, 128, 64], swapped)).unwrap();
        assert!((s[0] - s2[0]).abs() < 1e-12);
        let tile = |k: usize| -> Tensor<f64> {
            let d = (0..3).flat_map(|c| data[c * 2 * half + k * half..c * 2 * half + (k + 1) * half].to_vec()).collect();
            Tensor::from_vec(&[1, 3, 64, 64], d)
        };
        let t0 = critic.score(&tile(0)).unwrap();
        let t1 = critic.score(&tile(1)).unwrap();
        assert!((s[0] - 0.5 * (t0[0] + t1[0])).abs() < 1e-12);
        assert!(critic.score(&Tensor::zeros(&[1, 3, 96, 64])).is_err());
    }
}

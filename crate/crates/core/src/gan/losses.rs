//! Critic and generator objectives.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Lpips, Vgg19};
use crate::imaging::pyramid::{decompose_plane, decompose_plane_adjoint, level_sizes, validate_levels};
use crate::imaging::ImagePatch;
use crate::nn::{Graph, Real, Tensor, Var};

use super::nets::Critic;

/// Anything that maps an `[N,3,H,W]` batch to `[N,1]` scores.
pub trait CriticFn<T: Real> {
    fn scores<'g>(&self, x: Var<'g, T>) -> Var<'g, T>;
}

impl<T: Real> CriticFn<T> for Critic<T> {
    fn scores<'g>(&self, x: Var<'g, T>) -> Var<'g, T> {
        let p = self.params.bind(x.graph(), false);
        self.forward(&p, x)
    }
}

/// `mean D(target) − mean D(fake)`; the critic maximizes it.
pub fn critic_loss(d_target: &[f64], d_fake: &[f64]) -> f64 {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    mean(d_target) - mean(d_fake)
}

/// Per-sample `x̂ = ε·target + (1−ε)·fake`, `ε ~ U(0,1)`.
pub fn interpolates<T: Real>(target: &Tensor<T>, fake: &Tensor<T>, rng: &mut impl Rng) -> Result<Tensor<T>> {
    if target.shape() != fake.shape() {
        return Err(Error::shape(format!("target {:?} vs fake {:?}", target.shape(), fake.shape())));
    }
    let n = target.shape()[0];
    let per = target.numel() / n;
    let u = Uniform::new(0.0, 1.0).expect("valid range");
    let mut out = fake.clone();
    for s in 0..n {
        let e = T::lit(u.sample(rng));
        for i in s * per..(s + 1) * per {
            let (t, f) = (target.data()[i], fake.data()[i]);
            out.data_mut()[i] = e * t + (T::one() - e) * f;
        }
    }
    Ok(out)
}

/// `∇_x D(x)` per sample and the per-sample L2 norms.
pub fn input_gradients<T: Real>(critic: &impl CriticFn<T>, x: &Tensor<T>) -> (Tensor<T>, Vec<f64>) {
    let g = Graph::new();
    let xv = g.leaf(x.clone());
    let s = critic.scores(xv);
    let mut grads = g.backward(s.sum());
    let gx = grads.take_or_zeros(xv);
    let n = x.shape()[0];
    let per = x.numel() / n;
    let norms = gx
        .data()
        .chunks(per)
        .map(|c| c.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>().sqrt())
        .collect();
    (gx, norms)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyStats {
    /// `gp_weight · mean (‖∇D(x̂)‖ − 1)²`
    pub penalty: f64,
    /// Mean `‖∇D(x̂)‖`.
    pub mean_norm: f64,
}

pub fn penalty_from_norms(norms: &[f64], gp_weight: f64) -> PenaltyStats {
    let n = norms.len().max(1) as f64;
    PenaltyStats {
        penalty: gp_weight * norms.iter().map(|g| (g - 1.0).powi(2)).sum::<f64>() / n,
        mean_norm: norms.iter().sum::<f64>() / n,
    }
}

/// Gradient penalty at random interpolates between `target` and `fake`.
pub fn gradient_penalty<T: Real>(
    critic: &impl CriticFn<T>,
    target: &Tensor<T>,
    fake: &Tensor<T>,
    gp_weight: f64,
    rng: &mut impl Rng,
) -> Result<PenaltyStats> {
    let xhat = interpolates(target, fake, rng)?;
    let (_, norms) = input_gradients(critic, &xhat);
    Ok(penalty_from_norms(&norms, gp_weight))
}

/// `w_l ∝ exp(−(l − peak)²/(2σ²))`, normalized to sum 1.
pub fn gaussian_level_weights(peak_level: usize, sigma: f64, n_levels: usize) -> Result<Vec<f64>> {
    if peak_level >= n_levels {
        return Err(Error::invalid(format!("peak level {peak_level} outside {n_levels} levels")));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("level-weight sigma must be positive"));
    }
    let raw: Vec<f64> = (0..n_levels)
        .map(|l| {
            let d = l as f64 - peak_level as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / s).collect())
}

/// Differentiable `Σ_l w_l · MSE(band_l(recon), band_l(target))` on unit-range
/// `[N,C,H,W]` batches; the residual counts as the last level.
pub fn laplacian_loss_var<'g, T: Real>(recon: Var<'g, T>, target: &Tensor<T>, weights: &[f64]) -> Result<Var<'g, T>> {
    let x = recon.value();
    if x.shape() != target.shape() {
        return Err(Error::shape(format!("recon {:?} vs target {:?}", x.shape(), target.shape())));
    }
    let (n, c, h, w) = x.dims4();
    let levels = weights.len();
    validate_levels(h, w, levels)?;
    let sizes = level_sizes(h, w, levels);
    let counts: Vec<f64> = sizes.iter().map(|&(a, b)| (n * c * a * b) as f64).collect();
    let hw = h * w;
    let mut diffs: Vec<(Vec<Vec<T>>, Vec<T>)> = Vec::with_capacity(n * c);
    let mut loss = 0.0f64;
    for p in 0..n * c {
        let (rb, rr) = decompose_plane(&x.data()[p * hw..(p + 1) * hw], h, w, levels);
        let (tb, tr) = decompose_plane(&target.data()[p * hw..(p + 1) * hw], h, w, levels);
        let db: Vec<Vec<T>> = rb.iter().zip(&tb).map(|(a, b)| a.iter().zip(b).map(|(&u, &v)| u - v).collect()).collect();
        let dr: Vec<T> = rr.iter().zip(&tr).map(|(&u, &v)| u - v).collect();
        for (l, d) in db.iter().chain(std::iter::once(&dr)).enumerate() {
            loss += weights[l] * d.iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>() / counts[l];
        }
        diffs.push((db, dr));
    }
    let weights = weights.to_vec();
    let out = Tensor::from_vec(&[1], vec![T::lit(loss)]);
    Ok(recon.graph().record(out, &[recon], move |g, _| {
        let go = g.data()[0];
        let scale: Vec<T> = weights.iter().zip(&counts).map(|(wl, cnt)| T::lit(2.0 * wl / cnt) * go).collect();
        let mut gx = Tensor::zeros(&[n, c, h, w]);
        for (p, (db, dr)) in diffs.iter().enumerate() {
            let gb: Vec<Vec<T>> = db.iter().enumerate().map(|(l, d)| d.iter().map(|&v| v * scale[l]).collect()).collect();
            let gr: Vec<T> = dr.iter().map(|&v| v * scale[levels - 1]).collect();
            let back = decompose_plane_adjoint(&gb, &gr, h, w);
            gx.data_mut()[p * hw..(p + 1) * hw].copy_from_slice(&back);
        }
        vec![Some(gx)]
    }))
}

/// Laplacian loss between two images.
pub fn laplacian_loss(recon: &ImagePatch, target: &ImagePatch, level_weights: &[f64]) -> Result<f64> {
    if !recon.same_dims(target) {
        return Err(Error::shape("laplacian loss on images of different sizes"));
    }
    let g = Graph::<f64>::new();
    let r = g.constant(recon.to_unit()?.to_tensor());
    Ok(laplacian_loss_var(r, &target.to_unit()?.to_tensor(), level_weights)?.item())
}

/// Reconstruction term of a generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconLoss {
    L2,
    Lpips,
    #[serde(rename = "lapl")]
    Laplacian,
}

/// What the critic treats as real.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Adversary {
    /// Natural images.
    Standard,
    /// Imperceptibly distorted images (plus pristine ones, by mix ratio).
    Ours,
}

/// One of the six generator objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LossVariant {
    pub recon: ReconLoss,
    pub adversary: Adversary,
}

impl LossVariant {
    pub fn all() -> [LossVariant; 6] {
        let mut out = [LossVariant {
            recon: ReconLoss::L2,
            adversary: Adversary::Standard,
        }; 6];
        let mut i = 0;
        for recon in [ReconLoss::L2, ReconLoss::Lpips, ReconLoss::Laplacian] {
            for adversary in [Adversary::Standard, Adversary::Ours] {
                out[i] = LossVariant { recon, adversary };
                i += 1;
            }
        }
        out
    }

    pub fn name(&self) -> String {
        let r = match self.recon {
            ReconLoss::L2 => "l2",
            ReconLoss::Lpips => "lpips",
            ReconLoss::Laplacian => "lapl",
        };
        let a = match self.adversary {
            Adversary::Standard => "adv",
            Adversary::Ours => "adv*",
        };
        format!("{r}+{a}")
    }
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (r, a) = s.split_once('+').unwrap_or((s, "adv*"));
        let recon = match r {
            "l2" => ReconLoss::L2,
            "lpips" => ReconLoss::Lpips,
            "lapl" | "laplacian" => ReconLoss::Laplacian,
            other => return Err(Error::invalid(format!("unknown reconstruction loss {other:?}"))),
        };
        let adversary = match a {
            "adv" | "standard" => Adversary::Standard,
            "adv*" | "ours" => Adversary::Ours,
            other => return Err(Error::invalid(format!("unknown adversarial mode {other:?}"))),
        };
        Ok(LossVariant { recon, adversary })
    }
}

impl TryFrom<String> for LossVariant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<LossVariant> for String {
    fn from(v: LossVariant) -> String {
        v.name()
    }
}

impl std::fmt::Display for LossVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

/// Term weights of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_l2: f64,
    pub w_lpips: f64,
    pub w_lapl: f64,
    pub w_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_l2: 2000.0,
            w_lpips: 100.0,
            w_lapl: 100.0,
            w_adv: 1.0,
        }
    }
}

/// Everything a reconstruction term may need besides the images.
pub struct ReconContext<'a, T: Real> {
    pub weights: LossWeights,
    /// Backbone for the perceptual term.
    pub vgg: Option<&'a Vgg19<T>>,
    pub lpips: Lpips,
    /// Laplacian level weights (length = pyramid levels).
    pub level_weights: Vec<f64>,
}

/// Weighted reconstruction term on unit-range batches.
pub fn recon_term_var<'g, T: Real>(
    variant: LossVariant,
    ctx: &ReconContext<'_, T>,
    recon_unit: Var<'g, T>,
    target_unit: &Tensor<T>,
) -> Result<Var<'g, T>> {
    let g = recon_unit.graph();
    Ok(match variant.recon {
        ReconLoss::L2 => {
            let t = g.constant(target_unit.clone());
            recon_unit.mse(t).scale(T::lit(ctx.weights.w_l2))
        }
        ReconLoss::Lpips => {
            let vgg = ctx
                .vgg
                .ok_or_else(|| Error::invalid("perceptual loss needs a backbone"))?;
            let t = g.constant(target_unit.clone());
            ctx.lpips.distance_var(vgg, recon_unit, t).scale(T::lit(ctx.weights.w_lpips))
        }
        ReconLoss::Laplacian => {
            laplacian_loss_var(recon_unit, target_unit, &ctx.level_weights)?.scale(T::lit(ctx.weights.w_lapl))
        }
    })
}

/// Values of the generator objective's terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    /// Weighted reconstruction term.
    pub recon: f64,
    /// Weighted adversarial term, `−w_adv · D(G(z))`.
    pub adv: f64,
    pub total: f64,
}

/// Generator objective for one reconstruction and its critic score.
pub fn generator_loss<T: Real>(
    variant: LossVariant,
    ctx: &ReconContext<'_, T>,
    recon: &ImagePatch,
    target: &ImagePatch,
    critic_score: f64,
) -> Result<LossTerms> {
    if !recon.same_dims(target) {
        return Err(Error::shape("generator loss on images of different sizes"));
    }
    let g = Graph::<T>::new();
    let r = g.constant(recon.to_unit()?.to_tensor());
    let rec = recon_term_var(variant, ctx, r, &target.to_unit()?.to_tensor())?.item().to_f64_lossy();
    let adv = -ctx.weights.w_adv * critic_score;
    Ok(LossTerms {
        recon: rec,
        adv,
        total: rec + adv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::pyramid::{build_pyramid_buf, collapse_pyramid_buf};
    use crate::imaging::{ImageBuf, RangeTag};
    use rand::SeedableRng;

    struct Linear(Vec<f64>);
    impl CriticFn<f64> for Linear {
        fn scores<'g>(&self, x: Var<'g, f64>) -> Var<'g, f64> {
            let n = x.shape()[0];
            let k = self.0.len();
            let w = x.graph().constant(Tensor::from_vec(&[1, k], self.0.clone()));
            x.reshape(&[n, k]).linear(w, None)
        }
    }

    #[test]
    fn critic_loss_arithmetic() {
        assert_eq!(critic_loss(&[3.0], &[1.0]), 2.0);
        assert_eq!(critic_loss(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        let t = [1.0, 2.0, 6.0];
        let f = [0.0, 1.0, -1.0];
        let per: f64 = t.iter().zip(&f).map(|(a, b)| a - b).sum::<f64>() / 3.0;
        assert!((critic_loss(&t, &f) - per).abs() < 1e-15);
    }

    #[test]
    fn penalty_endpoints() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let k = 3 * 4 * 4;
        let a = Tensor::from_vec(&[2, 3, 4, 4], (0..2 * k).map(|i| (i % 5) as f64 * 0.1).collect());
        let b = Tensor::from_vec(&[2, 3, 4, 4], (0..2 * k).map(|i| (i % 3) as f64 * -0.2).collect());
        let mut unit = vec![0.0; k];
        unit[0] = 0.6;
        unit[5] = 0.8;
        let p = gradient_penalty(&Linear(unit), &a, &b, 10.0, &mut rng).unwrap();
        assert!(p.penalty.abs() < 1e-20);
        let z = gradient_penalty(&Linear(vec![0.0; k]), &a, &b, 10.0, &mut rng).unwrap();
        assert!((z.penalty - 10.0).abs() < 1e-12);
    }

    #[test]
    fn penalty_norms_match_finite_differences() {
        let critic = Critic::<f64>::new(
            super::super::nets::CriticSpec {
                patch_size: 8,
                block_filters: vec![4, 4],
                conv_kernel: 3,
                leaky_slope: 0.2,
            },
            3,
        )
        .unwrap();
        let x = Tensor::from_vec(&[1, 3, 8, 8], (0..192).map(|i| ((i * 37) % 23) as f64 / 11.0 - 1.0).collect());
        let (g, norms) = input_gradients(&critic, &x);
        let f = |t: &Tensor<f64>| critic.score(t).unwrap()[0];
        let h = 1e-6;
        let mut fd_sq = 0.0;
        for i in 0..192 {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let d = (f(&p) - f(&m)) / (2.0 * h);
            fd_sq += d * d;
            assert!((d - g.data()[i]).abs() < 1e-6 * (1.0 + d.abs()));
        }
        assert!((fd_sq.sqrt() - norms[0]).abs() / norms[0] < 1e-2);
    }

    #[test]
    fn level_weights() {
        let w = gaussian_level_weights(0, 1.0, 5).unwrap();
        let raw = [1.0, (-0.5f64).exp(), (-2.0f64).exp(), (-4.5f64).exp(), (-8.0f64).exp()];
        let s: f64 = raw.iter().sum();
        for (a, b) in w.iter().zip(raw) {
            assert!((a - b / s).abs() < 1e-15);
        }
        assert!((w[0] - 0.570).abs() < 1e-3 && (w[1] - 0.346).abs() < 1e-3);
        let flat = gaussian_level_weights(2, 1e6, 5).unwrap();
        assert!(flat.iter().all(|v| (v - 0.2).abs() < 1e-6));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(gaussian_level_weights(5, 1.0, 5).is_err());
    }

    fn patch(seed: usize) -> ImagePatch {
        ImagePatch::new(
            ImageBuf::from_fn(3, 32, 32, |c, y, x| 0.1 + 0.7 * (((c + seed) * 131 + y * 17 + x * 29 + x * y) % 97) as f32 / 96.0),
            RangeTag::Unit,
        )
        .unwrap()
    }

    #[test]
    fn laplacian_loss_oracle() {
        let a = patch(1);
        let b = patch(2);
        let w = gaussian_level_weights(3, 1.0, 4).unwrap();
        assert_eq!(laplacian_loss(&a, &a, &w).unwrap(), 0.0);
        let pa = build_pyramid_buf(a.buf(), 4).unwrap();
        let pb = build_pyramid_buf(b.buf(), 4).unwrap();
        let mut expect = 0.0f64;
        for l in 0..4 {
            let (x, y) = (pa.level(l), pb.level(l));
            let mut s = 0.0f64;
            for i in 0..x.data().len() {
                s += (x.data()[i] as f64 - y.data()[i] as f64).powi(2);
            }
            expect += w[l] * s / x.data().len() as f64;
        }
        let got = laplacian_loss(&a, &b, &w).unwrap();
        assert!((got - expect).abs() < 1e-9 * expect.max(1.0), "{got} vs {expect}");

        // Differ only in the residual: only the coarsest term survives.
        let mut pc = pa.clone();
        pc.residual.data_mut().iter_mut().for_each(|v| *v += 0.05);
        let c = ImagePatch::from_clamped(collapse_pyramid_buf(&pc).unwrap()).unwrap();
        let fine = gaussian_level_weights(0, 1.0, 4).unwrap();
        let l = laplacian_loss(&a, &c, &fine).unwrap();
        let only_res = fine[3] * 0.05f64.powi(2);
        assert!((l - only_res).abs() < 0.05 * only_res, "{l} vs {only_res}");
    }

    #[test]
    fn laplacian_gradient_matches_finite_differences() {
        let g = Graph::<f64>::new();
        let a = patch(3).to_tensor::<f64>();
        let b = patch(4).to_tensor::<f64>();
        let w = vec![0.4, 0.3, 0.2, 0.1];
        let x = g.leaf(a.clone());
        let loss = laplacian_loss_var(x, &b, &w).unwrap();
        let grad = g.backward(loss).take_or_zeros(x);
        let f = |t: &Tensor<f64>| {
            let g2 = Graph::<f64>::new();
            laplacian_loss_var(g2.constant(t.clone()), &b, &w).unwrap().item()
        };
        for i in [0usize, 77, 500, 1023, 2048, 3071] {
            let mut p = a.clone();
            p.data_mut()[i] += 1e-5;
            let mut m = a.clone();
            m.data_mut()[i] -= 1e-5;
            let fd = (f(&p) - f(&m)) / 2e-5;
            assert!((fd - grad.data()[i]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", grad.data()[i]);
        }
    }

    #[test]
    fn variant_parsing() {
        assert_eq!(LossVariant::all().len(), 6);
        for v in LossVariant::all() {
            assert_eq!(v.name().parse::<LossVariant>().unwrap(), v);
        }
        assert!("l3+adv".parse::<LossVariant>().is_err());
    }
}

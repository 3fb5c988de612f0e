//! WGAN-GP training loop, checkpoints and inference.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{Lpips, Vgg19};
use crate::imaging::filter::reflect_index;
use crate::imaging::{ImageBuf, ImagePatch, RangeTag};
use crate::nn::{read_safetensors, Adam, AdamConfig, Graph, ParamStore, Real, Tensor};
use crate::util::{stream_seed, write_atomic};

use super::losses::{
    gaussian_level_weights, input_gradients, interpolates, penalty_from_norms, recon_term_var, Adversary, CriticFn,
    LossVariant, LossWeights, ReconContext, ReconLoss,
};
use super::nets::{Critic, CriticSpec, Generator, GeneratorSpec};

/// Pyramid level of the "H" (first) Laplacian peak.
pub const PEAK_H: usize = 0;
/// Pyramid level of the "M" (fourth) Laplacian peak.
pub const PEAK_M: usize = 3;

/// Parse a peak letter (`H` or `M`) into a pyramid level.
pub fn peak_level(c: char) -> Result<usize> {
    match c.to_ascii_uppercase() {
        'H' => Ok(PEAK_H),
        'M' => Ok(PEAK_M),
        other => Err(Error::invalid(format!("unknown Laplacian peak {other:?}, expected H or M"))),
    }
}

/// Parse a `(near, far)` peak pair such as `"HM"`.
pub fn peak_pair(s: &str) -> Result<(usize, usize)> {
    let cs: Vec<char> = s.chars().collect();
    if cs.len() != 2 {
        return Err(Error::invalid(format!("peak pair must be two letters, got {s:?}")));
    }
    Ok((peak_level(cs[0])?, peak_level(cs[1])?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub variant: LossVariant,
    pub weights: LossWeights,
    pub gp_weight: f64,
    /// Critic updates per generator update.
    pub n_critic: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Optional cap on generator steps.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub lapl_peak: usize,
    pub lapl_levels: usize,
    pub lapl_sigma: f64,
    /// Generator steps per moving-average window.
    pub plateau_window: usize,
    pub plateau_tol: f64,
    /// Fraction of critic "real" samples drawn from pristine images in `ours` mode.
    pub pristine_mix: f64,
    /// Samples per forward pass.
    pub chunk: usize,
    pub generator: GeneratorSpec,
    pub critic: CriticSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig {
                lr: 2e-5,
                beta1: 0.5,
                beta2: 0.999,
                eps: 1e-8,
            },
            variant: LossVariant {
                recon: ReconLoss::L2,
                adversary: Adversary::Ours,
            },
            weights: LossWeights::default(),
            gp_weight: 10.0,
            n_critic: 5,
            batch_size: 16,
            max_epochs: 20,
            max_steps: None,
            seed: 0,
            lapl_peak: PEAK_H,
            lapl_levels: 5,
            lapl_sigma: 1.0,
            plateau_window: 200,
            plateau_tol: 1e-3,
            pristine_mix: 0.5,
            chunk: 4,
            generator: GeneratorSpec::default(),
            critic: CriticSpec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.critic.validate()?;
        let a = &self.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::invalid(format!("bad optimizer settings {a:?}")));
        }
        if self.n_critic == 0 || self.batch_size == 0 || self.chunk == 0 || self.plateau_window == 0 {
            return Err(Error::invalid("n_critic, batch_size, chunk and plateau_window must be positive"));
        }
        if !(self.gp_weight >= 0.0) {
            return Err(Error::invalid("gp_weight must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.pristine_mix) {
            return Err(Error::invalid(format!("pristine_mix {} outside [0, 1]", self.pristine_mix)));
        }
        gaussian_level_weights(self.lapl_peak, self.lapl_sigma, self.lapl_levels)?;
        Ok(())
    }

    fn level_weights(&self) -> Vec<f64> {
        gaussian_level_weights(self.lapl_peak, self.lapl_sigma, self.lapl_levels).expect("validated")
    }
}

/// In-memory training corpus.
#[derive(Debug, Clone)]
pub struct TrainData {
    /// Densified generator inputs.
    pub inputs: Vec<ImagePatch>,
    /// Ground truth for each input.
    pub targets: Vec<ImagePatch>,
    /// Imperceptibly distorted images (critic reals in `ours` mode).
    pub distorted: Vec<ImagePatch>,
    /// Natural images shown to the critic; the targets are used when empty.
    pub pristine: Vec<ImagePatch>,
}

struct Prepared {
    inputs: Vec<Tensor<f32>>,
    targets_unit: Vec<Tensor<f32>>,
    pristine: Vec<Tensor<f32>>,
    distorted: Vec<Tensor<f32>>,
}

impl TrainData {
    pub fn validate(&self, cfg: &TrainConfig) -> Result<()> {
        if self.inputs.is_empty() || self.inputs.len() != self.targets.len() {
            return Err(Error::invalid(format!(
                "need matching non-empty inputs/targets, got {} and {}",
                self.inputs.len(),
                self.targets.len()
            )));
        }
        if cfg.variant.adversary == Adversary::Ours && self.distorted.is_empty() && cfg.pristine_mix < 1.0 {
            return Err(Error::invalid("the distorted-manifold critic needs distorted images"));
        }
        let first = &self.inputs[0];
        let m = cfg.generator.size_multiple();
        let t = cfg.critic.patch_size;
        let (h, w) = (first.height(), first.width());
        if h % m != 0 || w % m != 0 || h % t != 0 || w % t != 0 {
            return Err(Error::shape(format!(
                "training patches {h}×{w} must be multiples of {m} (generator) and {t} (critic)"
            )));
        }
        for p in self.inputs.iter().chain(&self.targets).chain(&self.distorted).chain(&self.pristine) {
            if !p.same_dims(first) {
                return Err(Error::shape("all training patches must share one size"));
            }
        }
        Ok(())
    }

    fn prepare(&self) -> Result<Prepared> {
        let signed = |v: &[ImagePatch]| -> Result<Vec<Tensor<f32>>> {
            v.iter().map(|p| Ok(p.to_signed()?.to_tensor())).collect()
        };
        Ok(Prepared {
            inputs: signed(&self.inputs)?,
            pristine: if self.pristine.is_empty() {
                signed(&self.targets)?
            } else {
                signed(&self.pristine)?
            },
            targets_unit: self
                .targets
                .iter()
                .map(|p| Ok(p.to_unit()?.to_tensor()))
                .collect::<Result<_>>()?,
            distorted: signed(&self.distorted)?,
        })
    }
}

/// One row of the loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    /// `mean D(real) − mean D(fake)` at the last critic update.
    pub critic_loss: f64,
    pub gen_loss: f64,
    pub gp: f64,
    pub recon_term: f64,
    /// L2 norm of the generator gradient.
    pub grad_norm: f64,
    /// Mean interpolate gradient norm at the last critic update.
    pub gp_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxSteps,
    MaxEpochs,
    Plateau,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct State {
    config: TrainConfig,
    step: usize,
    gen_adam_steps: u64,
    critic_adam_steps: u64,
    stop: Option<StopReason>,
}

/// Critic-step statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticStats {
    pub critic_loss: f64,
    pub gp: f64,
    pub mean_norm: f64,
}

/// Parameter gradients of `−(mean D(real) − mean D(fake)) + GP` for one
/// critic update.
///
/// The penalty's parameter gradient needs `∂‖∇ₓD(x̂)‖/∂θ = ∂⟨∇ₓD(x̂), ĝ⟩/∂θ`
/// with `ĝ` the unit input gradient held fixed. The directional derivative
/// `⟨∇ₓD, ĝ⟩` comes from a tangent pass through the critic, which is an
/// ordinary differentiable graph, so one backward pass gives the exact
/// gradient.
pub fn critic_gradients<T: Real>(
    critic: &Critic<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    gp_weight: f64,
    chunk: usize,
    rng: &mut impl Rng,
) -> Result<(Vec<Tensor<T>>, CriticStats)> {
    let xhat = interpolates(real, fake, rng)?;
    penalty_and_wasserstein_gradients(critic, real, fake, &xhat, gp_weight, chunk)
}

fn penalty_and_wasserstein_gradients<T: Real>(
    critic: &Critic<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
    xhat: &Tensor<T>,
    gp_weight: f64,
    chunk: usize,
) -> Result<(Vec<Tensor<T>>, CriticStats)> {
    critic.check_input(real.shape())?;
    if real.shape() != fake.shape() || real.shape() != xhat.shape() {
        return Err(Error::shape("critic batches must share one shape"));
    }
    let n = real.shape()[0];
    let mut grads: Vec<Tensor<T>> = critic.params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut accumulate = |p: &crate::nn::Bound<'_, T>, gr: &mut crate::nn::Gradients<T>| {
        for (acc, gi) in grads.iter_mut().zip(p.grads(gr)) {
            acc.add_assign(&gi);
        }
    };

    let both: Vec<Tensor<T>> = (0..n).map(|s| real.sample(s)).chain((0..n).map(|s| fake.sample(s))).collect();
    let signs: Vec<f64> = (0..2 * n).map(|j| if j < n { -1.0 } else { 1.0 } / n as f64).collect();
    let mut scores = Vec::with_capacity(2 * n);
    for (xs, ws) in both.chunks(chunk).zip(signs.chunks(chunk)) {
        let g = Graph::new();
        let p = critic.params.bind(&g, true);
        let d = critic.forward(&p, g.constant(Tensor::stack(xs)));
        scores.extend(d.value().data().iter().map(|v| v.to_f64_lossy()));
        let w = g.constant(Tensor::from_vec(&[xs.len(), 1], ws.iter().map(|&v| T::lit(v)).collect()));
        let mut gr = g.backward(d.mul(w).sum());
        accumulate(&p, &mut gr);
    }

    let mut norms = Vec::with_capacity(n);
    let mut dirs = Vec::with_capacity(n);
    for s in 0..n {
        let (gx, nn) = input_gradients(critic, &xhat.sample(s));
        let inv = if nn[0] > 1e-12 { T::lit(1.0 / nn[0]) } else { T::zero() };
        dirs.push(gx.scale(inv));
        norms.push(nn[0]);
    }
    if gp_weight > 0.0 {
        let coef: Vec<f64> = norms.iter().map(|&g| 2.0 * gp_weight / n as f64 * (g - 1.0)).collect();
        for (start, ws) in (0..n).step_by(chunk).zip(coef.chunks(chunk)) {
            let m = ws.len();
            let g = Graph::new();
            let p = critic.params.bind(&g, true);
            let x = g.constant(Tensor::stack(&(start..start + m).map(|s| xhat.sample(s)).collect::<Vec<_>>()));
            let v = g.constant(Tensor::stack(&dirs[start..start + m]));
            let (_, ds) = critic.forward_tangent(&p, x, v);
            let w = g.constant(Tensor::from_vec(&[m, 1], ws.iter().map(|&c| T::lit(c)).collect()));
            let mut gr = g.backward(ds.mul(w).sum());
            accumulate(&p, &mut gr);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let ps = penalty_from_norms(&norms, gp_weight);
    Ok((
        grads,
        CriticStats {
            critic_loss: mean(&scores[..n]) - mean(&scores[n..]),
            gp: ps.penalty,
            mean_norm: ps.mean_norm,
        },
    ))
}

fn grads_norm<T: Real>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|v| v.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt()
}

fn all_finite<T: Real>(grads: &[Tensor<T>]) -> bool {
    grads.iter().all(|t| t.is_finite())
}

/// Generator/critic pair plus optimizer state.
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Generator<f32>,
    pub critic: Critic<f32>,
    gen_opt: Adam<f32>,
    critic_opt: Adam<f32>,
    step: usize,
    history: Vec<HistoryRow>,
    stop: Option<StopReason>,
    data: Prepared,
    vgg: Option<Vgg19<f32>>,
    lpips: Lpips,
}

/// Outcome of [`Trainer::run`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    pub stop: StopReason,
    pub final_row: Option<HistoryRow>,
}

impl Trainer {
    pub fn new(config: TrainConfig, data: &TrainData) -> Result<Self> {
        config.validate()?;
        data.validate(&config)?;
        let generator = Generator::new(config.generator.clone(), stream_seed(config.seed, &[1]))?;
        let critic = Critic::new(config.critic.clone(), stream_seed(config.seed, &[2]))?;
        let vgg = match config.variant.recon {
            ReconLoss::Lpips => Some(Vgg19::from_env_or_surrogate(config.seed)?),
            _ => None,
        };
        Ok(Trainer {
            gen_opt: Adam::new(config.adam),
            critic_opt: Adam::new(config.adam),
            generator,
            critic,
            step: 0,
            history: Vec::new(),
            stop: None,
            data: data.prepare()?,
            vgg,
            lpips: Lpips::bundled(),
            config,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[HistoryRow] {
        &self.history
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.data.inputs.len().div_ceil(self.config.batch_size)
    }

    pub fn epoch(&self) -> usize {
        self.step / self.steps_per_epoch()
    }

    fn epoch_batch(&self, step: usize) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, pos) = (step / spe, step % spe);
        let mut perm: Vec<usize> = (0..self.data.inputs.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, &[3, epoch as u64])));
        let bs = self.config.batch_size;
        perm[pos * bs..((pos + 1) * bs).min(perm.len())].to_vec()
    }

    fn real_batch(&self, rng: &mut ChaCha8Rng, n: usize) -> Tensor<f32> {
        let d = &self.data;
        let parts: Vec<Tensor<f32>> = (0..n)
            .map(|_| {
                let pristine = match self.config.variant.adversary {
                    Adversary::Standard => true,
                    Adversary::Ours => d.distorted.is_empty() || rng.random::<f64>() < self.config.pristine_mix,
                };
                if pristine {
                    d.pristine[rng.random_range(0..d.pristine.len())].clone()
                } else {
                    d.distorted[rng.random_range(0..d.distorted.len())].clone()
                }
            })
            .collect();
        Tensor::stack(&parts)
    }

    fn generate(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let parts = idx
            .chunks(self.config.chunk)
            .map(|c| {
                let x = Tensor::stack(&c.iter().map(|&i| self.data.inputs[i].clone()).collect::<Vec<_>>());
                self.generator.infer(&x)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&parts))
    }

    fn critic_update(&mut self, k: usize) -> Result<CriticStats> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, &[4, self.step as u64, k as u64]));
        let n = self.config.batch_size.min(self.data.inputs.len());
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..self.data.inputs.len())).collect();
        let fake = self.generate(&idx)?;
        let real = self.real_batch(&mut rng, n);
        let c = &self.config;
        let (grads, stats) = critic_gradients(&self.critic, &real, &fake, c.gp_weight, c.chunk, &mut rng)?;
        if !all_finite(&grads) || !stats.critic_loss.is_finite() || !stats.gp.is_finite() {
            return Err(Error::NonFinite(format!("critic update at step {}", self.step)));
        }
        self.critic_opt.step(self.critic.params.values_mut(), &grads);
        Ok(stats)
    }

    fn recon_context(&self) -> ReconContext<'_, f32> {
        ReconContext {
            weights: self.config.weights,
            vgg: self.vgg.as_ref(),
            lpips: self.lpips.clone(),
            level_weights: self.config.level_weights(),
        }
    }

    /// Generator gradients on a batch: `(grads, recon, total)`.
    fn generator_gradients(&self, idx: &[usize]) -> Result<(Vec<Tensor<f32>>, f64, f64)> {
        let ctx = self.recon_context();
        let w_adv = self.config.weights.w_adv;
        let mut grads: Vec<Tensor<f32>> = self
            .generator
            .params
            .values()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let (mut recon, mut total) = (0.0, 0.0);
        for c in idx.chunks(self.config.chunk) {
            let frac = c.len() as f64 / idx.len() as f64;
            let g = Graph::new();
            let p = self.generator.params.bind(&g, true);
            let x = g.constant(Tensor::stack(&c.iter().map(|&i| self.data.inputs[i].clone()).collect::<Vec<_>>()));
            let t = Tensor::stack(&c.iter().map(|&i| self.data.targets_unit[i].clone()).collect::<Vec<_>>());
            let out = self.generator.forward(&p, x);
            let unit = out.scale(0.5).add_scalar(0.5);
            let rec = recon_term_var(self.config.variant, &ctx, unit, &t)?;
            let mut loss = rec;
            if w_adv != 0.0 {
                let score = self.critic.scores(out).mean();
                loss = loss.add(score.scale(-w_adv as f32));
            }
            recon += frac * rec.item().to_f64_lossy();
            total += frac * loss.item().to_f64_lossy();
            let mut gr = g.backward(loss.scale(frac as f32));
            for (acc, gi) in grads.iter_mut().zip(p.grads(&mut gr)) {
                acc.add_assign(&gi);
            }
        }
        Ok((grads, recon, total))
    }

    /// `n_critic` critic updates followed by one generator update.
    pub fn train_step(&mut self) -> Result<HistoryRow> {
        let mut stats = CriticStats {
            critic_loss: 0.0,
            gp: 0.0,
            mean_norm: 0.0,
        };
        for k in 0..self.config.n_critic {
            stats = self.critic_update(k)?;
        }
        let idx = self.epoch_batch(self.step);
        let (grads, recon, total) = self.generator_gradients(&idx)?;
        if !all_finite(&grads) || !total.is_finite() {
            return Err(Error::NonFinite(format!("generator update at step {}", self.step)));
        }
        let row = HistoryRow {
            step: self.step,
            critic_loss: stats.critic_loss,
            gen_loss: total,
            gp: stats.gp,
            recon_term: recon,
            grad_norm: grads_norm(&grads),
            gp_norm: stats.mean_norm,
        };
        self.gen_opt.step(self.generator.params.values_mut(), &grads);
        if !self.generator.params.is_finite() || !self.critic.params.is_finite() {
            return Err(Error::NonFinite(format!("parameters after step {}", self.step)));
        }
        self.history.push(row);
        self.step += 1;
        Ok(row)
    }

    fn plateaued(&self) -> bool {
        let w = self.config.plateau_window;
        let n = self.history.len();
        if n < 2 * w || n % w != 0 {
            return false;
        }
        let mean = |r: &[HistoryRow]| r.iter().map(|h| h.gen_loss).sum::<f64>() / r.len() as f64;
        let prev = mean(&self.history[n - 2 * w..n - w]);
        let last = mean(&self.history[n - w..]);
        (last - prev).abs() <= self.config.plateau_tol * prev.abs().max(f64::MIN_POSITIVE)
    }

    /// Train until a stop condition, checkpointing each epoch. On a
    /// non-finite value the last finite state is checkpointed before the
    /// error is returned.
    pub fn run(&mut self, checkpoint_dir: Option<&Path>) -> Result<TrainSummary> {
        let spe = self.steps_per_epoch();
        let stop = loop {
            if let Some(s) = self.stop {
                break s;
            }
            if self.config.max_steps.is_some_and(|m| self.step >= m) {
                break StopReason::MaxSteps;
            }
            if self.epoch() >= self.config.max_epochs {
                break StopReason::MaxEpochs;
            }
            let saved = (self.generator.params.clone(), self.critic.params.clone(), self.gen_opt.clone(), self.critic_opt.clone());
            match self.train_step() {
                Ok(row) => {
                    if row.step % 50 == 0 {
                        info!(
                            "step {} gen {:.5} recon {:.5} critic {:.4} gp {:.4} |∇x̂D| {:.3}",
                            row.step, row.gen_loss, row.recon_term, row.critic_loss, row.gp, row.gp_norm
                        );
                    }
                }
                Err(e @ Error::NonFinite(_)) => {
                    warn!("training diverged: {e}");
                    self.generator.params = saved.0;
                    self.critic.params = saved.1;
                    self.gen_opt = saved.2;
                    self.critic_opt = saved.3;
                    if let Some(dir) = checkpoint_dir {
                        self.save_checkpoint(dir)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            }
            if self.plateaued() {
                self.stop = Some(StopReason::Plateau);
            }
            if self.step % spe == 0 {
                if let Some(dir) = checkpoint_dir {
                    self.save_checkpoint(dir)?;
                }
            }
        };
        self.stop = Some(stop);
        if let Some(dir) = checkpoint_dir {
            self.save_checkpoint(dir)?;
        }
        Ok(TrainSummary {
            steps: self.step,
            epochs: self.epoch(),
            stop,
            final_row: self.history.last().copied(),
        })
    }

    /// Mean squared error of unit-range reconstructions over the training set.
    pub fn training_mse(&self) -> Result<f64> {
        let idx: Vec<usize> = (0..self.data.inputs.len()).collect();
        let fake = self.generate(&idx)?;
        let mut se = 0.0;
        for (i, t) in self.data.targets_unit.iter().enumerate() {
            let f = fake.sample(i);
            se += f
                .data()
                .iter()
                .zip(t.data())
                .map(|(&a, &b)| (0.5 * a as f64 + 0.5 - b as f64).powi(2))
                .sum::<f64>();
        }
        Ok(se / fake.numel() as f64)
    }

    /// Mean `‖∇D(x̂)‖` over interpolates of every training pair with its
    /// reconstruction.
    pub fn interpolate_gradient_norm(&self, seed: u64) -> Result<f64> {
        let idx: Vec<usize> = (0..self.data.inputs.len()).collect();
        let fake = self.generate(&idx)?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, &[5]));
        let real = self.real_batch(&mut rng, idx.len());
        let xhat = interpolates(&real, &fake, &mut rng)?;
        let mut total = 0.0;
        for s in 0..idx.len() {
            total += input_gradients(&self.critic, &xhat.sample(s)).1[0];
        }
        Ok(total / idx.len() as f64)
    }

    /// Write generator, critic, optimizer state, config and history.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.generator.params.save(&dir.join(GENERATOR_FILE))?;
        self.critic.params.save(&dir.join(CRITIC_FILE))?;
        let gs = self.gen_opt.state(self.generator.params.names());
        write_atomic(&dir.join(GEN_OPT_FILE), &gs.to_safetensors()?)?;
        let cs = self.critic_opt.state(self.critic.params.names());
        write_atomic(&dir.join(CRITIC_OPT_FILE), &cs.to_safetensors()?)?;
        write_atomic(&dir.join(HISTORY_FILE), &history_csv(&self.history)?)?;
        let state = State {
            config: self.config.clone(),
            step: self.step,
            gen_adam_steps: self.gen_opt.steps_taken(),
            critic_adam_steps: self.critic_opt.steps_taken(),
            stop: self.stop,
        };
        let json = serde_json::to_vec_pretty(&state).map_err(|e| Error::format("checkpoint state", e.to_string()))?;
        write_atomic(&dir.join(STATE_FILE), &json)
    }

    /// Continue a checkpointed run on the same data.
    pub fn resume(dir: &Path, data: &TrainData) -> Result<Self> {
        let state = read_state(dir)?;
        let mut t = Trainer::new(state.config.clone(), data)?;
        t.generator.params.load(&dir.join(GENERATOR_FILE))?;
        t.critic.params.load(&dir.join(CRITIC_FILE))?;
        let read = |f: &str| -> Result<_> {
            let p = dir.join(f);
            read_safetensors::<f32>(&fs::read(&p).map_err(|e| Error::io(&p, e))?)
        };
        t.gen_opt = Adam::restore(state.config.adam, state.gen_adam_steps, &read(GEN_OPT_FILE)?, t.generator.params.names())?;
        t.critic_opt = Adam::restore(state.config.adam, state.critic_adam_steps, &read(CRITIC_OPT_FILE)?, t.critic.params.names())?;
        t.history = read_history(&dir.join(HISTORY_FILE))?;
        if t.history.len() != state.step {
            return Err(Error::format(
                "checkpoint",
                format!("history has {} rows for step {}", t.history.len(), state.step),
            ));
        }
        t.step = state.step;
        t.stop = state.stop;
        Ok(t)
    }
}

pub const GENERATOR_FILE: &str = "generator.safetensors";
pub const CRITIC_FILE: &str = "critic.safetensors";
pub const GEN_OPT_FILE: &str = "optimizer_generator.safetensors";
pub const CRITIC_OPT_FILE: &str = "optimizer_critic.safetensors";
pub const STATE_FILE: &str = "state.json";
pub const HISTORY_FILE: &str = "loss_history.csv";

fn read_state(dir: &Path) -> Result<State> {
    let p = dir.join(STATE_FILE);
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format("checkpoint state", e.to_string()))
}

fn history_csv(rows: &[HistoryRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::format("loss history", e.to_string()))?;
    }
    if rows.is_empty() {
        w.write_record(["step", "critic_loss", "gen_loss", "gp", "recon_term", "grad_norm", "gp_norm"])
            .map_err(|e| Error::format("loss history", e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::format("loss history", e.to_string()))
}

/// Read a `loss_history.csv`.
pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format("loss history", e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format("loss history", e.to_string())))
        .collect()
}

/// Generator stored in a checkpoint directory.
pub fn load_generator(dir: &Path) -> Result<Generator<f32>> {
    let state = read_state(dir)?;
    let mut g = Generator::new(state.config.generator, 0)?;
    g.params.load(&dir.join(GENERATOR_FILE))?;
    Ok(g)
}

/// Run a generator on a densified RGB image; arbitrary sizes are
/// reflect-padded to the generator's size multiple and cropped back.
pub fn reconstruct(generator: &Generator<f32>, densified: &ImagePatch) -> Result<ImagePatch> {
    let x = densified.to_signed()?;
    let (h, w) = (x.height(), x.width());
    let m = generator.spec.size_multiple();
    let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    let padded = ImageBuf::from_fn(3, hp, wp, |c, y, xx| x.get(c, reflect_index(y as isize, h), reflect_index(xx as isize, w)));
    let out = generator.infer(&padded.to_tensor())?;
    let buf = ImageBuf::from_tensor(&out, 0)?.crop(0, 0, h, w)?;
    ImagePatch::new(buf, RangeTag::Signed)?.to_unit()
}

/// [`reconstruct`] with the generator read from a checkpoint directory.
pub fn reconstruct_from_checkpoint(dir: &Path, densified: &ImagePatch) -> Result<ImagePatch> {
    reconstruct(&load_generator(dir)?, densified)
}

/// Checkpoint paths of the two regional generators under a run directory.
pub fn region_checkpoint(root: &Path, region: &str) -> PathBuf {
    root.join(format!("generator_{region}"))
}

/// Parameter count of a store (for reports).
pub fn parameter_count<T: Real>(p: &ParamStore<T>) -> usize {
    p.num_scalars()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_critic_spec() -> CriticSpec {
        CriticSpec {
            patch_size: 16,
            block_filters: vec![3, 4],
            conv_kernel: 3,
            leaky_slope: 0.2,
        }
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn peak_letters() {
        assert_eq!(peak_pair("HM").unwrap(), (0, 3));
        assert_eq!(peak_pair("mm").unwrap(), (3, 3));
        assert!(peak_pair("HX").is_err());
        assert!(peak_pair("H").is_err());
    }

    #[test]
    fn penalty_parameter_gradient_matches_finite_differences() {
        let critic = Critic::<f64>::new(tiny_critic_spec(), 3).unwrap();
        let real = pseudo(&[2, 3, 16, 16], 1);
        let fake = pseudo(&[2, 3, 16, 16], 2);
        let xhat = pseudo(&[2, 3, 16, 16], 3).scale(0.5);
        let gpw = 10.0;
        let objective = |c: &Critic<f64>| -> f64 {
            let s_real = c.score(&real).unwrap();
            let s_fake = c.score(&fake).unwrap();
            let norms: Vec<f64> = (0..2).map(|s| input_gradients(c, &xhat.sample(s)).1[0]).collect();
            let m = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            -(m(&s_real) - m(&s_fake)) + penalty_from_norms(&norms, gpw).penalty
        };
        let (grads, stats) = penalty_and_wasserstein_gradients(&critic, &real, &fake, &xhat, gpw, 3).unwrap();
        assert!(stats.gp > 0.0);
        let mut probes = 0;
        for (pi, gt) in grads.iter().enumerate() {
            for &k in &[0usize, gt.numel() / 2, gt.numel() - 1] {
                let eps = 1e-5;
                let mut cp = critic.clone();
                cp.params.values_mut()[pi].data_mut()[k] += eps;
                let up = objective(&cp);
                cp.params.values_mut()[pi].data_mut()[k] -= 2.0 * eps;
                let down = objective(&cp);
                let fd = (up - down) / (2.0 * eps);
                let an = gt.data()[k];
                let scale = fd.abs().max(an.abs()).max(1e-3);
                assert!((fd - an).abs() / scale < 2e-3, "param {pi}[{k}]: fd {fd} vs {an}");
                probes += 1;
            }
        }
        assert!(probes >= 10);
    }

    fn smoke_data(n: usize, side: usize) -> TrainData {
        let img = |seed: usize, shift: f32| {
            ImagePatch::new(
                ImageBuf::from_fn(3, side, side, |c, y, x| {
                    let v = ((x * 7 + y * 3 + c * 11 + seed * 13) % 29) as f32 / 28.0;
                    (0.2 + 0.6 * v + shift).clamp(0.0, 1.0)
                }),
                RangeTag::Unit,
            )
            .unwrap()
        };
        TrainData {
            inputs: (0..n).map(|i| img(i, 0.1)).collect(),
            targets: (0..n).map(|i| img(i, 0.0)).collect(),
            distorted: (0..n).map(|i| img(i + 100, 0.0)).collect(),
            pristine: Vec::new(),
        }
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            generator: GeneratorSpec {
                encoder_filters: vec![4, 4, 8],
                decoder_filters: vec![4, 4],
                conv_kernel: 3,
                leaky_slope: 0.2,
            },
            critic: tiny_critic_spec(),
            batch_size: 2,
            n_critic: 2,
            max_steps: Some(3),
            chunk: 2,
            adam: AdamConfig {
                lr: 1e-3,
                beta1: 0.5,
                beta2: 0.999,
                eps: 1e-8,
            },
            lapl_levels: 3,
            ..Default::default()
        }
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let data = smoke_data(3, 16);
        let dir = tempfile::tempdir().unwrap();
        let mut full = Trainer::new(small_config(), &data).unwrap();
        full.run(None).unwrap();

        let mut cfg = small_config();
        cfg.max_steps = Some(2);
        let mut first = Trainer::new(cfg, &data).unwrap();
        first.run(Some(dir.path())).unwrap();
        let mut resumed = Trainer::resume(dir.path(), &data).unwrap();
        resumed.config.max_steps = Some(3);
        resumed.stop = None;
        resumed.run(None).unwrap();
        assert_eq!(resumed.history(), full.history());
        assert_eq!(resumed.generator.params.values(), full.generator.params.values());
        assert!(dir.path().join(HISTORY_FILE).exists());
    }

    #[test]
    fn same_seed_same_curve_and_reconstruct_is_valid() {
        let data = smoke_data(2, 16);
        let mut cfg = small_config();
        cfg.variant = "l2+adv".parse().unwrap();
        let mut a = Trainer::new(cfg.clone(), &data).unwrap();
        let mut b = Trainer::new(cfg, &data).unwrap();
        a.run(None).unwrap();
        b.run(None).unwrap();
        assert_eq!(a.history(), b.history());
        let dir = tempfile::tempdir().unwrap();
        a.save_checkpoint(dir.path()).unwrap();
        let odd = ImagePatch::filled(20, 18, 0.3).unwrap();
        let r1 = reconstruct_from_checkpoint(dir.path(), &odd).unwrap();
        let r2 = reconstruct(&a.generator, &odd).unwrap();
        assert_eq!(r1, r2);
        assert_eq!((r1.height(), r1.width()), (20, 18));
        assert!(r1.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn mismatched_data_rejected() {
        let mut data = smoke_data(2, 16);
        data.targets.pop();
        assert!(Trainer::new(small_config(), &data).is_err());
        let mut data = smoke_data(2, 16);
        data.distorted.clear();
        assert!(Trainer::new(small_config(), &data).is_err());
    }
}

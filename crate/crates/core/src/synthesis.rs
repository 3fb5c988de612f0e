//! Constrained texture synthesis: Gram-statistics optimization in which a
//! fraction of the exemplar's pixels (the guiding samples) is held fixed.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::datasets::{list_images, BatchSummary, EntryKind, ManifestEntry, ManifestWriter, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::features::{extract_features, gram_loss_var, gram_matrices, style_layers, GramSet, Vgg19};
use crate::imaging::filter::{blur_buf, gaussian_blur};
use crate::imaging::{ImageBuf, ImagePatch, RangeTag};
use crate::nn::{Adam, AdamConfig, Graph, Tensor};
use crate::sampling::{sample_count, SamplingMask};
use crate::util::stream_seed;

/// How guiding-sample artifacts are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    /// Constrained run, Gaussian blur, then an unconstrained run.
    #[serde(rename = "A")]
    TwoStage,
    /// Constrained run initialized from the blurred guiding samples.
    #[serde(rename = "B")]
    BlurInit,
    /// Constrained run from noise with no mitigation (baseline).
    #[serde(rename = "none")]
    Unmitigated,
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" | "two-stage" => Ok(Strategy::TwoStage),
            "B" | "b" | "blur-init" => Ok(Strategy::BlurInit),
            "none" | "unmitigated" => Ok(Strategy::Unmitigated),
            other => Err(Error::invalid(format!("unknown synthesis strategy {other:?} (A, B or none)"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Strategy::TwoStage => "A",
            Strategy::BlurInit => "B",
            Strategy::Unmitigated => "none",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    /// Percentage of exemplar pixels kept fixed, in `[0, 100]`.
    pub guiding_percent: f64,
    pub strategy: Strategy,
    /// Iteration budget of the (first) constrained stage.
    pub max_iters: usize,
    /// Iteration budget of strategy A's unconstrained stage.
    pub stage2_iters: usize,
    /// Adam learning rate on unit-range pixels.
    pub step_size: f64,
    pub blur_sigma: f64,
    pub seed: u64,
    /// Stop when the best loss improves by less than this fraction over
    /// `convergence_window` iterations.
    pub convergence_tol: f64,
    pub convergence_window: usize,
    pub layers: Vec<String>,
    /// One weight per layer.
    pub layer_weights: Vec<f64>,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            guiding_percent: 9.09,
            strategy: Strategy::TwoStage,
            max_iters: 1000,
            stage2_iters: 500,
            step_size: 0.02,
            blur_sigma: 1.0,
            seed: 0,
            convergence_tol: 1e-4,
            convergence_window: 50,
            layers: style_layers(),
            layer_weights: vec![1.0; 5],
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.guiding_percent) {
            return Err(Error::invalid(format!(
                "guiding percent must be in [0, 100], got {}",
                self.guiding_percent
            )));
        }
        if self.layers.len() != self.layer_weights.len() {
            return Err(Error::invalid("one layer weight per synthesis layer"));
        }
        if !(self.step_size > 0.0) || !(self.blur_sigma >= 0.0) {
            return Err(Error::invalid("step size must be positive and blur sigma non-negative"));
        }
        Ok(())
    }
}

/// Outcome of one optimization stage.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub iterations: usize,
    pub converged: bool,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SynthesisResult {
    pub image: ImagePatch,
    pub mask: SamplingMask,
    /// Constrained stage output of strategy A (before blurring).
    pub stage1: Option<ImagePatch>,
    pub stages: Vec<StageReport>,
    /// Every stage converged within its budget.
    pub converged: bool,
}

impl SynthesisResult {
    pub fn final_loss(&self) -> f64 {
        self.stages.last().map(|s| s.final_loss).unwrap_or(0.0)
    }

    /// Loss of the run's starting image (first stage).
    pub fn initial_loss(&self) -> f64 {
        self.stages.first().map(|s| s.initial_loss).unwrap_or(0.0)
    }
}

/// `round(p/100·H·W)` uniformly random positions, without replacement.
pub fn select_guiding_samples(exemplar: &ImagePatch, percent: f64, seed: u64) -> Result<SamplingMask> {
    if !(0.0..=100.0).contains(&percent) {
        return Err(Error::invalid(format!("guiding percent must be in [0, 100], got {percent}")));
    }
    let (h, w) = (exemplar.height(), exemplar.width());
    let n = h * w;
    let count = sample_count(n, percent / 100.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bits = vec![false; n];
    for p in rand::seq::index::sample(&mut rng, n, count).into_iter() {
        bits[p] = true;
    }
    let mut m = SamplingMask::from_bits(h, w, bits, seed)?;
    m.rate = percent / 100.0;
    Ok(m)
}

fn check_dims(img: &ImagePatch, exemplar: &ImagePatch, mask: &SamplingMask) -> Result<()> {
    if !img.same_dims(exemplar) || mask.height() != img.height() || mask.width() != img.width() {
        return Err(Error::shape(format!(
            "image {}×{}, exemplar {}×{}, mask {}×{}",
            img.height(),
            img.width(),
            exemplar.height(),
            exemplar.width(),
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

/// Copy exemplar pixels into `img` at the mask positions.
pub fn project_constraint(img: &ImagePatch, exemplar: &ImagePatch, mask: &SamplingMask) -> Result<ImagePatch> {
    let img = img.to_unit()?;
    let exemplar = exemplar.to_unit()?;
    check_dims(&img, &exemplar, mask)?;
    let mut buf = img.into_buf();
    project_into(buf.data_mut(), &exemplar, mask);
    ImagePatch::new(buf, RangeTag::Unit)
}

fn project_into(data: &mut [f32], exemplar: &ImagePatch, mask: &SamplingMask) {
    let hw = mask.height() * mask.width();
    for (p, &b) in mask.bits().iter().enumerate() {
        if b {
            for c in 0..3 {
                data[c * hw + p] = exemplar.data()[c * hw + p];
            }
        }
    }
}

/// Mean squared response to the 2×2 kernel `[[1, −1], [−1, 1]] / 4`, over
/// all valid windows and channels.
pub fn checkerboard_energy(img: &ImagePatch) -> f64 {
    let b = img.buf();
    let (c, h, w) = b.dims();
    if h < 2 || w < 2 {
        return 0.0;
    }
    let mut s = 0.0f64;
    for ch in 0..c {
        for y in 0..h - 1 {
            for x in 0..w - 1 {
                let r = (b.get(ch, y, x) - b.get(ch, y, x + 1) - b.get(ch, y + 1, x) + b.get(ch, y + 1, x + 1)) as f64 / 4.0;
                s += r * r;
            }
        }
    }
    s / (c * (h - 1) * (w - 1)) as f64
}

/// Normalized Gaussian spread of the guiding samples; pixels with no sample
/// support take the sample mean.
fn blurred_samples(exemplar: &ImagePatch, mask: &SamplingMask, sigma: f64) -> Result<ImagePatch> {
    let (h, w) = (exemplar.height(), exemplar.width());
    let hw = h * w;
    let n = mask.count();
    if n == 0 {
        return Err(Error::invalid("blur initialization needs at least one guiding sample"));
    }
    let mut num = ImageBuf::zeros(3, h, w);
    let mut den = ImageBuf::zeros(1, h, w);
    let mut mean = [0.0f64; 3];
    for (p, &b) in mask.bits().iter().enumerate() {
        if b {
            den.data_mut()[p] = 1.0;
            for c in 0..3 {
                let v = exemplar.data()[c * hw + p];
                num.data_mut()[c * hw + p] = v;
                mean[c] += v as f64 / n as f64;
            }
        }
    }
    let num = blur_buf(&num, sigma);
    let den = blur_buf(&den, sigma);
    let out = ImageBuf::from_fn(3, h, w, |c, y, x| {
        let d = den.get(0, y, x);
        if d > 1e-4 {
            num.get(c, y, x) / d
        } else {
            mean[c] as f32
        }
    });
    ImagePatch::from_clamped(out)
}

/// Gram-statistics optimizer bound to one exemplar.
pub struct Synthesizer<'a> {
    vgg: &'a Vgg19<f32>,
    target: GramSet,
    weights: Vec<f64>,
}

impl<'a> Synthesizer<'a> {
    pub fn new(vgg: &'a Vgg19<f32>, exemplar: &ImagePatch, layers: &[String], weights: &[f64]) -> Result<Self> {
        if layers.len() != weights.len() {
            return Err(Error::invalid("one layer weight per synthesis layer"));
        }
        let target = gram_matrices(&extract_features(vgg, exemplar, layers)?);
        Ok(Synthesizer {
            vgg,
            target,
            weights: weights.to_vec(),
        })
    }

    pub fn target(&self) -> &GramSet {
        &self.target
    }

    /// Loss and pixel gradient of a `[1,3,H,W]` unit-range tensor.
    pub fn loss_and_grad(&self, x: &Tensor<f32>) -> Result<(f64, Tensor<f32>)> {
        let g = Graph::new();
        let v = g.leaf(x.clone());
        let loss = gram_loss_var(self.vgg, v, &self.target, &self.weights)?;
        let value = loss.item() as f64;
        let mut grads = g.backward(loss);
        Ok((value, grads.take_or_zeros(v)))
    }

    pub fn loss(&self, img: &ImagePatch) -> Result<f64> {
        let g = Graph::new();
        let v = g.constant(img.to_unit()?.to_tensor::<f32>());
        Ok(gram_loss_var(self.vgg, v, &self.target, &self.weights)?.item() as f64)
    }

    /// Adam descent from `start`, clamping to `[0, 1]` and optionally
    /// projecting onto the constraint after every step. Returns the best
    /// iterate seen.
    pub fn optimize(
        &self,
        start: &ImagePatch,
        constraint: Option<(&ImagePatch, &SamplingMask)>,
        iters: usize,
        cfg: &SynthesisConfig,
    ) -> Result<(ImagePatch, StageReport)> {
        let mut x = start.to_unit()?.to_tensor::<f32>();
        if let Some((ex, m)) = constraint {
            project_into(x.data_mut(), ex, m);
        }
        let mut opt = Adam::<f32>::new(AdamConfig {
            lr: cfg.step_size,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        });
        let mut best = x.clone();
        let mut best_loss = f64::INFINITY;
        let mut losses = Vec::with_capacity(iters + 1);
        let mut converged = false;
        let mut done = 0;
        for it in 0..=iters {
            let (loss, grad) = self.loss_and_grad(&x)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("synthesis loss at iteration {it}")));
            }
            losses.push(loss);
            if loss < best_loss {
                best_loss = loss;
                best = x.clone();
            }
            let win = cfg.convergence_window;
            if win > 0 && it >= win {
                let before = losses[..=it - win].iter().cloned().fold(f64::INFINITY, f64::min);
                if before.is_finite() && before > 0.0 && (before - best_loss) / before < cfg.convergence_tol {
                    converged = true;
                    break;
                }
            }
            if best_loss == 0.0 {
                converged = true;
                break;
            }
            if it == iters {
                break;
            }
            let mut params = [x];
            opt.step(&mut params, std::slice::from_ref(&grad));
            let [nx] = params;
            x = nx;
            x.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            if let Some((ex, m)) = constraint {
                project_into(x.data_mut(), ex, m);
            }
            done = it + 1;
        }
        let image = ImagePatch::from_clamped(ImageBuf::from_tensor(&best, 0)?)?;
        Ok((
            image,
            StageReport {
                iterations: done,
                converged,
                initial_loss: losses[0],
                final_loss: best_loss,
                losses,
            },
        ))
    }
}

fn noise_image(h: usize, w: usize, seed: u64) -> Result<ImagePatch> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f697365);
    let u = Uniform::new(0.0f32, 1.0).expect("valid range");
    let data = (0..3 * h * w).map(|_| u.sample(&mut rng)).collect();
    ImagePatch::new(ImageBuf::from_planar(3, h, w, data)?, RangeTag::Unit)
}

/// Synthesize a texture with the exemplar's Gram statistics and its
/// guiding samples.
pub fn synthesize(vgg: &Vgg19<f32>, exemplar: &ImagePatch, cfg: &SynthesisConfig) -> Result<SynthesisResult> {
    cfg.validate()?;
    let exemplar = exemplar.to_unit()?;
    let mask = select_guiding_samples(&exemplar, cfg.guiding_percent, cfg.seed)?;
    let synth = Synthesizer::new(vgg, &exemplar, &cfg.layers, &cfg.layer_weights)?;
    synthesize_with(&synth, &exemplar, &mask, cfg)
}

/// [`synthesize`] with an explicit guiding mask and a prepared optimizer.
pub fn synthesize_with(
    synth: &Synthesizer<'_>,
    exemplar: &ImagePatch,
    mask: &SamplingMask,
    cfg: &SynthesisConfig,
) -> Result<SynthesisResult> {
    cfg.validate()?;
    let (h, w) = (exemplar.height(), exemplar.width());
    let constraint = Some((exemplar, mask));
    match cfg.strategy {
        Strategy::Unmitigated | Strategy::TwoStage => {
            let start = noise_image(h, w, cfg.seed)?;
            let (s1, r1) = synth.optimize(&start, constraint, cfg.max_iters, cfg)?;
            if cfg.strategy == Strategy::Unmitigated {
                let converged = r1.converged;
                return Ok(SynthesisResult {
                    image: s1,
                    mask: mask.clone(),
                    stage1: None,
                    stages: vec![r1],
                    converged,
                });
            }
            let blurred = gaussian_blur(&s1, cfg.blur_sigma)?;
            let (out, r2) = synth.optimize(&blurred, None, cfg.stage2_iters, cfg)?;
            let converged = r1.converged && r2.converged;
            Ok(SynthesisResult {
                image: out,
                mask: mask.clone(),
                stage1: Some(s1),
                stages: vec![r1, r2],
                converged,
            })
        }
        Strategy::BlurInit => {
            let start = if mask.count() == 0 {
                noise_image(h, w, cfg.seed)?
            } else {
                blurred_samples(exemplar, mask, cfg.blur_sigma.max(1e-3))?
            };
            let (out, r) = synth.optimize(&start, constraint, cfg.max_iters, cfg)?;
            let converged = r.converged;
            Ok(SynthesisResult {
                image: out,
                mask: mask.clone(),
                stage1: None,
                stages: vec![r],
                converged,
            })
        }
    }
}

/// Continue strategy A from an existing constrained result (shares the
/// stage-1 work with an unmitigated run on the same seed).
pub fn two_stage_from(
    synth: &Synthesizer<'_>,
    stage1: &ImagePatch,
    cfg: &SynthesisConfig,
) -> Result<(ImagePatch, StageReport)> {
    let blurred = gaussian_blur(stage1, cfg.blur_sigma)?;
    synth.optimize(&blurred, None, cfg.stage2_iters, cfg)
}

/// Synthesize one distorted version of every image in `exemplar_dir` (center
/// crops of `patch` pixels) into `out_dir`, recording each in a manifest.
/// Images already present are skipped; failures are collected, not fatal.
pub fn batch_synthesize(
    vgg: &Vgg19<f32>,
    exemplar_dir: &Path,
    out_dir: &Path,
    patch: usize,
    cfg: &SynthesisConfig,
) -> Result<BatchSummary> {
    cfg.validate()?;
    let mut w = ManifestWriter::open(&out_dir.join(MANIFEST_FILE))?;
    let mut summary = BatchSummary::default();
    for (i, path) in list_images(exemplar_dir)?.into_iter().enumerate() {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let stem = path.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        let seed = stream_seed(cfg.seed, &[13, i as u64]);
        let result = (|| -> Result<Option<ManifestEntry>> {
            let img = ImagePatch::load(&path)?;
            let (h, wd) = (img.height(), img.width());
            if h < patch || wd < patch {
                return Err(Error::invalid(format!("{name} is {h}×{wd}, smaller than {patch}")));
            }
            let offset = ((h - patch) / 2, (wd - patch) / 2);
            let entry = ManifestEntry {
                patch_path: format!("distorted/{stem}.png"),
                source_image: name.clone(),
                crop_offset: offset,
                region: None,
                kind: EntryKind::Distorted,
                rate_or_percent: Some(cfg.guiding_percent),
                strategy: Some(cfg.strategy),
                seed,
                partner: None,
            };
            if w.contains(&entry.key()) {
                return Ok(None);
            }
            let ex = img.crop(offset.0, offset.1, patch, patch)?;
            let out = synthesize(vgg, &ex, &SynthesisConfig { seed, ..cfg.clone() })?;
            out.image.save_png(&w.root().join(&entry.patch_path))?;
            Ok(Some(entry))
        })();
        match result {
            Ok(Some(e)) => {
                w.append(e)?;
                summary.written += 1;
            }
            Ok(None) => summary.skipped_existing += 1,
            Err(e) => {
                log::warn!("{name}: {e}");
                summary.failed.push(format!("{name}: {e}"));
            }
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(h: usize, w: usize) -> ImagePatch {
        ImagePatch::new(
            ImageBuf::from_fn(3, h, w, |c, y, x| {
                let v = ((x / 4 + y / 4) % 2) as f32 * 0.6 + 0.2 + 0.05 * c as f32;
                v.min(1.0)
            }),
            RangeTag::Unit,
        )
        .unwrap()
    }

    #[test]
    fn guiding_sample_counts() {
        let ex = ImagePatch::filled(256, 256, 0.5).unwrap();
        assert_eq!(select_guiding_samples(&ex, 9.09, 1).unwrap().count(), 5957);
        assert_eq!(select_guiding_samples(&ex, 0.0, 1).unwrap().count(), 0);
        assert_eq!(select_guiding_samples(&ex, 100.0, 1).unwrap().count(), 65536);
        assert_eq!(
            select_guiding_samples(&ex, 5.0, 3).unwrap(),
            select_guiding_samples(&ex, 5.0, 3).unwrap()
        );
        assert!(select_guiding_samples(&ex, 101.0, 1).is_err());
    }

    #[test]
    fn projection_contract() {
        let ex = texture(16, 16);
        let img = ImagePatch::filled(16, 16, 0.1).unwrap();
        let empty = select_guiding_samples(&ex, 0.0, 0).unwrap();
        assert_eq!(project_constraint(&img, &ex, &empty).unwrap(), img);
        let full = select_guiding_samples(&ex, 100.0, 0).unwrap();
        assert_eq!(project_constraint(&img, &ex, &full).unwrap(), ex);
        let m = select_guiding_samples(&ex, 30.0, 2).unwrap();
        let once = project_constraint(&img, &ex, &m).unwrap();
        assert_eq!(project_constraint(&once, &ex, &m).unwrap(), once);
        for (y, x) in m.positions() {
            assert_eq!(once.get(1, y, x), ex.get(1, y, x));
        }
        assert!(project_constraint(&ImagePatch::filled(16, 20, 0.0).unwrap(), &ex, &m).is_err());
    }

    #[test]
    fn checkerboard_values() {
        assert_eq!(checkerboard_energy(&ImagePatch::filled(16, 16, 0.7).unwrap()), 0.0);
        let cb = ImagePatch::new(
            ImageBuf::from_fn(3, 16, 16, |_, y, x| if (x + y) % 2 == 0 { 1.0 } else { -1.0 }),
            RangeTag::Signed,
        )
        .unwrap();
        assert!((checkerboard_energy(&cb) - 1.0).abs() < 1e-12);
        let ramp = ImagePatch::new(
            ImageBuf::from_fn(3, 32, 32, |_, y, x| (0.01 * x as f32 + 0.02 * y as f32).min(1.0)),
            RangeTag::Unit,
        )
        .unwrap();
        assert!(checkerboard_energy(&ramp) < 1e-6);
    }

    #[test]
    fn blur_init_keeps_guiding_pixels_exact() {
        let vgg = Vgg19::<f32>::surrogate(0);
        let ex = texture(16, 16);
        let cfg = SynthesisConfig {
            guiding_percent: 20.0,
            strategy: Strategy::BlurInit,
            max_iters: 3,
            layers: vec!["relu1_1".into(), "relu2_1".into()],
            layer_weights: vec![1.0, 1.0],
            ..Default::default()
        };
        let r = synthesize(&vgg, &ex, &cfg).unwrap();
        for (y, x) in r.mask.positions() {
            for c in 0..3 {
                assert_eq!(r.image.get(c, y, x), ex.get(c, y, x));
            }
        }
        let again = synthesize(&vgg, &ex, &cfg).unwrap();
        assert_eq!(again.image, r.image);
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("A".parse::<Strategy>().unwrap(), Strategy::TwoStage);
        assert_eq!("B".parse::<Strategy>().unwrap(), Strategy::BlurInit);
        assert!("C".parse::<Strategy>().is_err());
        assert_eq!(Strategy::TwoStage.to_string(), "A");
    }

    #[test]
    fn batch_is_resumable() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        texture(24, 24).save_png(&src.path().join("a.png")).unwrap();
        texture(20, 28).save_png(&src.path().join("b.png")).unwrap();
        texture(16, 16).save_png(&src.path().join("tiny.png")).unwrap();
        let vgg = Vgg19::surrogate(0);
        let cfg = SynthesisConfig {
            max_iters: 3,
            stage2_iters: 2,
            layers: vec!["relu1_1".into()],
            layer_weights: vec![1.0],
            ..Default::default()
        };
        let first = batch_synthesize(&vgg, src.path(), out.path(), 20, &cfg).unwrap();
        assert_eq!((first.written, first.skipped_existing, first.failed.len()), (2, 0, 1));
        let again = batch_synthesize(&vgg, src.path(), out.path(), 20, &cfg).unwrap();
        assert_eq!((again.written, again.skipped_existing), (0, 2));
        assert!(out.path().join("distorted/b.png").exists());
    }
}

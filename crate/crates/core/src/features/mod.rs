//! 19-layer VGG backbone, feature stacks, Gram statistics and the learned
//! perceptual distance built on top of them.

mod lpips;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::imaging::ImagePatch;
use crate::nn::{he_normal, read_safetensors, Graph, Real, Tensor, Var};

pub use lpips::{Lpips, LPIPS_LAYERS};

/// Environment variable naming the directory that holds downloaded weights.
pub const WEIGHT_DIR_ENV: &str = "FOVEATED_WEIGHT_DIR";

/// File name of the backbone weights inside the weight directory.
pub const VGG19_FILE: &str = "vgg19.safetensors";

/// Canonical per-channel input normalization of the backbone.
pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Convolutions per block and block widths.
const BLOCKS: [(usize, usize); 5] = [(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)];

/// Default texture-statistics layers (first activation of each block).
pub const STYLE_LAYERS: [&str; 5] = ["relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Index into the convolution list.
    Conv(usize),
    Relu,
    Pool,
}

/// One entry of the sequential backbone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub kind: LayerKind,
    /// Output channels.
    pub channels: usize,
    /// Number of 2× poolings applied up to and including this layer.
    pub pools: u32,
}

/// All 37 layers in forward order. Position `k` matches `features.k` in the
/// usual sequential checkpoint layout.
pub fn vgg19_layers() -> Vec<LayerInfo> {
    let mut out = Vec::with_capacity(37);
    let mut conv = 0;
    for (b, &(n, c)) in BLOCKS.iter().enumerate() {
        for i in 1..=n {
            out.push(LayerInfo {
                name: format!("conv{}_{i}", b + 1),
                kind: LayerKind::Conv(conv),
                channels: c,
                pools: b as u32,
            });
            out.push(LayerInfo {
                name: format!("relu{}_{i}", b + 1),
                kind: LayerKind::Relu,
                channels: c,
                pools: b as u32,
            });
            conv += 1;
        }
        out.push(LayerInfo {
            name: format!("pool{}", b + 1),
            kind: LayerKind::Pool,
            channels: c,
            pools: b as u32 + 1,
        });
    }
    out
}

/// Position of a named layer.
pub fn layer_index(name: &str) -> Result<usize> {
    vgg19_layers()
        .iter()
        .position(|l| l.name == name)
        .ok_or_else(|| Error::invalid(format!("unknown backbone layer {name:?}")))
}

/// Where the backbone weights came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightSource {
    /// Seeded He initialization, used when no weight file is available.
    Surrogate { seed: u64 },
    File { path: PathBuf, sha256: String },
}

/// The convolutional part of VGG-19. Immutable once built; clones share the
/// weight buffers.
#[derive(Clone, Debug)]
pub struct Vgg19<T: Real> {
    weights: Vec<Arc<Tensor<T>>>,
    biases: Vec<Arc<Tensor<T>>>,
    source: WeightSource,
}

fn conv_shapes() -> Vec<(usize, usize)> {
    let mut shapes = Vec::new();
    let mut cin = 3;
    for &(n, c) in &BLOCKS {
        for _ in 0..n {
            shapes.push((c, cin));
            cin = c;
        }
    }
    shapes
}

fn conv_positions() -> Vec<usize> {
    vgg19_layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l.kind, LayerKind::Conv(_)))
        .map(|(k, _)| k)
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl<T: Real> Vgg19<T> {
    /// Deterministic randomly initialized backbone (He-normal weights, small
    /// normal biases).
    pub fn surrogate(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bias = Normal::new(0.0, 0.01).expect("valid std");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (co, ci) in conv_shapes() {
            weights.push(Arc::new(he_normal(&mut rng, &[co, ci, 3, 3], ci * 9)));
            biases.push(Arc::new(Tensor::from_vec(
                &[co],
                (0..co).map(|_| T::lit(bias.sample(&mut rng))).collect(),
            )));
        }
        Vgg19 {
            weights,
            biases,
            source: WeightSource::Surrogate { seed },
        }
    }

    /// Load `features.{k}.weight` / `features.{k}.bias` tensors from a
    /// safetensors file. When `expected_sha256` is given the file must match.
    pub fn load(path: &Path, expected_sha256: Option<&str>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let digest = sha256_hex(&bytes);
        if let Some(want) = expected_sha256 {
            if !want.eq_ignore_ascii_case(&digest) {
                return Err(Error::format(
                    "backbone weights",
                    format!("{} has sha256 {digest}, expected {want}", path.display()),
                ));
            }
        }
        let map = read_safetensors::<T>(&bytes)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for ((co, ci), k) in conv_shapes().into_iter().zip(conv_positions()) {
            let get = |suffix: &str, shape: &[usize]| -> Result<Arc<Tensor<T>>> {
                let name = format!("features.{k}.{suffix}");
                let t = map
                    .get(&name)
                    .ok_or_else(|| Error::format("backbone weights", format!("missing tensor {name}")))?;
                if t.shape() != shape {
                    return Err(Error::format(
                        "backbone weights",
                        format!("{name} has shape {:?}, expected {shape:?}", t.shape()),
                    ));
                }
                Ok(Arc::new(t.clone()))
            };
            weights.push(get("weight", &[co, ci, 3, 3])?);
            biases.push(get("bias", &[co])?);
        }
        Ok(Vgg19 {
            weights,
            biases,
            source: WeightSource::File {
                path: path.to_path_buf(),
                sha256: digest,
            },
        })
    }

    /// Weights from `$FOVEATED_WEIGHT_DIR/vgg19.safetensors` when present,
    /// otherwise the surrogate with `seed`.
    pub fn from_env_or_surrogate(seed: u64) -> Result<Self> {
        match std::env::var_os(WEIGHT_DIR_ENV) {
            Some(dir) => {
                let path = Path::new(&dir).join(VGG19_FILE);
                if path.exists() {
                    Vgg19::load(&path, None)
                } else {
                    log::warn!("{} not found, using surrogate backbone", path.display());
                    Ok(Vgg19::surrogate(seed))
                }
            }
            None => Ok(Vgg19::surrogate(seed)),
        }
    }

    pub fn source(&self) -> &WeightSource {
        &self.source
    }

    pub fn conv_weight(&self, i: usize) -> &Tensor<T> {
        &self.weights[i]
    }

    pub fn conv_bias(&self, i: usize) -> &Tensor<T> {
        &self.biases[i]
    }

    /// Run the backbone on a unit-range `[N,3,H,W]` input and return the
    /// activations at `taps` (layer positions, any order). Stops after the
    /// deepest tap.
    pub fn forward<'g>(&self, x: Var<'g, T>, taps: &[usize]) -> Vec<Var<'g, T>> {
        let g = x.graph();
        let deepest = taps.iter().copied().max().expect("at least one tap");
        let scale: Vec<T> = IMAGENET_STD.iter().map(|s| T::lit(1.0 / s)).collect();
        let shift: Vec<T> = IMAGENET_MEAN.iter().zip(&IMAGENET_STD).map(|(m, s)| T::lit(-m / s)).collect();
        let mut h = x.channel_affine(&scale, &shift);
        let mut outs: Vec<Option<Var<'g, T>>> = vec![None; taps.len()];
        for (k, layer) in vgg19_layers().iter().enumerate().take(deepest + 1) {
            h = match layer.kind {
                LayerKind::Conv(i) => {
                    let w = g.constant_shared(self.weights[i].clone());
                    let b = g.constant_shared(self.biases[i].clone());
                    h.conv2d(w, Some(b))
                }
                LayerKind::Relu => h.relu(),
                LayerKind::Pool => h.max_pool2(),
            };
            for (slot, &t) in outs.iter_mut().zip(taps) {
                if t == k {
                    *slot = Some(h);
                }
            }
        }
        outs.into_iter().map(|o| o.expect("tap reached")).collect()
    }

    /// Forward by layer names.
    pub fn forward_named<'g>(&self, x: Var<'g, T>, layers: &[String]) -> Result<Vec<Var<'g, T>>> {
        let taps = resolve_layers(layers)?;
        Ok(self.forward(x, &taps))
    }
}

/// Validate layer names and return their positions.
pub fn resolve_layers(layers: &[String]) -> Result<Vec<usize>> {
    if layers.is_empty() {
        return Err(Error::invalid("layer set must not be empty"));
    }
    layers.iter().map(|l| layer_index(l)).collect()
}

pub fn style_layers() -> Vec<String> {
    STYLE_LAYERS.iter().map(|s| s.to_string()).collect()
}

/// Activations of one image at a set of layers, each `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub layers: Vec<String>,
    pub maps: Vec<Tensor<f32>>,
}

impl FeatureStack {
    pub fn get(&self, layer: &str) -> Option<&Tensor<f32>> {
        self.layers.iter().position(|l| l == layer).map(|i| &self.maps[i])
    }
}

pub fn extract_features(vgg: &Vgg19<f32>, img: &ImagePatch, layers: &[String]) -> Result<FeatureStack> {
    let taps = resolve_layers(layers)?;
    let unit = img.to_unit()?;
    let g = Graph::new();
    let x = g.constant(unit.to_tensor());
    let outs = vgg.forward(x, &taps);
    let maps = outs
        .iter()
        .map(|v| {
            let t = v.value();
            let (_, c, h, w) = t.dims4();
            Tensor::from_vec(&[c, h, w], t.data().to_vec())
        })
        .collect();
    Ok(FeatureStack {
        layers: layers.to_vec(),
        maps,
    })
}

/// One layer's Gram matrix `G = F Fᵀ` with the layer's channel count `n`
/// and number of spatial positions `m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gram {
    pub n: usize,
    pub m: usize,
    /// Row-major `n×n`.
    pub data: Vec<f64>,
}

impl Gram {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramSet {
    pub layers: Vec<String>,
    pub grams: Vec<Gram>,
}

/// Gram matrix of a `[C, H, W]` (or `[C, M]`) map, accumulated in f64.
pub fn gram_of(map: &Tensor<f32>) -> Gram {
    let n = map.shape()[0];
    let m = map.numel() / n.max(1);
    let f: Vec<f64> = map.data().iter().map(|&v| v as f64).collect();
    let mut data = vec![0.0; n * n];
    crate::nn::gemm(n, m, n, 1.0, &f, false, &f, true, 0.0, &mut data);
    // Exact symmetry regardless of summation order.
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (data[i * n + j] + data[j * n + i]);
            data[i * n + j] = v;
            data[j * n + i] = v;
        }
    }
    Gram { n, m, data }
}

pub fn gram_matrices(feats: &FeatureStack) -> GramSet {
    GramSet {
        layers: feats.layers.clone(),
        grams: feats.maps.iter().map(gram_of).collect(),
    }
}

fn check_layer_match(a: &GramSet, b: &GramSet, weights: &[f64]) -> Result<()> {
    if a.layers != b.layers {
        return Err(Error::invalid(format!("layer sets differ: {:?} vs {:?}", a.layers, b.layers)));
    }
    if weights.len() != a.layers.len() {
        return Err(Error::invalid(format!(
            "{} layer weights for {} layers",
            weights.len(),
            a.layers.len()
        )));
    }
    for (l, (ga, gb)) in a.grams.iter().zip(&b.grams).enumerate() {
        if ga.n != gb.n || ga.m != gb.m {
            return Err(Error::shape(format!("layer {} Gram sizes differ", a.layers[l])));
        }
    }
    Ok(())
}

/// `Σ_l w_l Σ_ij (A_ij − B_ij)² / (4 N_l² M_l²)`.
pub fn gram_loss(a: &GramSet, b: &GramSet, weights: &[f64]) -> Result<f64> {
    check_layer_match(a, b, weights)?;
    Ok(a.grams
        .iter()
        .zip(&b.grams)
        .zip(weights)
        .map(|((ga, gb), &w)| {
            let s: f64 = ga.data.iter().zip(&gb.data).map(|(x, y)| (x - y) * (x - y)).sum();
            w * s / (4.0 * (ga.n * ga.n) as f64 * (ga.m * ga.m) as f64)
        })
        .sum())
}

/// Differentiable Gram loss of a unit-range batch `x` against a fixed
/// target set (same target for every sample; the per-sample losses add up).
pub fn gram_loss_var<'g, T: Real>(
    vgg: &Vgg19<T>,
    x: Var<'g, T>,
    target: &GramSet,
    weights: &[f64],
) -> Result<Var<'g, T>> {
    if weights.len() != target.layers.len() {
        return Err(Error::invalid("one weight per target layer"));
    }
    let taps = resolve_layers(&target.layers)?;
    let g = x.graph();
    let feats = vgg.forward(x, &taps);
    let mut total: Option<Var<'g, T>> = None;
    for ((f, tg), &w) in feats.into_iter().zip(&target.grams).zip(weights) {
        let gm = f.gram();
        let n_batch = gm.shape()[0];
        let (_, c, h, wd) = f.value().dims4();
        if c != tg.n || h * wd != tg.m {
            return Err(Error::shape(format!(
                "target Gram is {}×{} over {} positions, features have {c} channels over {}",
                tg.n,
                tg.n,
                tg.m,
                h * wd
            )));
        }
        let tt: Vec<T> = (0..n_batch).flat_map(|_| tg.data.iter().map(|&v| T::lit(v))).collect();
        let t = g.constant(Tensor::from_vec(&[n_batch, c, c], tt));
        let norm = w / (4.0 * (c * c) as f64 * (tg.m * tg.m) as f64);
        let term = gm.sub(t).square().sum().scale(T::lit(norm));
        total = Some(match total {
            Some(acc) => acc.add(term),
            None => term,
        });
    }
    Ok(total.expect("non-empty layer set"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_patch(seed: u64) -> ImagePatch {
        use crate::imaging::{ImageBuf, RangeTag};
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = rand_distr::Uniform::new(0.0f32, 1.0).unwrap();
        let data: Vec<f32> = (0..3 * 32 * 32).map(|_| u.sample(&mut rng)).collect();
        ImagePatch::new(ImageBuf::from_planar(3, 32, 32, data).unwrap(), RangeTag::Unit).unwrap()
    }

    #[test]
    fn layer_table() {
        let l = vgg19_layers();
        assert_eq!(l.len(), 37);
        assert_eq!(l[0].name, "conv1_1");
        assert_eq!(l[4].name, "pool1");
        assert_eq!(l[34].name, "conv5_4");
        assert_eq!(conv_positions(), vec![0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28, 30, 32, 34]);
        assert!(layer_index("relu9_1").is_err());
        assert_eq!(STYLE_LAYERS.map(|s| l[layer_index(s).unwrap()].channels), [64, 128, 256, 512, 512]);
    }

    #[test]
    fn extraction_is_deterministic_with_expected_shapes() {
        let vgg = Vgg19::<f32>::surrogate(0);
        let img = tiny_patch(1);
        let layers: Vec<String> = ["relu1_1", "pool2", "relu3_1"].map(String::from).to_vec();
        let a = extract_features(&vgg, &img, &layers).unwrap();
        let b = extract_features(&vgg, &img, &layers).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.get("relu1_1").unwrap().shape(), &[64, 32, 32]);
        assert_eq!(a.get("pool2").unwrap().shape(), &[128, 8, 8]);
        assert_eq!(a.get("relu3_1").unwrap().shape(), &[256, 8, 8]);
        assert!(extract_features(&vgg, &img, &["nope".to_string()]).is_err());
        assert!(extract_features(&vgg, &img, &[]).is_err());
    }

    #[test]
    fn zero_image_first_layer_is_bias_plus_constant_response() {
        let vgg = Vgg19::<f32>::surrogate(5);
        let img = ImagePatch::filled(16, 16, 0.0).unwrap();
        let f = extract_features(&vgg, &img, &["conv1_1".to_string()]).unwrap();
        let map = f.get("conv1_1").unwrap();
        let w = vgg.conv_weight(0);
        let b = vgg.conv_bias(0);
        for co in [0usize, 17, 63] {
            let mut expect = b.data()[co] as f64;
            for ci in 0..3 {
                let v = -IMAGENET_MEAN[ci] / IMAGENET_STD[ci];
                for k in 0..9 {
                    expect += w.data()[(co * 3 + ci) * 9 + k] as f64 * v;
                }
            }
            // Interior pixel: the zero padding is not involved.
            let got = map.data()[co * 256 + 8 * 16 + 8] as f64;
            assert!((got - expect).abs() < 1e-5, "{got} vs {expect}");
        }
    }

    #[test]
    fn gram_matches_double_loop_and_ignores_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = rand_distr::Uniform::new(-1.0f32, 1.0).unwrap();
        let data: Vec<f32> = (0..48).map(|_| u.sample(&mut rng)).collect();
        let map = Tensor::from_vec(&[3, 4, 4], data.clone());
        let g = gram_of(&map);
        for i in 0..3 {
            for j in 0..3 {
                let e: f64 = (0..16).map(|k| data[i * 16 + k] as f64 * data[j * 16 + k] as f64).sum();
                assert!((g.get(i, j) - e).abs() < 1e-12);
            }
        }
        let perm: Vec<usize> = (0..16).map(|k| (k * 7 + 3) % 16).collect();
        let shuffled: Vec<f32> = (0..3).flat_map(|c| perm.iter().map(move |&k| (c, k))).map(|(c, k)| data[c * 16 + k]).collect();
        let gs = gram_of(&Tensor::from_vec(&[3, 16], shuffled));
        for (a, b) in g.data.iter().zip(&gs.data) {
            assert!((a - b).abs() < 1e-12);
        }
        let c = gram_of(&Tensor::from_vec(&[1, 5], vec![0.5; 5]));
        assert!((c.data[0] - 0.25 * 5.0).abs() < 1e-12);
    }

    #[test]
    fn gram_loss_formula() {
        let one = |v: f64| GramSet {
            layers: vec!["l".into()],
            grams: vec![Gram { n: 1, m: 1, data: vec![v] }],
        };
        assert_eq!(gram_loss(&one(2.0), &one(2.0), &[1.0]).unwrap(), 0.0);
        assert!((gram_loss(&one(1.0), &one(4.0), &[1.0]).unwrap() - 9.0 / 4.0).abs() < 1e-15);
        assert!(gram_loss(&one(1.0), &one(4.0), &[1.0, 2.0]).is_err());
        let other = GramSet {
            layers: vec!["k".into()],
            grams: vec![Gram { n: 1, m: 1, data: vec![1.0] }],
        };
        assert!(gram_loss(&one(1.0), &other, &[1.0]).is_err());
    }

    #[test]
    fn graph_loss_agrees_with_direct_loss() {
        let vgg = Vgg19::<f32>::surrogate(2);
        let layers: Vec<String> = ["relu1_1", "relu2_1"].map(String::from).to_vec();
        let a = tiny_patch(4);
        let b = tiny_patch(5);
        let ga = gram_matrices(&extract_features(&vgg, &a, &layers).unwrap());
        let gb = gram_matrices(&extract_features(&vgg, &b, &layers).unwrap());
        let direct = gram_loss(&ga, &gb, &[1.0, 0.5]).unwrap();
        let g = Graph::new();
        let x = g.constant(a.to_tensor::<f32>());
        let v = gram_loss_var(&vgg, x, &gb, &[1.0, 0.5]).unwrap().item() as f64;
        assert!((v - direct).abs() / direct < 1e-4, "{v} vs {direct}");
    }
}

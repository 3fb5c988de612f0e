//! Minimal CPU tensor engine: dense tensors, tape autodiff, convolution
//! layers and Adam. Generic over `f32`/`f64`.

mod conv;
mod graph;
mod ops;
mod tensor;

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

pub use graph::{BackwardFn, Gradients, Graph, Var};
pub use tensor::{gemm, Real, Tensor};

use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of parameter tensors.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.values
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|t| t.is_finite())
    }

    /// Put every parameter on the tape, as leaves when `trainable`.
    pub fn bind<'g>(&self, g: &'g Graph<T>, trainable: bool) -> Bound<'g, T> {
        let vars = self
            .values
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Serialize as a safetensors byte buffer (always stored as F32).
    pub fn to_safetensors(&self) -> Result<Vec<u8>> {
        let bytes: Vec<Vec<u8>> = self
            .values
            .iter()
            .map(|t| {
                t.data()
                    .iter()
                    .flat_map(|v| (v.to_f64_lossy() as f32).to_le_bytes())
                    .collect()
            })
            .collect();
        let views: Vec<(String, TensorView<'_>)> = self
            .names
            .iter()
            .zip(&self.values)
            .zip(&bytes)
            .map(|((n, t), b)| {
                TensorView::new(Dtype::F32, t.shape().to_vec(), b)
                    .map(|v| (n.clone(), v))
                    .map_err(|e| Error::format("safetensors", e.to_string()))
            })
            .collect::<Result<_>>()?;
        safetensors::serialize(views, None).map_err(|e| Error::format("safetensors", e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::util::write_atomic(path, &self.to_safetensors()?)
    }

    /// Overwrite values from a safetensors buffer. Every parameter must be
    /// present with a matching shape; extra tensors are ignored.
    pub fn load_from_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let map = read_safetensors::<T>(bytes)?;
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let t = map
                .get(name)
                .ok_or_else(|| Error::format("weights", format!("missing tensor {name}")))?;
            if t.shape() != value.shape() {
                return Err(Error::format(
                    "weights",
                    format!("tensor {name} has shape {:?}, expected {:?}", t.shape(), value.shape()),
                ));
            }
            *value = t.clone();
        }
        Ok(())
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load_from_bytes(&bytes)
    }
}

/// Decode every tensor of a safetensors buffer (F32 or F64).
pub fn read_safetensors<T: Real>(bytes: &[u8]) -> Result<HashMap<String, Tensor<T>>> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| Error::format("safetensors", e.to_string()))?;
    let mut out = HashMap::new();
    for (name, view) in st.tensors() {
        let data: Vec<T> = match view.dtype() {
            Dtype::F32 => view
                .data()
                .chunks_exact(4)
                .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect(),
            Dtype::F64 => view
                .data()
                .chunks_exact(8)
                .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
                .collect(),
            other => {
                return Err(Error::format("safetensors", format!("tensor {name}: unsupported dtype {other:?}")))
            }
        };
        out.insert(name, Tensor::from_vec(view.shape(), data));
    }
    Ok(out)
}

/// Parameters placed on a tape.
pub struct Bound<'g, T: Real> {
    vars: Vec<Var<'g, T>>,
}

impl<'g, T: Real> Bound<'g, T> {
    pub fn var(&self, id: ParamId) -> Var<'g, T> {
        self.vars[id.0]
    }

    /// Gradients for every bound parameter, zero-filled when unreachable.
    pub fn grads(&self, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.vars.iter().map(|&v| grads.take_or_zeros(v)).collect()
    }
}

/// He-normal initialization: `N(0, 2/fan_in)`.
pub fn he_normal<T: Real>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(dist.sample(rng))).collect())
}

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of `params[i] -= lr · m̂ / (√v̂ + ε)`.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        assert_eq!(params.len(), grads.len(), "adam: parameter/gradient count");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let step_size = T::lit(c.lr / bc1);
        let inv_bc2 = T::lit(1.0 / bc2);
        let eps = T::lit(c.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv -= step_size * *mv / ((*vv * inv_bc2).sqrt() + eps);
            }
        }
    }

    /// Moment tensors as a named store (for checkpoints).
    pub fn state(&self, names: &[String]) -> ParamStore<T> {
        let mut s = ParamStore::new();
        for (i, n) in names.iter().enumerate() {
            if let (Some(m), Some(v)) = (self.m.get(i), self.v.get(i)) {
                s.add(format!("m.{n}"), m.clone());
                s.add(format!("v.{n}"), v.clone());
            }
        }
        s
    }

    pub fn restore(config: AdamConfig, step: u64, state: &HashMap<String, Tensor<T>>, names: &[String]) -> Result<Self> {
        let mut opt = Adam::new(config);
        opt.step = step;
        if step == 0 {
            return Ok(opt);
        }
        for n in names {
            let get = |k: String| {
                state
                    .get(&k)
                    .cloned()
                    .ok_or_else(|| Error::format("optimizer state", format!("missing {k}")))
            };
            opt.m.push(get(format!("m.{n}"))?);
            opt.v.push(get(format!("v.{n}"))?);
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut params = vec![Tensor::from_vec(&[2], vec![3.0f64, -2.0])];
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            ..Default::default()
        });
        for _ in 0..2000 {
            let grads = vec![params[0].map(|v| 2.0 * (v - 1.0))];
            opt.step(&mut params, &grads);
        }
        for &v in params[0].data() {
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn safetensors_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        store.add("a", he_normal(&mut rng, &[3, 2, 3, 3], 18));
        store.add("b", Tensor::from_vec(&[2], vec![0.5, -0.25]));
        let bytes = store.to_safetensors().unwrap();
        let mut other = store.clone();
        for v in other.values_mut() {
            v.data_mut().fill(0.0);
        }
        other.load_from_bytes(&bytes).unwrap();
        assert_eq!(other.values(), store.values());

        let mut wrong = ParamStore::<f32>::new();
        wrong.add("a", Tensor::zeros(&[1]));
        assert!(wrong.load_from_bytes(&bytes).is_err());
    }
}

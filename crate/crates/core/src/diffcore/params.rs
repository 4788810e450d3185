use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Tensor};
use crate::binio::{self, Reader};
use crate::error::{Error, Result};

const MVP_MAGIC: &[u8; 4] = b"MVP1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    m: Vec<S>,
    v: Vec<S>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Named parameters in insertion order, with gradients and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    index: BTreeMap<String, ParamId>,
    steps: u64,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<S>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::param(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.params.len());
        let n = value.numel();
        self.params.push(Param {
            name: name.to_string(),
            grad: Tensor::zeros(value.shape()),
            value,
            m: vec![S::zero(); n],
            v: vec![S::zero(); n],
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].grad
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = S::zero());
        }
    }

    /// Name of the first parameter with a non-finite gradient.
    pub fn non_finite_grad(&self) -> Option<&str> {
        self.params
            .iter()
            .find(|p| !p.grad.all_finite())
            .map(|p| p.name.as_str())
    }

    /// One bias-corrected Adam update of every parameter whose name passes
    /// `filter`, in store order.
    pub fn adam_step_filtered(&mut self, cfg: &AdamConfig, filter: impl Fn(&str) -> bool) {
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (S::of(cfg.beta1), S::of(cfg.beta2));
        let c1 = S::of(1.0 - cfg.beta1.powi(t));
        let c2 = S::of(1.0 - cfg.beta2.powi(t));
        let (lr, eps) = (S::of(cfg.lr), S::of(cfg.eps));
        let one = S::one();
        for p in &mut self.params {
            if !filter(&p.name) {
                continue;
            }
            let g = p.grad.data();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                p.m[i] = b1 * p.m[i] + (one - b1) * g[i];
                p.v[i] = b2 * p.v[i] + (one - b2) * g[i] * g[i];
                let mh = p.m[i] / c1;
                let vh = p.v[i] / c2;
                w[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }

    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.adam_step_filtered(cfg, |_| true);
    }

    /// Same parameters at another precision; moments reset.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(&p.name, p.value.cast()).expect("names unique");
        }
        out
    }

    /// `MVP1`, count, then per parameter: name length, UTF-8 name, rank,
    /// dims, f32 payload (all little-endian).
    pub fn to_mvp_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MVP_MAGIC);
        binio::put_u32(&mut buf, self.params.len() as u32);
        for p in &self.params {
            binio::put_u32(&mut buf, p.name.len() as u32);
            buf.extend_from_slice(p.name.as_bytes());
            binio::put_u32(&mut buf, p.value.rank() as u32);
            for &d in p.value.shape() {
                binio::put_u32(&mut buf, d as u32);
            }
            binio::put_f32s(&mut buf, p.value.data().iter().map(|v| v.as_f64() as f32));
        }
        buf
    }

    pub fn from_mvp_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        r.magic(MVP_MAGIC)?;
        let count = r.u32()? as usize;
        let mut store = Self::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::param(format!("{}: parameter name is not UTF-8", path.display())))?
                .to_string();
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape.iter().product();
            let vals = r.f32s(n)?;
            store.add(&name, Tensor::new(shape, vals.into_iter().map(|v| S::of(v as f64)).collect())?)?;
        }
        r.finish()?;
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_mvp_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_mvp_bytes(&binio::read_file(path)?, path)
    }

    /// Overwrite values from `other`, matching by name and shape.
    pub fn load_values(&mut self, other: &ParamStore<S>) -> Result<()> {
        for p in &mut self.params {
            let id = other
                .id(&p.name)
                .ok_or_else(|| Error::param(format!("checkpoint lacks parameter `{}`", p.name)))?;
            let src = other.value(id);
            if src.shape() != p.value.shape() {
                return Err(Error::param(format!(
                    "parameter `{}` has shape {:?} in checkpoint, {:?} in model",
                    p.name,
                    src.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.clone();
        }
        Ok(())
    }
}

/// Uniform Xavier initialisation for a tensor with the given fan-in and
/// fan-out.
pub fn xavier_uniform<S: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::of(rng.gen_range(-a..a))).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

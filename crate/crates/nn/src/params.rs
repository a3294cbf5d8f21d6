use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

/// A named trainable tensor with its Adam moments.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Option<Vec<f64>>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub frozen: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(0);

/// Ordered collection of named parameters plus optimizer state.
///
/// Every store carries an identity (kept by clones) so that one graph can
/// read parameters from several stores without mixing them up.
#[derive(Clone, Debug)]
pub struct ParamStore {
    id: u64,
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(NnError::DuplicateParam(name.to_string()));
        }
        let n = value.len();
        self.index.insert(name.to_string(), self.params.len());
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: None,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            frozen: false,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn by_index(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.index_of(name)
            .map(|i| &self.params[i])
            .ok_or_else(|| NnError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        match self.index_of(name) {
            Some(i) => Ok(&mut self.params[i]),
            None => Err(NnError::UnknownParam(name.to_string())),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub(crate) fn add_grad(&mut self, idx: usize, g: &[f64]) {
        let p = &mut self.params[idx];
        if p.frozen {
            return;
        }
        match &mut p.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => p.grad = Some(g.to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    pub fn set_grad(&mut self, name: &str, g: Vec<f64>) -> Result<()> {
        let p = self.get_mut(name)?;
        if g.len() != p.value.len() {
            return Err(crate::error::shape_err("set_grad", format!("{} values for `{name}`", g.len())));
        }
        p.grad = Some(g);
        Ok(())
    }

    /// Euclidean norm over every populated gradient.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.grad_norm();
        if n > max_norm && n > 0.0 {
            let s = max_norm / n;
            for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
        n
    }

    /// One Adam update with bias correction on every unfrozen parameter.
    /// Every unfrozen parameter must carry a gradient; gradients are
    /// cleared afterwards.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if let Some(p) = self.params.iter().find(|p| !p.frozen && p.grad.is_none()) {
            return Err(NnError::MissingGrad(p.name.clone()));
        }
        for p in self.params.iter_mut().filter(|p| !p.frozen) {
            let g = p.grad.take().expect("checked above");
            p.step += 1;
            let bc1 = 1.0 - cfg.beta1.powi(p.step as i32);
            let bc2 = 1.0 - cfg.beta2.powi(p.step as i32);
            let w = p.value.data_mut();
            for i in 0..w.len() {
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g[i];
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = p.m[i] / bc1;
                let vh = p.v[i] / bc2;
                w[i] -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    pub fn freeze<S: AsRef<str>>(&mut self, names: &[S]) -> Result<()> {
        self.set_frozen(names, true)
    }

    pub fn unfreeze<S: AsRef<str>>(&mut self, names: &[S]) -> Result<()> {
        self.set_frozen(names, false)
    }

    fn set_frozen<S: AsRef<str>>(&mut self, names: &[S], frozen: bool) -> Result<()> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| self.index_of(n.as_ref()).ok_or_else(|| NnError::UnknownParam(n.as_ref().to_string())))
            .collect::<Result<_>>()?;
        for i in idx {
            self.params[i].frozen = frozen;
            if frozen {
                self.params[i].grad = None;
            }
        }
        Ok(())
    }

    pub fn names_with_prefix(&self, prefix: &str) -> Vec<String> {
        self.names().filter(|n| n.starts_with(prefix)).map(str::to_string).collect()
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = true;
            p.grad = None;
        }
    }

    /// SHA-256 over names, shapes, and values of every parameter whose name
    /// starts with `prefix` (all parameters for `""`).
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            h.update([0u8]);
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in p.value.data() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn hash(&self) -> String {
        self.hash_prefix("")
    }

    /// Copies values (not optimizer state) for every name present in both
    /// stores. Shapes must match.
    pub fn copy_values_from(&mut self, other: &ParamStore, map: impl Fn(&str) -> Option<String>) -> Result<usize> {
        let mut n = 0;
        for p in &mut self.params {
            let Some(src_name) = map(&p.name) else { continue };
            let Some(src) = other.index_of(&src_name).map(|i| &other.params[i]) else {
                continue;
            };
            if src.value.shape() != p.value.shape() {
                return Err(crate::error::shape_err(
                    "copy_values_from",
                    format!("`{}` {:?} vs `{}` {:?}", p.name, p.value.shape(), src.name, src.value.shape()),
                ));
            }
            p.value = src.value.clone();
            n += 1;
        }
        Ok(n)
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }
}

/// Weight initialisers. All draw from the caller's RNG so that a seeded RNG
/// gives reproducible parameters.
pub mod init {
    use super::*;

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn fan_in_uniform<R: Rng>(rng: &mut R, fan_in: usize, shape: Vec<usize>) -> Tensor {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::new(shape, data).expect("sized to shape")
    }

    pub fn normal<R: Rng>(rng: &mut R, std: f64, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        Tensor::new(shape, data).expect("sized to shape")
    }

    /// `n × n` orthogonal matrix from modified Gram–Schmidt on a Gaussian
    /// matrix, row-major.
    pub fn orthogonal<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
        loop {
            let mut m: Vec<f64> = (0..n * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let mut ok = true;
            for i in 0..n {
                for k in 0..i {
                    let dot: f64 = (0..n).map(|c| m[i * n + c] * m[k * n + c]).sum();
                    for c in 0..n {
                        m[i * n + c] -= dot * m[k * n + c];
                    }
                }
                let norm: f64 = (0..n).map(|c| m[i * n + c] * m[i * n + c]).sum::<f64>().sqrt();
                if norm < 1e-8 {
                    ok = false;
                    break;
                }
                for c in 0..n {
                    m[i * n + c] /= norm;
                }
            }
            if ok {
                return m;
            }
        }
    }
}

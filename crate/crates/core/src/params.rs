//! Named parameter and buffer storage.
//!
//! Parameters are learned tensors addressed by stable string names; buffers
//! are non-learned tensors (dataset statistics and the like) that ride along
//! in checkpoints. Names sort deterministically, so iteration order is fixed
//! across runs.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

struct Param<S: Scalar> {
    value: Tensor<S>,
    grad: Tensor<S>,
}

pub struct ParamStore<S: Scalar> {
    params: BTreeMap<String, Param<S>>,
    buffers: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    pub fn insert_value(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Contract(format!("parameter {name:?} already registered")));
        }
        let grad = Tensor::zeros(value.dims())?;
        self.params.insert(name.to_string(), Param { value, grad });
        Ok(())
    }

    /// Truncated normal init (resamples outside two standard deviations).
    /// The stream is derived from the seed and the parameter name, so adding
    /// or removing other parameters never shifts this one's draw.
    pub fn init_trunc_normal(&mut self, name: &str, dims: &[usize], std: f64, seed: u64) -> Result<()> {
        let mut rng = rng::stream(seed, &format!("param/{name}"));
        let n: usize = dims.iter().product();
        let data: Vec<S> = (0..n).map(|_| S::lit(rng::truncated_normal(&mut rng, std))).collect();
        self.insert_value(name, Tensor::from_vec(dims, data)?)
    }

    /// Kaiming normal init, std = sqrt(2 / fan_in).
    pub fn init_kaiming(&mut self, name: &str, dims: &[usize], fan_in: usize, seed: u64) -> Result<()> {
        let std = (2.0 / fan_in as f64).sqrt();
        let mut rng = rng::stream(seed, &format!("param/{name}"));
        let n: usize = dims.iter().product();
        let data: Vec<S> = (0..n).map(|_| S::lit(rng::normal(&mut rng, std))).collect();
        self.insert_value(name, Tensor::from_vec(dims, data)?)
    }

    pub fn init_zeros(&mut self, name: &str, dims: &[usize]) -> Result<()> {
        self.insert_value(name, Tensor::zeros(dims)?)
    }

    pub fn init_ones(&mut self, name: &str, dims: &[usize]) -> Result<()> {
        self.insert_value(name, Tensor::filled(dims, S::one())?)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<S>> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn set_value(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
        if p.value.dims() != value.dims() {
            return Err(Error::shape(
                "set_value",
                format!("{name:?}: stored {:?}, new {:?}", p.value.dims(), value.dims()),
            ));
        }
        p.value = value;
        Ok(())
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<S>> {
        self.params
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor<S>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))?;
        if p.value.dims() != grad.dims() {
            return Err(Error::shape(
                "set_grad",
                format!("{name:?}: value {:?}, grad {:?}", p.value.dims(), grad.dims()),
            ));
        }
        p.grad = grad;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = Tensor::zeros(p.value.dims()).unwrap();
        }
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Snapshot of (name, value, grad) triples in name order.
    pub fn entries(&self) -> Vec<(&str, &Tensor<S>, &Tensor<S>)> {
        self.params.iter().map(|(n, p)| (n.as_str(), &p.value, &p.grad)).collect()
    }

    // ---- buffers ----

    pub fn insert_buffer(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        if self.buffers.contains_key(name) {
            return Err(Error::Contract(format!("buffer {name:?} already registered")));
        }
        self.buffers.insert(name.to_string(), value);
        Ok(())
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<S>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown buffer {name:?}")))
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor<S>) -> Result<()> {
        let b = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown buffer {name:?}")))?;
        if b.dims() != value.dims() {
            return Err(Error::shape(
                "set_buffer",
                format!("{name:?}: stored {:?}, new {:?}", b.dims(), value.dims()),
            ));
        }
        *b = value;
        Ok(())
    }

    pub fn has_buffer(&self, name: &str) -> bool {
        self.buffers.contains_key(name)
    }

    pub fn buffer_names(&self) -> impl Iterator<Item = &str> {
        self.buffers.keys().map(|s| s.as_str())
    }

    /// All tensors in checkpoint order: parameters first, then buffers,
    /// each group sorted by name.
    pub fn checkpoint_entries(&self) -> Vec<(String, &Tensor<S>)> {
        let mut out: Vec<(String, &Tensor<S>)> =
            self.params.iter().map(|(n, p)| (n.clone(), &p.value)).collect();
        out.extend(self.buffers.iter().map(|(n, t)| (n.clone(), t)));
        out
    }

    /// Casts every parameter and buffer to another scalar type.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (n, p) in &self.params {
            out.insert_value(n, p.value.cast::<T>()).unwrap();
        }
        for (n, t) in &self.buffers {
            out.insert_buffer(n, t.cast::<T>()).unwrap();
        }
        out
    }
}

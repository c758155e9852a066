//! Named model parameters and seeded initializers.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct Parameter<T = f32> {
    pub id: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    pub trainable: bool,
}

impl<T: Element> Parameter<T> {
    /// Adds `g` into the gradient buffer. Frozen parameters ignore it.
    pub fn accumulate_grad(&mut self, g: &Tensor<T>) -> Result<()> {
        if !self.trainable {
            return Ok(());
        }
        if g.shape() != self.value.shape() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("{}: grad {:?} for value {:?}", self.id, g.shape(), self.value.shape()),
            ));
        }
        match &mut self.grad {
            Some(acc) => acc.add_assign(g),
            None => self.grad = Some(g.clone()),
        }
        Ok(())
    }
}

/// Ordered parameter registry. Iteration order is lexicographic by name,
/// which fixes the order of optimizer updates and checkpoint entries.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T = f32> {
    params: BTreeMap<String, Parameter<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, id: impl Into<String>, value: Tensor<T>) {
        let id = id.into();
        self.params.insert(id.clone(), Parameter { id, value, grad: None, trainable: true });
    }

    pub fn get(&self, id: &str) -> Result<&Parameter<T>> {
        self.params.get(id).ok_or_else(|| Error::UnknownParameter(id.to_string()))
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut Parameter<T>> {
        self.params.get_mut(id).ok_or_else(|| Error::UnknownParameter(id.to_string()))
    }

    pub fn value(&self, id: &str) -> Result<&Tensor<T>> {
        Ok(&self.get(id)?.value)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.params.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.values().filter(|p| p.trainable)
    }

    pub fn set_trainable_where(&mut self, mut pred: impl FnMut(&str) -> Option<bool>) {
        for p in self.params.values_mut() {
            if let Some(flag) = pred(&p.id) {
                p.trainable = flag;
                if !flag {
                    p.grad = None;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Parameter {
                            id: p.id.clone(),
                            value: p.value.cast(),
                            grad: p.grad.as_ref().map(Tensor::cast),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Truncated normal at ±2σ via rejection.
pub fn trunc_normal<T: Element>(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break T::from_f64_lossy(v);
        }
    })
}

/// He-uniform: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn kaiming_uniform<T: Element>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..=bound)))
}

/// Creates named parameters with the standard initializers from one seeded stream.
/// Creation order fixes the random draws, so callers must register layers in
/// a stable order.
pub struct Initializer<'a, T: Element> {
    pub store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Element> Initializer<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Initializer { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// `{name}.weight [din, dout]` trunc-normal(0.02), `{name}.bias` zeros.
    pub fn linear(&mut self, name: &str, din: usize, dout: usize) {
        let w = trunc_normal(&[din, dout], 0.02, &mut self.rng);
        self.store.insert(format!("{name}.weight"), w);
        self.store.insert(format!("{name}.bias"), Tensor::zeros(&[dout]));
    }

    /// `{name}.weight [cout, cin, k, k]` He-uniform, `{name}.bias` zeros.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let w = kaiming_uniform(&[cout, cin, k, k], cin * k * k, &mut self.rng);
        self.store.insert(format!("{name}.weight"), w);
        self.store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
    }

    /// Transposed-conv weight `[cin, cout, k, k]`.
    pub fn deconv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let w = kaiming_uniform(&[cin, cout, k, k], cin, &mut self.rng);
        self.store.insert(format!("{name}.weight"), w);
        self.store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
    }

    /// Affine norm parameters: weight ones, bias zeros.
    pub fn norm(&mut self, name: &str, c: usize) {
        self.store.insert(format!("{name}.weight"), Tensor::ones(&[c]));
        self.store.insert(format!("{name}.bias"), Tensor::zeros(&[c]));
    }

    pub fn trunc_normal(&mut self, name: &str, shape: &[usize]) {
        let v = trunc_normal(shape, 0.02, &mut self.rng);
        self.store.insert(name, v);
    }
}

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{Scalar, Tensor};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameters with gradient accumulators.
///
/// The `tag` distinguishes stores on a shared tape (denoiser vs. garment
/// encoder); two stores built by the same model constructor have identical
/// names and ids, only their values differ.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<E> {
    tag: u32,
    names: Vec<String>,
    values: Vec<Tensor<E>>,
    grads: Vec<Vec<E>>,
}

impl<E: Scalar> ParamStore<E> {
    pub fn new(tag: u32) -> Self {
        Self {
            tag,
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn tag(&self) -> u32 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.grads.push(vec![E::ZERO; value.numel()]);
        self.values.push(value);
        self.names.push(name);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &Tensor<E> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[E] {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [E] {
        &mut self.grads[id.0]
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = E::ZERO);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        libm::sqrt(
            self.grads
                .iter()
                .flatten()
                .map(|g| g.to_f64() * g.to_f64())
                .sum(),
        )
    }

    /// Add uniform noise in `[-bound, bound]` to every value, so zero-initialized
    /// projections stop masking the paths behind them.
    pub fn jitter<R: rand::Rng>(&mut self, bound: f64, rng: &mut R) {
        for v in &mut self.values {
            for x in v.data_mut() {
                *x = E::from_f64(x.to_f64() + rng.random_range(-bound..=bound));
            }
        }
    }

    /// Deep copy under a different tag.
    pub fn clone_with_tag(&self, tag: u32) -> Self {
        let mut out = self.clone();
        out.tag = tag;
        out.zero_grad();
        out
    }

    pub fn cast<F: Scalar>(&self) -> ParamStore<F> {
        ParamStore {
            tag: self.tag,
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: self
                .grads
                .iter()
                .map(|g| g.iter().map(|v| F::from_f64(v.to_f64())).collect())
                .collect(),
        }
    }

    /// True when both stores have the same names and shapes in the same order.
    pub fn same_layout(&self, other: &Self) -> bool {
        self.names == other.names
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}

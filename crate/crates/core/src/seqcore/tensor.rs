use std::collections::BTreeMap;

use ndarray::Array2;

use super::tape::{Gradients, Tape, Var};
use super::Real;
use crate::error::{Error, Result};

/// Named trainable tensor with an optional gradient slot.
///
/// Storage is always a matrix: the last extent is the column count and the
/// leading extents are flattened into rows, so a `k×d_in×d_out` kernel is
/// held as `(k·d_in)×d_out` and a length-`n` vector as `1×n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Real = f32> {
    shape: Vec<usize>,
    value: Array2<F>,
    grad: Option<Array2<F>>,
}

pub(crate) fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        None => (1, 1),
        Some((&cols, lead)) => (lead.iter().product(), cols),
    }
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), value: Array2::zeros(matrix_dims(shape)), grad: None }
    }

    pub fn from_matrix(shape: &[usize], value: Array2<F>) -> Result<Self> {
        if matrix_dims(shape) != value.dim() {
            return Err(Error::dim("Tensor", format!("shape {shape:?} vs storage {:?}", value.dim())));
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor values".into()));
        }
        Ok(Self { shape: shape.to_vec(), value, grad: None })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn value(&self) -> &Array2<F> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Array2<F> {
        &mut self.value
    }

    pub fn grad(&self) -> Option<&Array2<F>> {
        self.grad.as_ref()
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub(crate) fn value_and_grad_mut(&mut self) -> (&mut Array2<F>, Option<&mut Array2<F>>) {
        (&mut self.value, self.grad.as_mut())
    }
}

pub type GradMap<F> = BTreeMap<String, Array2<F>>;

/// Flat, name-ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F: Real = f32> {
    tensors: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.tensors.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        self.tensors.get_mut(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<F>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors.values_mut() {
            t.grad = None;
        }
    }

    /// Adds `scale · g` into each named gradient slot.
    pub fn accumulate(&mut self, grads: GradMap<F>, scale: F) -> Result<()> {
        for (name, g) in grads {
            let t = self.get_mut(&name)?;
            if g.dim() != t.value.dim() {
                return Err(Error::dim("accumulate", format!("{name}: {:?} vs {:?}", g.dim(), t.value.dim())));
            }
            match &mut t.grad {
                Some(acc) => acc.scaled_add(scale, &g),
                slot @ None => *slot = Some(g.mapv(|v| v * scale)),
            }
        }
        Ok(())
    }

    /// Global L2 norm over all present gradient slots.
    pub fn grad_norm(&self) -> F {
        self.tensors
            .values()
            .filter_map(|t| t.grad.as_ref())
            .flat_map(|g| g.iter())
            .fold(F::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        let conv = |a: &Array2<F>| a.mapv(|v| G::from(v).expect("representable"));
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, t)| {
                    (k.clone(), Tensor { shape: t.shape.clone(), value: conv(&t.value), grad: t.grad.as_ref().map(conv) })
                })
                .collect(),
        }
    }
}

/// Lazily places parameters on a tape, one leaf per name, and maps the
/// resulting leaf gradients back to parameter names.
pub struct Binder<'p, F: Real> {
    store: &'p ParamStore<F>,
    bound: BTreeMap<&'p str, Var>,
}

impl<'p, F: Real> Binder<'p, F> {
    pub fn new(store: &'p ParamStore<F>) -> Self {
        Self { store, bound: BTreeMap::new() }
    }

    pub fn get(&mut self, tape: &mut Tape<'p, F>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let (key, tensor) = self
            .store
            .tensors
            .get_key_value(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        let v = tape.param(&tensor.value);
        self.bound.insert(key.as_str(), v);
        Ok(v)
    }

    pub fn gradients(&self, grads: &mut Gradients<F>) -> GradMap<F> {
        self.bound
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|g| (name.to_string(), g)))
            .collect()
    }
}

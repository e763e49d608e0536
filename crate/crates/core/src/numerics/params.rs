use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Gradients, Tape, Var};
use super::tensor::{Scalar, Tensor};
use super::NumericsError;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Scalar = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, mut t: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(self.id(&name).is_none(), "duplicate parameter {name}");
        t.requires_grad = true;
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
        self.insert(name, Tensor::new(shape, data).expect("finite init"))
    }

    pub fn constant(&mut self, name: &str, shape: Vec<usize>, value: f64) -> ParamId {
        let n: usize = shape.iter().product();
        self.insert(name, Tensor::new(shape, vec![T::from_f64(value); n]).expect("finite init"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor<T>, NumericsError> {
        self.id(name).map(|id| self.get(id)).ok_or_else(|| NumericsError::UnknownParam(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Registers every parameter as a leaf on `tape`, returning vars indexed by `ParamId`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t)).collect()
    }

    /// Moves gradients of bound leaves into the tensors' grad buffers,
    /// accumulating onto any existing gradient.
    pub fn accumulate_grads(&mut self, vars: &[Var], grads: &mut Gradients<T>) -> Result<(), NumericsError> {
        for (t, &v) in self.tensors.iter_mut().zip(vars) {
            let Some(g) = grads.take(v) else { continue };
            match t.take_grad() {
                Some(mut prev) => {
                    for (p, x) in prev.iter_mut().zip(&g) {
                        *p += *x;
                    }
                    t.set_grad(prev)?;
                }
                None => t.set_grad(g)?,
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.clear_grad();
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), tensors: self.tensors.iter().map(|t| t.cast()).collect() }
    }
}

//! Named, ordered parameter storage.

use crate::error::{shape_err, Result};
use crate::numerics::{RngStream, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Whether weight decay applies (matrices yes, biases and norms no).
    pub decay: bool,
}

/// Parameters in a fixed registration order. The order is the layout of
/// gradients, optimizer moments and checkpoint payloads.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>, decay: bool) -> ParamId {
        self.params.push(Param { name: name.into(), value, decay });
        ParamId(self.params.len() - 1)
    }

    /// Truncated-normal matrix (|w| <= 2 std) registered with weight decay.
    pub fn push_weight(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut RngStream) -> ParamId {
        let value = Tensor::from_fn(shape, |_| T::cast(rng.truncated_normal(std, 2.0)));
        self.push(name, value, true)
    }

    pub fn push_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.push(name, Tensor::full(shape, T::cast(value)), false)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    /// Place every parameter on the tape, in store order.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone(), requires_grad)).collect()
    }

    /// Gradients for the bound vars, zero where the loss did not reach.
    pub fn grads(&self, tape: &mut Tape<T>, vars: &[Var]) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(vars)
            .map(|(p, &v)| tape.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect()
    }

    /// Copy values from `other` for every parameter whose name and shape match.
    /// Returns the number of parameters copied.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(src) = other.find(&p.name) {
                if src.value.shape() == p.value.shape() {
                    p.value = src.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Replace all values, checking names and shapes.
    pub fn set_values(&mut self, values: Vec<Tensor<T>>) -> Result<()> {
        if values.len() != self.params.len() {
            return shape_err("set_values", format!("{} tensors for {} params", values.len(), self.params.len()));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return shape_err("set_values", format!("{}: {:?} vs {:?}", p.name, p.value.shape(), v.shape()));
            }
            p.value = v;
        }
        Ok(())
    }
}

use ndarray::{ArrayView2, ArrayViewMut2};
use rand::Rng;

use super::Real;
use crate::error::{AceError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// One named learnable tensor, stored flat in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    fn rows_cols(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => (s[0], s[1..].iter().product()),
        }
    }
}

/// All learnable tensors of a model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    pub step_count: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            step_count: 0,
        }
    }

    /// Registers a tensor; names must be unique.
    pub fn add(&mut self, name: &str, shape: &[usize], value: Vec<T>) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "{name}: shape mismatch"
        );
        let grad = vec![T::zero(); value.len()];
        self.params.push(Param {
            name: name.to_string(),
            shape: shape.to_vec(),
            value,
            grad,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n = shape.iter().product();
        self.add(name, shape, vec![T::zero(); n])
    }

    /// Uniform in `±sqrt(1 / fan_in)`.
    pub fn uniform<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (1.0 / fan_in.max(1) as f64).sqrt();
        let n = shape.iter().product();
        let value = (0..n)
            .map(|_| T::lit(rng.gen_range(-bound..bound)))
            .collect();
        self.add(name, shape, value)
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].grad
    }

    /// The tensor viewed as a matrix; vectors are a single row.
    pub fn matrix(&self, id: ParamId) -> ArrayView2<'_, T> {
        let p = &self.params[id.0];
        ArrayView2::from_shape(p.rows_cols(), &p.value).expect("contiguous parameter")
    }

    pub fn grad_matrix_mut(&mut self, id: ParamId) -> ArrayViewMut2<'_, T> {
        let p = &mut self.params[id.0];
        let shape = p.rows_cols();
        ArrayViewMut2::from_shape(shape, &mut p.grad).expect("contiguous parameter")
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn grads_finite(&self) -> Result<()> {
        for p in &self.params {
            if let Some(i) = p.grad.iter().position(|g| !g.is_finite()) {
                return Err(AceError::Divergence(format!(
                    "non-finite gradient {} in {}[{i}]",
                    p.grad[i], p.name
                )));
            }
        }
        Ok(())
    }

    pub fn check_same_structure<U: Real>(&self, other: &ParamStore<U>) -> Result<()> {
        if self.params.len() != other.params.len() {
            return Err(AceError::StructureMismatch(format!(
                "{} vs {} tensors",
                self.params.len(),
                other.params.len()
            )));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.shape != b.shape {
                return Err(AceError::StructureMismatch(format!(
                    "{}{:?} vs {}{:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        Ok(())
    }

    /// Copies the store into another precision; gradients are reset.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p
                        .value
                        .iter()
                        .map(|v| U::lit(v.to_f64().unwrap()))
                        .collect(),
                    grad: vec![U::zero(); p.value.len()],
                })
                .collect(),
            step_count: self.step_count,
        }
    }

    /// Flat position `(tensor, element)` of the `k`-th scalar.
    pub fn locate(&self, mut k: usize) -> Option<(ParamId, usize)> {
        for (i, p) in self.params.iter().enumerate() {
            if k < p.len() {
                return Some((ParamId(i), k));
            }
            k -= p.len();
        }
        None
    }
}

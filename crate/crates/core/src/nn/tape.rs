//! Reverse-mode gradient tape.
//!
//! Every operation appends its forward value to the tape. When at least one
//! input requires a gradient, the operation also registers a backward closure
//! that receives the upstream gradient and accumulates into its inputs.
//! Subgraphs that depend only on constants or frozen parameters record no
//! closures, so evaluation and frozen layers cost a forward pass only.

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type BackwardFn = Box<dyn Fn(&[f64], &[Tensor], &mut GradStore)>;

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    requires: Vec<bool>,
    backward: Vec<Option<BackwardFn>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.values.push(value);
        self.requires.push(requires_grad);
        self.backward.push(None);
        Var(self.values.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Records the result of an operation.
    ///
    /// The closure receives the gradient of the output, every value on the
    /// tape, and the gradient store. It is dropped without being stored when
    /// no parent requires a gradient.
    pub fn push<F>(&mut self, value: Tensor, parents: &[Var], backward: F) -> Var
    where
        F: Fn(&[f64], &[Tensor], &mut GradStore) + 'static,
    {
        let requires = parents.iter().any(|p| self.requires[p.0]);
        self.values.push(value);
        self.requires.push(requires);
        self.backward
            .push(if requires { Some(Box::new(backward)) } else { None });
        Var(self.values.len() - 1)
    }

    /// Back-propagates from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.values[output.0].len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.values[output.0].shape().to_vec(),
                rhs: vec![1],
            });
        }
        let mut store = GradStore {
            grads: vec![None; self.values.len()],
            requires: self.requires.clone(),
            lens: self.values.iter().map(Tensor::len).collect(),
        };
        if !self.requires[output.0] {
            return Ok(Gradients { grads: store.grads });
        }
        store.grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(bw) = &self.backward[i] else {
                continue;
            };
            if let Some(g) = store.grads[i].take() {
                bw(&g, &self.values, &mut store);
            }
        }
        Ok(Gradients { grads: store.grads })
    }
}

/// Gradient accumulators used while walking the tape backwards.
pub struct GradStore {
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    lens: Vec<usize>,
}

impl GradStore {
    pub fn wants(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Zero-initialised accumulator for `v`.
    pub fn slot(&mut self, v: Var) -> &mut [f64] {
        let len = self.lens[v.0];
        self.grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }
}

/// Gradients of leaf values after [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed)
}

/// A dense learnable tensor with its gradient accumulator.
///
/// `node_id` is unique per process and is how a [`Tape`](super::Tape) maps a
/// recorded leaf back to the parameter it came from.
#[derive(Debug)]
pub struct ParamTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    node_id: u64,
}

impl Clone for ParamTensor {
    /// Clones get a new identity; they are distinct parameters.
    fn clone(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
            grad: self.grad.clone(),
            requires_grad: self.requires_grad,
            node_id: fresh_id(),
        }
    }
}

impl ParamTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            )));
        }
        Ok(Self {
            grad: vec![0.0; numel],
            shape,
            data,
            requires_grad: true,
            node_id: fresh_id(),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel]).expect("numel matches by construction")
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("numel matches by construction")
    }

    pub fn frozen(mut self) -> Self {
        self.requires_grad = false;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node_id(&self) -> u64 {
        self.node_id
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// Adds `g` into the gradient slot.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.grad.len() {
            return Err(Error::shape(format!(
                "gradient of length {} for parameter of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        for (acc, v) in self.grad.iter_mut().zip(g) {
            *acc += v;
        }
        Ok(())
    }

    /// Overwrites values, keeping identity and gradient.
    pub fn set_data(&mut self, data: &[f64]) -> Result<()> {
        if data.len() != self.data.len() {
            return Err(Error::shape(format!(
                "cannot load {} values into parameter of shape {:?}",
                data.len(),
                self.shape
            )));
        }
        self.data.copy_from_slice(data);
        Ok(())
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        &mut self.grad
    }
}

/// A named collection of parameters that can be walked in a fixed order.
///
/// The order must be stable: optimizers, checkpoints and gradient checks
/// all rely on it.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &ParamTensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut ParamTensor));

    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, p| n += p.numel());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_mut(&mut |_, p| p.zero_grad());
    }
}

impl Parameters for Vec<ParamTensor> {
    fn visit(&self, f: &mut dyn FnMut(&str, &ParamTensor)) {
        for (i, p) in self.iter().enumerate() {
            f(&i.to_string(), p);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        for (i, p) in self.iter_mut().enumerate() {
            f(&i.to_string(), p);
        }
    }
}

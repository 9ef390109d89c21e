//! Named trainable tensors and their initializers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::numerics::{Tape, Tensor, Var};

/// A named model tensor. Trainability lives in the tensor's grad flag.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, trainable: bool) -> Self {
        let mut value = value;
        value.set_requires_grad(trainable);
        Parameter {
            name: name.into(),
            value,
        }
    }

    pub fn trainable(&self) -> bool {
        self.value.requires_grad()
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.value.set_requires_grad(flag);
    }

    /// Gaussian entries with the given standard deviation.
    pub fn normal<R: Rng + ?Sized>(name: &str, shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std is finite and positive");
        let data = (0..n).map(|_| dist.sample(rng)).collect();
        let value = Tensor::new(shape, data).expect("gaussian samples are finite");
        Parameter::new(name, value, true)
    }

    /// Glorot-normal weight matrix `[fan_in×fan_out]`.
    pub fn glorot<R: Rng + ?Sized>(name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        Parameter::normal(name, vec![fan_in, fan_out], std, rng)
    }

    pub fn filled(name: &str, shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        let t = Tensor::new(shape, vec![value; n]).expect("fill value is finite");
        Parameter::new(name, t, true)
    }
}

/// Anything that owns an ordered list of parameters.
pub trait Module {
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value.numel()).sum()
    }
}

/// Records every parameter of `module` as a tape leaf, in order.
pub fn bind_leaves<M: Module + ?Sized>(module: &M, tape: &mut Tape) -> Vec<Var> {
    module
        .parameters()
        .into_iter()
        .map(|p| tape.leaf(&p.value))
        .collect()
}

/// Cursor handing out bound vars in parameter order.
pub(crate) struct VarCursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> VarCursor<'a> {
    pub(crate) fn new(vars: &'a [Var]) -> Self {
        VarCursor { vars, pos: 0 }
    }

    pub(crate) fn next_var(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    pub(crate) fn consumed(&self) -> usize {
        self.pos
    }
}

use rand::Rng;

use crate::error::Result;
use crate::param::{Param, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

/// `x W + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear<T: Scalar> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Param::fan_in([input, output], input, rng),
            bias: Param::fan_in([output], input, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(&tape.param(&self.weight))?
            .add_bias(&tape.param(&self.bias))
    }

    pub fn count_params(input: usize, output: usize) -> usize {
        input * output + output
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Two-layer perceptron `Linear -> GELU -> Linear`.
///
/// Used both as the per-token feature-mixing MLP (`d -> d' -> d`) and as
/// the HyperMixer weight generator (`d -> d' -> d'`).
#[derive(Clone, Debug)]
pub struct Mlp<T: Scalar> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn new(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        Mlp {
            fc1: Linear::new(input, hidden, rng),
            fc2: Linear::new(hidden, output, rng),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        let h = self.fc1.forward(tape, x)?.gelu();
        self.fc2.forward(tape, &h)
    }

    pub fn count_params(input: usize, hidden: usize, output: usize) -> usize {
        Linear::<T>::count_params(input, hidden) + Linear::<T>::count_params(hidden, output)
    }
}

impl<T: Scalar> Parameterized<T> for Mlp<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.fc1.visit_params(f);
        self.fc2.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.fc1.visit_params_mut(f);
        self.fc2.visit_params_mut(f);
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<T: Scalar> {
    pub gain: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(d: usize) -> Self {
        LayerNorm {
            gain: Param::full([d], T::one()),
            bias: Param::zeros([d]),
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(&tape.param(&self.gain), &tape.param(&self.bias))
    }
}

impl<T: Scalar> Parameterized<T> for LayerNorm<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.gain);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

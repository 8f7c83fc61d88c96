use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(0);

/// Process-unique identity of a learnable tensor; the tape uses it to bind
/// one leaf per parameter no matter how often a layer reads it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A learnable tensor and its gradient accumulator.
#[derive(Debug)]
pub struct Param<T: Scalar> {
    id: ParamId,
    pub value: Tensor<T>,
    /// Populated by [`Gradients::store_into`](crate::tensor::Gradients::store_into).
    pub grad: Option<Tensor<T>>,
}

impl<T: Scalar> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        Param {
            id: ParamId::fresh(),
            value,
            grad: None,
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::new(Tensor::zeros(shape))
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        Self::new(Tensor::full(shape, value))
    }

    /// Uniform in `(-bound, bound)`.
    pub fn uniform(shape: impl Into<Vec<usize>>, bound: f64, rng: &mut impl Rng) -> Self {
        Self::new(Tensor::from_fn(shape, |_| {
            T::from_f64_lossy(rng.gen_range(-bound..bound))
        }))
    }

    /// Uniform `±1/sqrt(fan_in)` initialisation used for every weight matrix.
    pub fn fan_in(shape: impl Into<Vec<usize>>, fan_in: usize, rng: &mut impl Rng) -> Self {
        Self::uniform(shape, 1.0 / (fan_in.max(1) as f64).sqrt(), rng)
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Clones receive a fresh identity so a copy never aliases its source on a tape.
impl<T: Scalar> Clone for Param<T> {
    fn clone(&self) -> Self {
        Param {
            id: ParamId::fresh(),
            value: self.value.clone(),
            grad: self.grad.clone(),
        }
    }
}

/// Anything that owns parameters, visited in a fixed declaration order.
///
/// The order is part of the checkpoint format and of the optimizer state
/// layout, so implementations must never reorder their fields.
pub trait Parameterized<T: Scalar> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>));

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    /// Number of scalar parameters actually held.
    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |p| p.grad = None);
    }
}

impl<T: Scalar> Parameterized<T> for Param<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(self)
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(self)
    }
}

impl<T: Scalar, P: Parameterized<T>> Parameterized<T> for Option<P> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        if let Some(p) = self {
            p.visit_params(f)
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        if let Some(p) = self {
            p.visit_params_mut(f)
        }
    }
}

impl<T: Scalar, P: Parameterized<T>> Parameterized<T> for Vec<P> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        for p in self {
            p.visit_params(f)
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for p in self {
            p.visit_params_mut(f)
        }
    }
}

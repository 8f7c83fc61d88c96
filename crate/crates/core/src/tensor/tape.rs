use std::cell::{Cell, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::rc::Rc;

use serde::Serialize;

use super::Tensor;
use crate::error::{Error, Result};
use crate::param::{Param, ParamId, Parameterized};
use crate::scalar::Scalar;

/// Category under which an operation's floating-point work is counted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    MatMul,
    Gelu,
    Softmax,
    BiasAdd,
    Elementwise,
    LayerNorm,
    Fourier,
    Reduction,
    Loss,
}

/// Per-kind operation counter attached to every tape.
///
/// Costs follow the unit-cost convention: `exp`, `tanh`, `sqrt` and division
/// each count as one operation, a length-`k` dot product as `2k`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlopCounter {
    counts: BTreeMap<OpKind, u64>,
}

impl FlopCounter {
    pub fn add(&mut self, kind: OpKind, n: u64) {
        *self.counts.entry(kind).or_default() += n;
    }

    pub fn get(&self, kind: OpKind) -> u64 {
        self.counts.get(&kind).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }

    /// Total with bias additions left out, the convention of the closed-form
    /// block costs in [`crate::flops`].
    pub fn bias_free_total(&self) -> u64 {
        self.total() - self.get(OpKind::BiasAdd)
    }

    pub fn iter(&self) -> impl Iterator<Item = (OpKind, u64)> + '_ {
        self.counts.iter().map(|(&k, &v)| (k, v))
    }

    /// Counts accumulated since `earlier` was snapshotted.
    pub fn since(&self, earlier: &FlopCounter) -> FlopCounter {
        let mut out = FlopCounter::default();
        for (k, v) in self.iter() {
            let d = v - earlier.get(k);
            if d > 0 {
                out.add(k, d);
            }
        }
        out
    }
}

/// Returns one gradient per op input; `needs[i]` is false for inputs that
/// are constants, whose slot may then be `None`.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>>>;

struct Node<T: Scalar> {
    inputs: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
}

/// Wengert list for reverse-mode differentiation.
///
/// Operations are recorded in execution order. A tape built with
/// [`Tape::inference`] records nothing and only computes values (and
/// operation counts), which is what the benchmarks use.
pub struct Tape<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<HashMap<ParamId, (Rc<Tensor<T>>, Option<usize>)>>,
    flops: RefCell<FlopCounter>,
    recording: bool,
    faulty_gelu: Cell<bool>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(HashMap::new()),
            flops: RefCell::new(FlopCounter::default()),
            recording: true,
            faulty_gelu: Cell::new(false),
        }
    }

    /// Value-only tape: no nodes, no backward closures.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Negative control for the gradient checker: makes the GELU backward
    /// rule deliberately wrong on this tape.
    pub fn inject_gelu_fault(&self) {
        self.faulty_gelu.set(true);
    }

    pub(crate) fn gelu_fault(&self) -> bool {
        self.faulty_gelu.get()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flops(&self) -> FlopCounter {
        self.flops.borrow().clone()
    }

    pub(crate) fn count(&self, kind: OpKind, n: usize) {
        self.flops.borrow_mut().add(kind, n as u64);
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        Var {
            tape: self,
            value: Rc::new(value),
            node: None,
        }
    }

    /// A free input that does receive a gradient (when recording).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        let node = self.recording.then(|| self.push_node(Vec::new(), None));
        Var {
            tape: self,
            value: Rc::new(value),
            node,
        }
    }

    /// Binds a parameter; repeated calls for the same parameter return the
    /// same leaf so gradients from every use accumulate in one place.
    pub fn param(&self, p: &Param<T>) -> Var<'_, T> {
        if let Some((value, node)) = self.params.borrow().get(&p.id()) {
            return Var {
                tape: self,
                value: value.clone(),
                node: *node,
            };
        }
        let var = self.leaf(p.value.clone());
        self.params
            .borrow_mut()
            .insert(p.id(), (var.value.clone(), var.node));
        var
    }

    fn push_node(&self, inputs: Vec<Option<usize>>, backward: Option<BackwardFn<T>>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { inputs, backward });
        nodes.len() - 1
    }

    /// Wraps an op result, recording it only if some input is tracked.
    pub(crate) fn op(
        &self,
        value: Tensor<T>,
        inputs: &[&Var<'_, T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Vec<Option<Tensor<T>>> + 'static,
    ) -> Var<'_, T> {
        let tracked = self.recording && inputs.iter().any(|v| v.node.is_some());
        let node = tracked.then(|| {
            let ins = inputs.iter().map(|v| v.node).collect();
            self.push_node(ins, Some(Box::new(backward)))
        });
        Var {
            tape: self,
            value: Rc::new(value),
            node,
        }
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        if loss.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        self.backward_seeded(loss, Tensor::ones(loss.value.shape()))
    }

    /// Reverse sweep from any output with an explicit cotangent `seed`
    /// (a vector-Jacobian product). The tape can be swept repeatedly.
    pub fn backward_seeded(&self, output: &Var<'_, T>, seed: Tensor<T>) -> Result<Gradients<T>> {
        if seed.shape() != output.value.shape() {
            return Err(Error::shape(
                "backward_seeded",
                output.value.shape(),
                seed.shape(),
            ));
        }
        let loss = output;
        let nodes = self.nodes.borrow();
        let mut leaf_grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        let Some(root) = loss.node else {
            return Ok(self.gradients(leaf_grads));
        };
        let mut pending: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        pending[root] = Some(seed);
        for i in (0..=root).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &nodes[i];
            let Some(backward) = &node.backward else {
                leaf_grads[i] = Some(g);
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(Option::is_some).collect();
            let input_grads = backward(&g, &needs);
            debug_assert_eq!(input_grads.len(), node.inputs.len());
            for (input, grad) in node.inputs.iter().zip(input_grads) {
                if let (Some(j), Some(grad)) = (*input, grad) {
                    match &mut pending[j] {
                        Some(acc) => acc.add_assign(&grad),
                        slot => *slot = Some(grad),
                    }
                }
            }
        }
        Ok(self.gradients(leaf_grads))
    }

    fn gradients(&self, grads: Vec<Option<Tensor<T>>>) -> Gradients<T> {
        let params = self
            .params
            .borrow()
            .iter()
            .filter_map(|(id, (_, node))| node.map(|n| (*id, n)))
            .collect();
        Gradients { grads, params }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, usize>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf variable; `None` if it was unreachable from the loss.
    pub fn wrt(&self, v: &Var<'_, T>) -> Option<&Tensor<T>> {
        v.node.and_then(|n| self.grads.get(n)).and_then(Option::as_ref)
    }

    pub fn param(&self, p: &Param<T>) -> Option<&Tensor<T>> {
        self.params.get(&p.id()).and_then(|&n| self.grads[n].as_ref())
    }

    /// Writes every reachable parameter gradient into `Param::grad`.
    pub fn store_into(&self, module: &mut (impl Parameterized<T> + ?Sized)) {
        module.visit_params_mut(&mut |p| {
            p.grad = self.param(p).cloned();
        });
    }
}

/// Handle to a value on a tape.
pub struct Var<'t, T: Scalar> {
    pub(crate) tape: &'t Tape<T>,
    pub(crate) value: Rc<Tensor<T>>,
    pub(crate) node: Option<usize>,
}

impl<T: Scalar> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        Var {
            tape: self.tape,
            value: self.value.clone(),
            node: self.node,
        }
    }
}

impl<T: Scalar> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("node", &self.node)
            .field("value", &self.value)
            .finish()
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    pub fn item(&self) -> T {
        self.value.item()
    }

    /// True if both handles refer to the same recorded value.
    pub fn same_as(&self, other: &Var<'_, T>) -> bool {
        Rc::ptr_eq(&self.value, &other.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_loss_is_a_usage_error() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros([2]));
        assert!(matches!(tape.backward(&x), Err(Error::Usage(_))));
    }

    #[test]
    fn inference_tape_records_nothing() {
        let tape = Tape::<f64>::inference();
        let x = tape.leaf(Tensor::ones([2, 2]));
        let y = x.matmul(&x).unwrap();
        assert!(tape.is_empty());
        assert!(!y.requires_grad());
        assert_eq!(tape.flops().get(OpKind::MatMul), 16);
    }

    #[test]
    fn param_binding_is_shared() {
        let tape = Tape::<f64>::new();
        let p = Param::new(Tensor::ones([3]));
        let a = tape.param(&p);
        let b = tape.param(&p);
        assert_eq!(a.node, b.node);
        let loss = a.add(&b).unwrap().sum();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.param(&p).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}

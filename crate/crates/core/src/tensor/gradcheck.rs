//! Central finite-difference check of tape gradients.

use serde::Serialize;

use super::{Tape, Tensor, Var};
use crate::error::Result;
use crate::param::Parameterized;

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error, so gradients
    /// that are exactly zero (a key bias under softmax, say) are compared
    /// against finite-difference round-off rather than against nothing.
    pub scale_floor: f64,
    /// Run the analytic pass with a deliberately wrong GELU backward rule.
    pub inject_fault: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            scale_floor: 1e-6,
            inject_fault: false,
        }
    }
}

/// Result for one parameter tensor, in visit order.
#[derive(Clone, Debug, Serialize)]
pub struct TensorCheck {
    pub index: usize,
    pub len: usize,
    /// `|analytic - numeric| / max(|analytic|, |numeric|, scale_floor)` in the
    /// Euclidean norm.
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Compares the tape gradient of `loss` with respect to every parameter of
/// `module` against central differences of the same loss.
pub fn gradcheck<M, F>(module: &mut M, loss: F, opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    M: Parameterized<f64>,
    F: for<'t> Fn(&'t Tape<f64>, &M) -> Result<Var<'t, f64>>,
{
    let analytic: Vec<Option<Tensor<f64>>> = {
        let tape = Tape::new();
        if opts.inject_fault {
            tape.inject_gelu_fault();
        }
        let l = loss(&tape, module)?;
        let grads = tape.backward(&l)?;
        let mut out = Vec::new();
        module.visit_params(&mut |p| out.push(grads.param(p).cloned()));
        out
    };

    let eval = |m: &M| -> Result<f64> {
        let tape = Tape::inference();
        Ok(loss(&tape, m)?.item())
    };

    let mut tensors = Vec::with_capacity(analytic.len());
    for (index, grad) in analytic.iter().enumerate() {
        let len = nth_len(module, index);
        let mut numeric = vec![0.0; len];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = nudge(module, index, e, None);
            nudge(module, index, e, Some(orig + opts.step));
            let plus = eval(module)?;
            nudge(module, index, e, Some(orig - opts.step));
            let minus = eval(module)?;
            nudge(module, index, e, Some(orig));
            *slot = (plus - minus) / (2.0 * opts.step);
        }
        let zeros = vec![0.0; len];
        let a = grad.as_ref().map_or(&zeros[..], |g| g.data());
        let diff = norm(a.iter().zip(&numeric).map(|(x, y)| x - y));
        let scale = norm(a.iter().copied())
            .max(norm(numeric.iter().copied()))
            .max(opts.scale_floor);
        let rel_error = diff / scale;
        tensors.push(TensorCheck {
            index,
            len,
            rel_error,
        });
    }
    let max_rel_error = tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        tensors,
        max_rel_error,
        tolerance: opts.tolerance,
    })
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

fn nth_len(module: &impl Parameterized<f64>, index: usize) -> usize {
    let mut i = 0;
    let mut len = 0;
    module.visit_params(&mut |p| {
        if i == index {
            len = p.len();
        }
        i += 1;
    });
    len
}

/// Reads element `e` of parameter `index`, optionally overwriting it.
fn nudge(module: &mut impl Parameterized<f64>, index: usize, e: usize, set: Option<f64>) -> f64 {
    let mut i = 0;
    let mut old = 0.0;
    module.visit_params_mut(&mut |p| {
        if i == index {
            old = p.value.data()[e];
            if let Some(v) = set {
                p.value.data_mut()[e] = v;
            }
        }
        i += 1;
    });
    old
}

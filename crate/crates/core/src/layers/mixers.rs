use rand::Rng;

use super::basic::{Linear, Mlp};
use super::spec::{MixingKind, TokenMixingSpec};
use crate::error::{Error, Result};
use crate::param::{Param, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::{Mask, Tape, Tensor, Var};

/// Token-mixing MLP with explicit weights: `W1 GELU(W2^T X)`.
///
/// Column `i` of the result is `W1 GELU(W2^T x_i)` for feature column `x_i`
/// of `X`. Weights are `[N, d']` (shared over the batch) or `[B, N, d']`;
/// `X` is `[B, N, d]`.
pub fn mlp1_forward<'t, T: Scalar>(w1: &Var<'t, T>, w2: &Var<'t, T>, x: &Var<'t, T>) -> Result<Var<'t, T>> {
    if w1.shape() != w2.shape() {
        return Err(Error::shape("mlp1_forward", w1.shape(), w2.shape()));
    }
    let hidden = w2.bmm(x, true, false)?.gelu();
    w1.bmm(&hidden, false, false)
}

/// Hypernetwork MLPs generating the rows of `W1` and `W2` one token at a time.
#[derive(Clone, Debug)]
pub struct HyperMixing<T: Scalar> {
    pub h1: Mlp<T>,
    /// `None` when tied: `W2` is then the very same tensor as `W1`.
    pub h2: Option<Mlp<T>>,
    pub reinject_positions: bool,
    /// Divides `W2` by the square root of the number of valid tokens and the
    /// result by `sqrt(d')`, so generated weights act like fan-in
    /// initialised ones. Without it the mixed output grows with `N`.
    pub fan_in_scaling: bool,
}

impl<T: Scalar> HyperMixing<T> {
    pub fn new(d: usize, d_prime: usize, tied: bool, reinject_positions: bool, rng: &mut impl Rng) -> Self {
        let h1 = Mlp::new(d, d_prime, d_prime, rng);
        let h2 = (!tied).then(|| Mlp::new(d, d_prime, d_prime, rng));
        HyperMixing {
            h1,
            h2,
            reinject_positions,
            fan_in_scaling: true,
        }
    }

    pub fn is_tied(&self) -> bool {
        self.h2.is_none()
    }

    /// Row `j` of `W_i` is `MLP_i(x_j + p_j)`; rows at invalid positions are zeroed.
    pub fn generate<'t>(
        &self,
        tape: &'t Tape<T>,
        x: &Var<'t, T>,
        positions: Option<&Var<'t, T>>,
        mask: &Mask,
    ) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let input = match positions {
            Some(p) => x.add_broadcast(p)?,
            None => x.clone(),
        };
        let w1 = self.h1.forward(tape, &input)?.mask_rows(mask)?;
        let w2 = match &self.h2 {
            Some(h2) => h2.forward(tape, &input)?.mask_rows(mask)?,
            None => w1.clone(),
        };
        Ok((w1, w2))
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        x: &Var<'t, T>,
        mask: &Mask,
        positions: Option<&Tensor<T>>,
    ) -> Result<Var<'t, T>> {
        let p = match (self.reinject_positions, positions) {
            (true, Some(p)) => Some(tape.constant(p.clone())),
            _ => None,
        };
        let (w1, w2) = self.generate(tape, x, p.as_ref(), mask)?;
        if !self.fan_in_scaling {
            return mlp1_forward(&w1, &w2, x);
        }
        let [b, n, dp] = [w2.shape()[0], w2.shape()[1], w2.shape()[2]];
        let per_row: Vec<T> = (0..b)
            .map(|r| T::from_f64_lossy(1.0 / (mask.count(r).max(1) as f64).sqrt()))
            .collect();
        let factors = Tensor::from_fn([b, n, dp], |i| per_row[i / (n * dp)]);
        let w2 = w2.mul(&tape.constant(factors))?;
        Ok(mlp1_forward(&w1, &w2, x)?.scale(1.0 / (dp as f64).sqrt()))
    }
}

impl<T: Scalar> Parameterized<T> for HyperMixing<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.h1.visit_params(f);
        self.h2.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.h1.visit_params_mut(f);
        self.h2.visit_params_mut(f);
    }
}

/// MLPMixer token mixing with learned `[n_max, d']` weight matrices.
#[derive(Clone, Debug)]
pub struct MlpMixing<T: Scalar> {
    pub w1: Param<T>,
    pub w2: Param<T>,
    pub n_max: usize,
}

impl<T: Scalar> MlpMixing<T> {
    pub fn new(n_max: usize, d_prime: usize, rng: &mut impl Rng) -> Self {
        MlpMixing {
            w1: Param::fan_in([n_max, d_prime], d_prime, rng),
            w2: Param::fan_in([n_max, d_prime], n_max, rng),
            n_max,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>, mask: &Mask) -> Result<Var<'t, T>> {
        let n = check_capacity("mlpmixer", x, self.n_max)?;
        let dp = self.w1.value.cols();
        let w1 = tape.param(&self.w1).block(0..n, 0..dp)?;
        let w2 = tape.param(&self.w2).block(0..n, 0..dp)?;
        mlp1_forward(&w1, &w2, &x.mask_rows(mask)?)?.mask_rows(mask)
    }
}

impl<T: Scalar> Parameterized<T> for MlpMixing<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.w1);
        f(&self.w2);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.w1);
        f(&mut self.w2);
    }
}

/// gMLP spatial gating unit: `V (Z1 * (T Z2 + b))` with `Z = GELU(U x)`.
#[derive(Clone, Debug)]
pub struct GmlpMixing<T: Scalar> {
    pub proj_in: Linear<T>,
    /// `[n_max, n_max]` position-interaction matrix, initialised near zero.
    pub spatial: Param<T>,
    /// Per-position gate bias, initialised at one.
    pub gate_bias: Param<T>,
    pub proj_out: Linear<T>,
    pub n_max: usize,
}

/// Half-width of the uniform initialisation of the gMLP spatial matrix.
pub const GMLP_SPATIAL_INIT: f64 = 1e-3;

impl<T: Scalar> GmlpMixing<T> {
    pub fn new(d: usize, d_prime: usize, n_max: usize, rng: &mut impl Rng) -> Self {
        GmlpMixing {
            proj_in: Linear::new(d, d_prime, rng),
            spatial: Param::uniform([n_max, n_max], GMLP_SPATIAL_INIT, rng),
            gate_bias: Param::full([n_max], T::one()),
            proj_out: Linear::new(d_prime / 2, d, rng),
            n_max,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>, mask: &Mask) -> Result<Var<'t, T>> {
        let n = check_capacity("gmlp", x, self.n_max)?;
        let z = self.proj_in.forward(tape, x)?.gelu();
        let half = z.value().cols() / 2;
        let z1 = z.narrow_last(0, half)?;
        let z2 = z.narrow_last(half, half)?.mask_rows(mask)?;
        let spatial = tape.param(&self.spatial).block(0..n, 0..n)?;
        let bias = tape
            .param(&self.gate_bias)
            .reshape([self.n_max, 1])?
            .block(0..n, 0..1)?
            .matmul(&tape.constant(Tensor::ones([1, half])))?;
        let gate = spatial.bmm(&z2, false, false)?.add_broadcast(&bias)?;
        self.proj_out.forward(tape, &z1.mul(&gate)?)?.mask_rows(mask)
    }
}

impl<T: Scalar> Parameterized<T> for GmlpMixing<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.proj_in.visit_params(f);
        f(&self.spatial);
        f(&self.gate_bias);
        self.proj_out.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.proj_in.visit_params_mut(f);
        f(&mut self.spatial);
        f(&mut self.gate_bias);
        self.proj_out.visit_params_mut(f);
    }
}

/// Multi-head scaled dot-product self-attention with key padding mask.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention<T: Scalar> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
    pub heads: usize,
}

impl<T: Scalar> MultiHeadAttention<T> {
    pub fn new(d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        MultiHeadAttention {
            query: Linear::new(d, d, rng),
            key: Linear::new(d, d, rng),
            value: Linear::new(d, d, rng),
            output: Linear::new(d, d, rng),
            heads,
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>, mask: &Mask) -> Result<Var<'t, T>> {
        Ok(self.attend(tape, x, mask, false)?.0)
    }

    /// Also returns each head's `[B, N, N]` attention weights.
    pub fn forward_with_weights<'t>(
        &self,
        tape: &'t Tape<T>,
        x: &Var<'t, T>,
        mask: &Mask,
    ) -> Result<(Var<'t, T>, Vec<Tensor<T>>)> {
        self.attend(tape, x, mask, true)
    }

    fn attend<'t>(
        &self,
        tape: &'t Tape<T>,
        x: &Var<'t, T>,
        mask: &Mask,
        keep_weights: bool,
    ) -> Result<(Var<'t, T>, Vec<Tensor<T>>)> {
        let d = x.value().cols();
        let dh = d / self.heads;
        let q = self.query.forward(tape, x)?;
        let k = self.key.forward(tape, x)?;
        let v = self.value.forward(tape, x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outputs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = (
                q.narrow_last(h * dh, dh)?,
                k.narrow_last(h * dh, dh)?,
                v.narrow_last(h * dh, dh)?,
            );
            let attn = qh.bmm(&kh, false, true)?.scale(scale).masked_softmax(mask)?;
            outputs.push(attn.bmm(&vh, false, false)?);
            if keep_weights {
                weights.push(attn.value().clone());
            }
        }
        let merged = Var::concat_last(&outputs)?;
        Ok((self.output.forward(tape, &merged)?.mask_rows(mask)?, weights))
    }
}

impl<T: Scalar> Parameterized<T> for MultiHeadAttention<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.query.visit_params(f);
        self.key.visit_params(f);
        self.value.visit_params(f);
        self.output.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.query.visit_params_mut(f);
        self.key.visit_params_mut(f);
        self.value.visit_params_mut(f);
        self.output.visit_params_mut(f);
    }
}

/// One learned row per weight matrix, copied to every position.
#[derive(Clone, Debug)]
pub struct SharedVectorMixing<T: Scalar> {
    pub w1: Param<T>,
    pub w2: Param<T>,
}

impl<T: Scalar> SharedVectorMixing<T> {
    pub fn new(d_prime: usize, rng: &mut impl Rng) -> Self {
        SharedVectorMixing {
            w1: Param::fan_in([d_prime], d_prime, rng),
            w2: Param::fan_in([d_prime], d_prime, rng),
        }
    }

    /// `N` copies of `w` at valid positions, zeros elsewhere: `[B, N, d']`.
    pub fn expand<'t>(tape: &'t Tape<T>, w: &Param<T>, mask: &Mask) -> Result<Var<'t, T>> {
        let column = tape.constant(mask.column());
        column.bmm(&tape.param(w).reshape([1, w.len()])?, false, false)
    }

    pub fn forward<'t>(&self, tape: &'t Tape<T>, x: &Var<'t, T>, mask: &Mask) -> Result<Var<'t, T>> {
        let w1 = Self::expand(tape, &self.w1, mask)?;
        let w2 = Self::expand(tape, &self.w2, mask)?;
        mlp1_forward(&w1, &w2, x)
    }
}

impl<T: Scalar> Parameterized<T> for SharedVectorMixing<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        f(&self.w1);
        f(&self.w2);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.w1);
        f(&mut self.w2);
    }
}

fn check_capacity<T: Scalar>(kind: &'static str, x: &Var<'_, T>, n_max: usize) -> Result<usize> {
    let n = x.shape()[x.shape().len() - 2];
    if n > n_max {
        return Err(Error::Capacity { kind, n_max, n });
    }
    Ok(n)
}

/// Any of the token-mixing variants behind one interface.
#[derive(Clone, Debug)]
pub enum TokenMixer<T: Scalar> {
    Identity,
    Hyper(HyperMixing<T>),
    MlpMixer(MlpMixing<T>),
    Gmlp(GmlpMixing<T>),
    Fnet,
    Attention(MultiHeadAttention<T>),
    SharedVector(SharedVectorMixing<T>),
}

impl<T: Scalar> TokenMixer<T> {
    pub fn new(spec: &TokenMixingSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let (d, dp) = (spec.d, spec.d_prime);
        Ok(match spec.kind {
            MixingKind::Identity => TokenMixer::Identity,
            MixingKind::HypermixerTied => {
                TokenMixer::Hyper(HyperMixing::new(d, dp, true, spec.reinject_positions, rng))
            }
            MixingKind::HypermixerUntied => {
                TokenMixer::Hyper(HyperMixing::new(d, dp, false, spec.reinject_positions, rng))
            }
            MixingKind::Mlpmixer => TokenMixer::MlpMixer(MlpMixing::new(spec.n_max.unwrap(), dp, rng)),
            MixingKind::Gmlp => TokenMixer::Gmlp(GmlpMixing::new(d, dp, spec.n_max.unwrap(), rng)),
            MixingKind::Fnet => TokenMixer::Fnet,
            MixingKind::Attention => TokenMixer::Attention(MultiHeadAttention::new(d, spec.heads(), rng)),
            MixingKind::SharedVector => TokenMixer::SharedVector(SharedVectorMixing::new(dp, rng)),
        })
    }

    pub fn kind(&self) -> MixingKind {
        match self {
            TokenMixer::Identity => MixingKind::Identity,
            TokenMixer::Hyper(h) if h.is_tied() => MixingKind::HypermixerTied,
            TokenMixer::Hyper(_) => MixingKind::HypermixerUntied,
            TokenMixer::MlpMixer(_) => MixingKind::Mlpmixer,
            TokenMixer::Gmlp(_) => MixingKind::Gmlp,
            TokenMixer::Fnet => MixingKind::Fnet,
            TokenMixer::Attention(_) => MixingKind::Attention,
            TokenMixer::SharedVector(_) => MixingKind::SharedVector,
        }
    }

    /// Mixes information across the token axis of `x: [B, N, d]`.
    ///
    /// Invalid positions neither contribute to nor receive mixing.
    /// `positions` is only read by a HyperMixer that re-injects positions.
    pub fn token_mix<'t>(
        &self,
        tape: &'t Tape<T>,
        x: &Var<'t, T>,
        mask: &Mask,
        positions: Option<&Tensor<T>>,
    ) -> Result<Var<'t, T>> {
        match *x.shape() {
            [b, n, _] => mask.check("token_mix", b, n)?,
            _ => return Err(Error::shape("token_mix", x.shape(), &[mask.batch(), mask.len()])),
        }
        match self {
            TokenMixer::Identity => Ok(x.clone()),
            TokenMixer::Hyper(m) => m.forward(tape, x, mask, positions),
            TokenMixer::MlpMixer(m) => m.forward(tape, x, mask),
            TokenMixer::Gmlp(m) => m.forward(tape, x, mask),
            TokenMixer::Fnet => x.fourier_tokens(mask),
            TokenMixer::Attention(m) => m.forward(tape, x, mask),
            TokenMixer::SharedVector(m) => m.forward(tape, x, mask),
        }
    }
}

impl<T: Scalar> Parameterized<T> for TokenMixer<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        match self {
            TokenMixer::Identity | TokenMixer::Fnet => {}
            TokenMixer::Hyper(m) => m.visit_params(f),
            TokenMixer::MlpMixer(m) => m.visit_params(f),
            TokenMixer::Gmlp(m) => m.visit_params(f),
            TokenMixer::Attention(m) => m.visit_params(f),
            TokenMixer::SharedVector(m) => m.visit_params(f),
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            TokenMixer::Identity | TokenMixer::Fnet => {}
            TokenMixer::Hyper(m) => m.visit_params_mut(f),
            TokenMixer::MlpMixer(m) => m.visit_params_mut(f),
            TokenMixer::Gmlp(m) => m.visit_params_mut(f),
            TokenMixer::Attention(m) => m.visit_params_mut(f),
            TokenMixer::SharedVector(m) => m.visit_params_mut(f),
        }
    }
}

/// Sinusoidal absolute position embeddings, `[n, d]`.
pub fn sinusoidal_positions<T: Scalar>(n: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn([n, d], |i| {
        let (pos, j) = ((i / d) as f64, i % d);
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        let v = if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        };
        T::from_f64_lossy(v)
    })
}

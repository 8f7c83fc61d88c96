//! Token-mixing variants, the feature-mixing MLP, and the residual layer
//! that combines them.

mod basic;
mod mixers;
mod spec;

use rand::Rng;

pub use basic::{LayerNorm, Linear, Mlp};
pub use mixers::{
    mlp1_forward, sinusoidal_positions, GmlpMixing, HyperMixing, MlpMixing, MultiHeadAttention,
    SharedVectorMixing, TokenMixer, GMLP_SPATIAL_INIT,
};
pub use spec::{MixingKind, TokenMixingSpec, DEFAULT_HEADS};

use crate::error::Result;
use crate::param::{Param, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::{Mask, Tape, Tensor, Var};

/// `X + mix(LN(X))`, optionally followed by `Y + FF(LN(Y))`.
#[derive(Clone, Debug)]
pub struct MixingLayer<T: Scalar> {
    pub token_norm: LayerNorm<T>,
    pub mixer: TokenMixer<T>,
    pub feature: Option<(LayerNorm<T>, Mlp<T>)>,
}

/// Intermediate values of one layer, kept for analysis.
pub struct LayerTrace<'t, T: Scalar> {
    /// Normalised input to the token mixer.
    pub mix_in: Var<'t, T>,
    pub mix_out: Var<'t, T>,
    pub output: Var<'t, T>,
    /// Per-head `[B, N, N]` weights when the mixer is attention.
    pub attention: Option<Vec<Tensor<T>>>,
}

impl<T: Scalar> MixingLayer<T> {
    pub fn new(spec: &TokenMixingSpec, feature_mixing: bool, rng: &mut impl Rng) -> Result<Self> {
        let mixer = TokenMixer::new(spec, rng)?;
        let feature = feature_mixing.then(|| {
            (
                LayerNorm::new(spec.d),
                Mlp::new(spec.d, spec.d_prime, spec.d, rng),
            )
        });
        Ok(MixingLayer {
            token_norm: LayerNorm::new(spec.d),
            mixer,
            feature,
        })
    }

    pub fn count_params(spec: &TokenMixingSpec, feature_mixing: bool) -> usize {
        let d = spec.d;
        let feature = if feature_mixing {
            2 * d + Mlp::<T>::count_params(d, spec.d_prime, d)
        } else {
            0
        };
        2 * d + spec.count_params() + feature
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        x: &Var<'t, T>,
        mask: &Mask,
        positions: Option<&Tensor<T>>,
    ) -> Result<Var<'t, T>> {
        Ok(self.forward_traced(tape, x, mask, positions)?.output)
    }

    pub fn forward_traced<'t>(
        &self,
        tape: &'t Tape<T>,
        x: &Var<'t, T>,
        mask: &Mask,
        positions: Option<&Tensor<T>>,
    ) -> Result<LayerTrace<'t, T>> {
        let mix_in = self.token_norm.forward(tape, x)?;
        let (mix_out, attention) = match &self.mixer {
            TokenMixer::Attention(m) => {
                let (out, w) = m.forward_with_weights(tape, &mix_in, mask)?;
                (out, Some(w))
            }
            m => (m.token_mix(tape, &mix_in, mask, positions)?, None),
        };
        let y = x.add(&mix_out)?;
        let output = match &self.feature {
            Some((norm, mlp)) => y.add(&mlp.forward(tape, &norm.forward(tape, &y)?)?)?,
            None => y,
        };
        Ok(LayerTrace {
            mix_in,
            mix_out,
            output,
            attention,
        })
    }
}

impl<T: Scalar> Parameterized<T> for MixingLayer<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        self.token_norm.visit_params(f);
        self.mixer.visit_params(f);
        if let Some((norm, mlp)) = &self.feature {
            norm.visit_params(f);
            mlp.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.token_norm.visit_params_mut(f);
        self.mixer.visit_params_mut(f);
        if let Some((norm, mlp)) = &mut self.feature {
            norm.visit_params_mut(f);
            mlp.visit_params_mut(f);
        }
    }
}

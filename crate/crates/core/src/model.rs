//! Embedding, a stack of mixing layers, pooling and a task head.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, RngCore};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{sinusoidal_positions, LayerTrace, Linear, MixingKind, MixingLayer, TokenMixingSpec};
use crate::param::{Param, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::{Mask, Tape, Tensor, Var};

/// What the model consumes at each position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InputSpec {
    /// Token ids looked up in a `[vocab_size, d]` table.
    Tokens { vocab_size: usize },
    /// A scalar signal; each position sees the `2 * window + 1` values
    /// centred on it (zero beyond the valid range) through a linear lift.
    Signal { window: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadSpec {
    Classifier {
        num_classes: usize,
    },
    /// One value per token.
    Regressor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    MeanOverValid,
    None,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d: usize,
    pub d_prime: usize,
    pub token_mixing: TokenMixingSpec,
    pub input: InputSpec,
    pub dropout_p: f64,
    pub head: HeadSpec,
    pub pooling: Pooling,
    /// Per-token feature-mixing MLP in every layer.
    #[serde(default = "default_true")]
    pub feature_mixing: bool,
    /// Sinusoidal position embeddings added at the input.
    #[serde(default = "default_true")]
    pub positions: bool,
}

impl ModelConfig {
    /// Text classifier with mean pooling, the layout used for all text runs.
    pub fn classifier(
        kind: MixingKind,
        num_layers: usize,
        d: usize,
        d_prime: usize,
        vocab_size: usize,
        num_classes: usize,
        n_max: usize,
    ) -> Self {
        ModelConfig {
            num_layers,
            d,
            d_prime,
            token_mixing: TokenMixingSpec::new(kind, d, d_prime, n_max),
            input: InputSpec::Tokens { vocab_size },
            dropout_p: 0.0,
            head: HeadSpec::Classifier { num_classes },
            pooling: Pooling::MeanOverValid,
            feature_mixing: true,
            positions: true,
        }
    }

    pub fn with_kind(mut self, kind: MixingKind, n_max: usize) -> Self {
        let reinject = self.token_mixing.reinject_positions && kind.is_hypermixer();
        let heads = self.token_mixing.heads;
        self.token_mixing = TokenMixingSpec::new(kind, self.d, self.d_prime, n_max);
        self.token_mixing.reinject_positions = reinject;
        if kind == MixingKind::Attention {
            if let Some(h) = heads {
                self.token_mixing.heads = Some(h);
            }
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Param("num_layers must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Param(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.token_mixing.d != self.d || self.token_mixing.d_prime != self.d_prime {
            return Err(Error::Param("token_mixing dims disagree with the model".into()));
        }
        match self.input {
            InputSpec::Tokens { vocab_size: 0 } => {
                return Err(Error::Param("vocab_size must be positive".into()))
            }
            _ => {}
        }
        if let HeadSpec::Classifier { num_classes: 0 } = self.head {
            return Err(Error::Param("num_classes must be positive".into()));
        }
        self.token_mixing.validate()
    }

    pub fn out_dim(&self) -> usize {
        match self.head {
            HeadSpec::Classifier { num_classes } => num_classes,
            HeadSpec::Regressor => 1,
        }
    }

    /// Analytic parameter count; equals the enumerated size of a built model.
    pub fn count_params(&self) -> usize {
        let embed = match self.input {
            InputSpec::Tokens { vocab_size } => vocab_size * self.d,
            InputSpec::Signal { window } => Linear::<f64>::count_params(2 * window + 1, self.d),
        };
        let layer = MixingLayer::<f64>::count_params(&self.token_mixing, self.feature_mixing);
        embed + self.num_layers * layer + Linear::<f64>::count_params(self.d, self.out_dim())
    }

    /// Same dims, identity token mixing, mean pooling.
    pub fn feature_only(&self) -> Self {
        let mut c = self.clone().with_kind(MixingKind::Identity, 0);
        c.pooling = Pooling::MeanOverValid;
        c.feature_mixing = true;
        c
    }

    /// One tied HyperMixer token-mixing layer and no feature mixing.
    pub fn token_only(&self) -> Self {
        let mut c = self.clone().with_kind(MixingKind::HypermixerTied, 0);
        c.num_layers = 1;
        c.feature_mixing = false;
        c
    }
}

/// Per-position input to [`Model::forward`].
#[derive(Clone, Copy, Debug)]
pub enum ModelInput<'a, T: Scalar> {
    /// Row-major `[B, N]` token ids.
    Tokens(&'a [usize]),
    /// `[B, N]` signal values.
    Signal(&'a Tensor<T>),
}

#[derive(Clone, Debug)]
enum Embedding<T: Scalar> {
    Table(Param<T>),
    Lift(Linear<T>),
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    config: ModelConfig,
    embedding: Embedding<T>,
    pub layers: Vec<MixingLayer<T>>,
    pub head: Linear<T>,
}

/// Model output plus per-layer intermediates.
pub struct ModelTrace<'t, T: Scalar> {
    pub output: Var<'t, T>,
    pub layers: Vec<LayerTrace<'t, T>>,
}

const MAGIC: &[u8; 5] = b"MIXK1";

impl<T: Scalar> Model<T> {
    pub fn new(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let embedding = match config.input {
            InputSpec::Tokens { vocab_size } => Embedding::Table(Param::uniform([vocab_size, d], 1.0, rng)),
            InputSpec::Signal { window } => Embedding::Lift(Linear::new(2 * window + 1, d, rng)),
        };
        let layers = (0..config.num_layers)
            .map(|_| MixingLayer::new(&config.token_mixing, config.feature_mixing, rng))
            .collect::<Result<_>>()?;
        Ok(Model {
            config: config.clone(),
            embedding,
            layers,
            head: Linear::new(d, config.out_dim(), rng),
        })
    }

    pub fn seeded(config: &ModelConfig, seed: u64) -> Result<Self> {
        Self::new(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn feature_only(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::new(&config.feature_only(), rng)
    }

    pub fn token_only(config: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        Self::new(&config.token_only(), rng)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn embed<'t>(&self, tape: &'t Tape<T>, input: ModelInput<'_, T>, mask: &Mask) -> Result<Var<'t, T>> {
        let (b, n) = (mask.batch(), mask.len());
        match (&self.embedding, input) {
            (Embedding::Table(table), ModelInput::Tokens(ids)) => tape.param(table).gather_rows(ids, &[b, n]),
            (Embedding::Lift(lift), ModelInput::Signal(signal)) => {
                if signal.shape() != [b, n] {
                    return Err(Error::shape("embed", signal.shape(), &[b, n]));
                }
                let window = match self.config.input {
                    InputSpec::Signal { window } => window,
                    InputSpec::Tokens { .. } => unreachable!(),
                };
                let w = 2 * window + 1;
                let features = Tensor::from_fn([b, n, w], |i| {
                    let (row, k) = (i / w, i % w);
                    let (bb, pos) = (row / n, row % n);
                    match (pos + k).checked_sub(window) {
                        Some(j) if j < n && mask.is_valid(bb, j) => signal.data()[bb * n + j],
                        _ => T::zero(),
                    }
                });
                lift.forward(tape, &tape.constant(features))
            }
            _ => Err(Error::Usage(
                "input kind does not match the model's embedding".into(),
            )),
        }
    }

    /// Evaluation-mode forward pass.
    ///
    /// Classifier with pooling gives `[B, C]`; regressor gives `[B, N]`;
    /// classifier without pooling gives `[B, N, C]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<T>,
        input: ModelInput<'_, T>,
        mask: &Mask,
    ) -> Result<Var<'t, T>> {
        Ok(self.run(tape, input, mask, None)?.output)
    }

    /// Training-mode forward pass with dropout at each layer input.
    pub fn forward_train<'t>(
        &self,
        tape: &'t Tape<T>,
        input: ModelInput<'_, T>,
        mask: &Mask,
        rng: &mut dyn RngCore,
    ) -> Result<Var<'t, T>> {
        Ok(self.run(tape, input, mask, Some(rng))?.output)
    }

    pub fn forward_traced<'t>(
        &self,
        tape: &'t Tape<T>,
        input: ModelInput<'_, T>,
        mask: &Mask,
    ) -> Result<ModelTrace<'t, T>> {
        self.run(tape, input, mask, None)
    }

    fn run<'t>(
        &self,
        tape: &'t Tape<T>,
        input: ModelInput<'_, T>,
        mask: &Mask,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<ModelTrace<'t, T>> {
        let n = mask.len();
        let positions = sinusoidal_positions::<T>(n, self.config.d);
        let mut x = self.embed(tape, input, mask)?;
        if self.config.positions {
            x = x.add_broadcast(&tape.constant(positions.clone()))?;
        }
        let mut traces = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            if let Some(rng) = rng.as_mut().filter(|_| self.config.dropout_p > 0.0) {
                x = x.dropout(self.config.dropout_p, true, rng)?;
            }
            let trace = layer.forward_traced(tape, &x, mask, Some(&positions))?;
            x = trace.output.clone();
            traces.push(trace);
        }
        let output = match (self.config.pooling, &self.config.head) {
            (Pooling::MeanOverValid, HeadSpec::Classifier { .. }) => {
                self.head.forward(tape, &x.mean_pool(mask)?)?
            }
            (_, HeadSpec::Regressor) => self.head.forward(tape, &x)?.reshape([mask.batch(), n])?,
            (Pooling::None, HeadSpec::Classifier { .. }) => self.head.forward(tape, &x)?,
        };
        Ok(ModelTrace {
            output,
            layers: traces,
        })
    }

    /// Writes the binary checkpoint: magic, config length (u64 LE), config
    /// JSON, then every parameter value as f64 LE in declaration order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = Vec::new();
        self.write_to(&mut bytes)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        let json = serde_json::to_vec(&self.config)?;
        let io = |e| Error::Checkpoint(format!("write failed: {e}"));
        out.write_all(MAGIC).map_err(io)?;
        out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
        out.write_all(&json).map_err(io)?;
        let mut result = Ok(());
        self.visit_params(&mut |p| {
            for v in p.value.data() {
                if result.is_ok() {
                    result = out.write_all(&v.to_f64_lossy().to_le_bytes());
                }
            }
        });
        result.map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let bad = |what: &str| Error::Checkpoint(what.to_string());
        let mut magic = [0u8; 5];
        input
            .read_exact(&mut magic)
            .map_err(|_| bad("truncated header"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mut len = [0u8; 8];
        input.read_exact(&mut len).map_err(|_| bad("truncated header"))?;
        let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
        input.read_exact(&mut json).map_err(|_| bad("truncated config"))?;
        let config: ModelConfig = serde_json::from_slice(&json)?;
        let mut model = Self::seeded(&config, 0)?;
        let mut rest = Vec::new();
        input
            .read_to_end(&mut rest)
            .map_err(|_| bad("unreadable parameters"))?;
        if rest.len() != 8 * model.num_params() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter values, found {} bytes",
                model.num_params(),
                rest.len()
            )));
        }
        let mut values = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        model.visit_params_mut(&mut |p| {
            for v in p.value.data_mut() {
                *v = T::from_f64_lossy(values.next().unwrap());
            }
        });
        Ok(model)
    }
}

impl<T: Scalar> Parameterized<T> for Model<T> {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param<T>)) {
        match &self.embedding {
            Embedding::Table(p) => f(p),
            Embedding::Lift(l) => l.visit_params(f),
        }
        self.layers.visit_params(f);
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match &mut self.embedding {
            Embedding::Table(p) => f(p),
            Embedding::Lift(l) => l.visit_params_mut(f),
        }
        self.layers.visit_params_mut(f);
        self.head.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(kind: MixingKind) -> ModelConfig {
        ModelConfig::classifier(kind, 1, 2, 4, 3, 2, 8)
    }

    #[test]
    fn identity_count_matches_hand_enumeration() {
        let c = tiny(MixingKind::Identity);
        let expected = 6 + (2 * 4 + 4 + 4 * 2 + 2) + (2 + 2) * 2 + (2 * 2 + 2);
        assert_eq!(c.count_params(), expected);
        assert_eq!(Model::<f64>::seeded(&c, 1).unwrap().num_params(), expected);
    }

    #[test]
    fn analytic_count_equals_enumeration_for_every_kind() {
        for kind in MixingKind::ALL {
            let mut c = ModelConfig::classifier(kind, 2, 4, 6, 11, 3, 9);
            let m = Model::<f64>::seeded(&c, 3).unwrap();
            assert_eq!(c.count_params(), m.num_params(), "{kind}");
            c.input = InputSpec::Signal { window: 1 };
            c.head = HeadSpec::Regressor;
            let m = Model::<f32>::seeded(&c, 3).unwrap();
            assert_eq!(c.count_params(), m.num_params(), "{kind}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let c = tiny(MixingKind::HypermixerUntied);
        let m = Model::<f64>::seeded(&c, 5).unwrap();
        let mut bytes = Vec::new();
        m.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..5], b"MIXK1");
        let back = Model::<f64>::read_from(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.config(), m.config());
        let (mut a, mut b) = (Vec::new(), Vec::new());
        m.visit_params(&mut |p| a.extend(p.value.data().iter().map(|v| v.to_bits())));
        back.visit_params(&mut |p| b.extend(p.value.data().iter().map(|v| v.to_bits())));
        assert_eq!(a, b);
        bytes.pop();
        assert!(Model::<f64>::read_from(&mut bytes.as_slice()).is_err());
    }

    #[test]
    fn oov_token_is_a_data_error() {
        let m = Model::<f64>::seeded(&tiny(MixingKind::Fnet), 1).unwrap();
        let tape = Tape::new();
        let err = m
            .forward(&tape, ModelInput::Tokens(&[0, 3]), &Mask::all_valid(1, 2))
            .unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn single_token_runs_for_every_kind() {
        for kind in MixingKind::ALL {
            let c = ModelConfig::classifier(kind, 1, 4, 6, 3, 2, 8);
            let m = Model::<f64>::seeded(&c, 2).unwrap();
            let tape = Tape::new();
            let out = m
                .forward(&tape, ModelInput::Tokens(&[1]), &Mask::all_valid(1, 1))
                .unwrap();
            assert_eq!(out.shape(), [1, 2]);
        }
    }
}

//! Toy regression task that needs content-based token interaction: each
//! sequence holds two rectangles and two triangles of random heights, and
//! the target replaces every shape's height with the mean height of the two
//! shapes of its kind.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{sinusoidal_positions, MixingKind, TokenMixer, TokenMixingSpec};
use crate::model::{HeadSpec, InputSpec, Model, ModelConfig, ModelInput, Pooling};
use crate::scalar::Scalar;
use crate::tensor::{Mask, Tape, Tensor, Var};
use crate::trainer::{train, Metric, Objective, TrainConfig, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    pub start: usize,
    pub width: usize,
    pub height: f64,
}

impl Shape {
    /// Relative height of cell `i` (0-based within the shape): 1 for a
    /// rectangle, a symmetric ramp peaking at 1 for a triangle.
    pub fn profile(&self, i: usize) -> f64 {
        match self.kind {
            ShapeKind::Rectangle => 1.0,
            ShapeKind::Triangle => {
                let rise = (i + 1).min(self.width - i) as f64;
                rise / self.width.div_ceil(2) as f64
            }
        }
    }

    pub fn cells(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub len: usize,
    pub min_width: usize,
    pub max_width: usize,
    pub min_height: f64,
    pub max_height: f64,
    /// Shapes of each kind per sequence.
    pub per_kind: usize,
    /// Empty cells required between neighbouring shapes.
    pub gap: usize,
    pub max_retries: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            len: 100,
            min_width: 5,
            max_width: 10,
            min_height: 1.0,
            max_height: 10.0,
            per_kind: 2,
            gap: 1,
            max_retries: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapeSequence {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
    pub shapes: Vec<Shape>,
}

impl ShapeSequence {
    /// Index into `shapes` of the shape covering cell `i`.
    pub fn shape_at(&self, i: usize) -> Option<usize> {
        self.shapes.iter().position(|s| s.cells().contains(&i))
    }
}

fn render(len: usize, shapes: &[Shape]) -> (Vec<f64>, Vec<f64>) {
    let mut input = vec![0.0; len];
    let mut target = vec![0.0; len];
    for s in shapes {
        let same: Vec<f64> = shapes
            .iter()
            .filter(|o| o.kind == s.kind)
            .map(|o| o.height)
            .collect();
        let mean = same.iter().sum::<f64>() / same.len() as f64;
        for (k, cell) in s.cells().enumerate() {
            input[cell] = s.height * s.profile(k);
            target[cell] = mean * s.profile(k);
        }
    }
    (input, target)
}

/// Sequence `index` of the stream for `seed`.
pub fn generate_one(config: &GeneratorConfig, seed: u64, index: u64) -> Result<ShapeSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let kinds: Vec<ShapeKind> = [ShapeKind::Rectangle, ShapeKind::Triangle]
        .into_iter()
        .flat_map(|k| std::iter::repeat(k).take(config.per_kind))
        .collect();
    for _ in 0..config.max_retries {
        let mut shapes: Vec<Shape> = Vec::with_capacity(kinds.len());
        let mut ok = true;
        for &kind in &kinds {
            let width = rng.gen_range(config.min_width..=config.max_width);
            if width > config.len {
                return Err(Error::Generation(format!("width {width} exceeds length")));
            }
            let start = rng.gen_range(0..=config.len - width);
            let clash = shapes
                .iter()
                .any(|o| start < o.start + o.width + config.gap && o.start < start + width + config.gap);
            if clash {
                ok = false;
                break;
            }
            let height = rng.gen_range(config.min_height..config.max_height);
            shapes.push(Shape {
                kind,
                start,
                width,
                height,
            });
        }
        if ok {
            let (input, target) = render(config.len, &shapes);
            return Ok(ShapeSequence {
                input,
                target,
                shapes,
            });
        }
    }
    Err(Error::Generation(format!(
        "no non-overlapping placement after {} attempts",
        config.max_retries
    )))
}

/// `count` sequences; sequence `i` depends only on `(seed, i)`.
pub fn generate(config: &GeneratorConfig, seed: u64, count: usize) -> Result<Vec<ShapeSequence>> {
    if count == 0 {
        return Err(Error::Param("count must be at least 1".into()));
    }
    (0..count as u64).map(|i| generate_one(config, seed, i)).collect()
}

/// Lowest MSE reachable by any model that sees each cell's own shape but
/// not the other shape of the same kind: the partner height is uniform and
/// independent, so a cell at relative height `f` keeps `f^2 Var(h) / 4`
/// of error. Averaged over all cells of `sequences`.
pub fn no_mixing_floor(config: &GeneratorConfig, sequences: &[ShapeSequence]) -> f64 {
    let range = config.max_height - config.min_height;
    let partner_var = range * range / 12.0;
    let per_kind = config.per_kind as f64;
    // Mean of `per_kind` heights with one known: the rest contribute
    // (per_kind - 1) * Var / per_kind^2.
    let factor = (per_kind - 1.0) * partner_var / (per_kind * per_kind);
    let mut total = 0.0;
    let mut cells = 0usize;
    for s in sequences {
        for shape in &s.shapes {
            for k in 0..shape.width {
                total += shape.profile(k).powi(2) * factor;
            }
        }
        cells += s.input.len();
    }
    total / cells.max(1) as f64
}

/// Writes the dataset cache: `index,input_0..,target_0..`.
pub fn write_cache(path: &Path, sequences: &[ShapeSequence]) -> Result<()> {
    let len = sequences.first().map_or(0, |s| s.input.len());
    let mut w = csv::Writer::from_path(path).map_err(|e| crate::flops::csv_error(path, e))?;
    let mut header = vec!["index".to_string()];
    header.extend((0..len).map(|i| format!("input_{i}")));
    header.extend((0..len).map(|i| format!("target_{i}")));
    w.write_record(&header)
        .map_err(|e| crate::flops::csv_error(path, e))?;
    for (i, s) in sequences.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(s.input.iter().chain(&s.target).map(|v| format!("{v:.17e}")));
        w.write_record(&row)
            .map_err(|e| crate::flops::csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a cache written by [`write_cache`] as `(inputs, targets)` rows.
pub fn read_cache(path: &Path) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| crate::flops::csv_error(path, e))?;
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| crate::flops::csv_error(path, e))?;
        let values = rec
            .iter()
            .skip(1)
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: line + 2,
                msg: e.to_string(),
            })?;
        let half = values.len() / 2;
        out.push((values[..half].to_vec(), values[half..].to_vec()));
    }
    Ok(out)
}

/// Which token mixing the synthetic-task model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthVariant {
    /// Feature mixing only: no token interaction at all.
    None,
    Mlpmixer,
    Hypermixer,
    Attention,
}

impl SynthVariant {
    pub const ALL: [SynthVariant; 4] = [
        SynthVariant::None,
        SynthVariant::Mlpmixer,
        SynthVariant::Hypermixer,
        SynthVariant::Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SynthVariant::None => "none",
            SynthVariant::Mlpmixer => "mlpmixer",
            SynthVariant::Hypermixer => "hypermixer",
            SynthVariant::Attention => "attention",
        }
    }

    pub fn kind(self) -> MixingKind {
        match self {
            SynthVariant::None => MixingKind::Identity,
            SynthVariant::Mlpmixer => MixingKind::Mlpmixer,
            SynthVariant::Hypermixer => MixingKind::HypermixerTied,
            SynthVariant::Attention => MixingKind::Attention,
        }
    }
}

impl fmt::Display for SynthVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SynthVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Param(format!("unknown synthetic variant {s:?}")))
    }
}

/// Model and training settings for the synthetic runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub d: usize,
    pub d_prime: usize,
    pub layers: usize,
    pub heads: usize,
    /// Neighbouring cells on each side fed to the input lift.
    pub window: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps `epochs * train_size`; small training sets still get `epochs`.
    pub max_example_passes: Option<usize>,
    pub valid_size: usize,
    pub test_size: usize,
    pub generator: GeneratorConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            d: 32,
            d_prime: 64,
            layers: 2,
            heads: 4,
            window: 1,
            learning_rate: 1e-2,
            batch_size: 64,
            epochs: 20,
            max_example_passes: Some(150_000),
            valid_size: 1000,
            test_size: 10_000,
            generator: GeneratorConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn model_config(&self, variant: SynthVariant) -> ModelConfig {
        let kind = variant.kind();
        let mut token_mixing = TokenMixingSpec::new(kind, self.d, self.d_prime, self.generator.len);
        if kind == MixingKind::Attention {
            token_mixing.heads = Some(self.heads);
        }
        ModelConfig {
            num_layers: self.layers,
            d: self.d,
            d_prime: self.d_prime,
            token_mixing,
            input: InputSpec::Signal { window: self.window },
            dropout_p: 0.0,
            head: HeadSpec::Regressor,
            pooling: Pooling::None,
            feature_mixing: true,
            positions: true,
        }
    }

    pub fn epochs_for(&self, train_size: usize) -> usize {
        match self.max_example_passes {
            Some(cap) => self.epochs.min(cap.div_ceil(train_size.max(1))).max(1),
            None => self.epochs,
        }
    }
}

/// Sequences as `[M, L]` input and target tensors.
#[derive(Clone, Debug)]
pub struct SignalData<T: Scalar> {
    pub inputs: Tensor<T>,
    pub targets: Tensor<T>,
}

impl<T: Scalar> SignalData<T> {
    pub fn from_sequences(seqs: &[ShapeSequence]) -> Result<Self> {
        let len = seqs.first().map_or(0, |s| s.input.len());
        let flat = |f: fn(&ShapeSequence) -> &Vec<f64>| {
            seqs.iter()
                .flat_map(|s| f(s).iter().map(|&v| T::from_f64_lossy(v)))
                .collect::<Vec<T>>()
        };
        Ok(SignalData {
            inputs: Tensor::new([seqs.len(), len], flat(|s| &s.input))?,
            targets: Tensor::new([seqs.len(), len], flat(|s| &s.target))?,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rows(&self, idx: &[usize]) -> (Tensor<T>, Tensor<T>) {
        let l = self.inputs.cols();
        let pick = |t: &Tensor<T>| {
            let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
            Tensor::new([idx.len(), l], data).expect("row selection keeps shape")
        };
        (pick(&self.inputs), pick(&self.targets))
    }

    /// Mean squared error of `model` over every cell.
    pub fn mse(&self, model: &Model<T>) -> Result<f64> {
        let (m, l) = (self.len(), self.inputs.cols());
        let mut total = 0.0;
        for start in (0..m).step_by(256) {
            let idx: Vec<usize> = (start..(start + 256).min(m)).collect();
            let (x, y) = self.rows(&idx);
            let tape = Tape::inference();
            let mask = Mask::all_valid(idx.len(), l);
            let out = model.forward(&tape, ModelInput::Signal(&x), &mask)?;
            total += out
                .value()
                .data()
                .iter()
                .zip(y.data())
                .map(|(p, t)| (p.to_f64_lossy() - t.to_f64_lossy()).powi(2))
                .sum::<f64>();
        }
        Ok(total / (m * l).max(1) as f64)
    }
}

/// Per-cell regression objective.
pub struct SignalRegression<T: Scalar> {
    pub train: SignalData<T>,
    pub valid: SignalData<T>,
}

impl<T: Scalar> Objective<T> for SignalRegression<T> {
    type Batch = (Tensor<T>, Tensor<T>);

    fn batches(&self, batch_size: usize, seed: u64) -> Result<Vec<Self::Batch>> {
        use rand::seq::SliceRandom;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(order.chunks(batch_size).map(|idx| self.train.rows(idx)).collect())
    }

    fn loss<'t>(
        &self,
        model: &Model<T>,
        tape: &'t Tape<T>,
        batch: &Self::Batch,
        rng: &mut dyn RngCore,
    ) -> Result<Var<'t, T>> {
        let (x, y) = batch;
        let mask = Mask::all_valid(x.rows(), x.cols());
        model
            .forward_train(tape, ModelInput::Signal(x), &mask, rng)?
            .masked_mse(y, &mask)
    }

    fn validate(&self, model: &Model<T>) -> Result<f64> {
        self.valid.mse(model)
    }

    fn metric(&self) -> Metric {
        Metric::Mse
    }
}

/// Seed offsets keeping the train, validation and test streams disjoint.
const VALID_STREAM: u64 = 1 << 40;
const TEST_STREAM: u64 = 1 << 41;

/// Held-out test sequences for `seed`.
pub fn test_sequences(config: &SynthConfig, seed: u64) -> Result<Vec<ShapeSequence>> {
    generate(&config.generator, seed ^ TEST_STREAM, config.test_size)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthResult {
    pub variant: SynthVariant,
    pub train_examples: usize,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub test_mse: f64,
    pub valid_mse: f64,
    /// [`no_mixing_floor`] of the test set.
    pub no_mixing_floor: f64,
    pub wall_seconds: f64,
    pub config: SynthConfig,
}

/// Trains `variant` on `train_examples` sequences and scores it on the test
/// set (pass `test` to reuse already generated test sequences).
pub fn train_synthetic<T: Scalar>(
    variant: SynthVariant,
    train_examples: usize,
    seed: u64,
    config: &SynthConfig,
    test: Option<&[ShapeSequence]>,
) -> Result<(Model<T>, SynthResult)> {
    let start = std::time::Instant::now();
    let gen = &config.generator;
    let train_seqs = generate(gen, seed, train_examples)?;
    let valid_seqs = generate(gen, seed ^ VALID_STREAM, config.valid_size.max(1))?;
    let owned;
    let test = match test {
        Some(t) => t,
        None => {
            owned = test_sequences(config, seed)?;
            &owned
        }
    };
    let objective = SignalRegression {
        train: SignalData::<T>::from_sequences(&train_seqs)?,
        valid: SignalData::<T>::from_sequences(&valid_seqs)?,
    };
    let epochs = config.epochs_for(train_examples);
    let tc = TrainConfig {
        learning_rate: config.learning_rate,
        dropout_p: 0.0,
        batch_size: config.batch_size,
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let TrainOutcome {
        model,
        best_epoch,
        best_metric,
        ..
    } = train::<T, _>(&config.model_config(variant), &tc, &objective)?;
    let test_mse = SignalData::<T>::from_sequences(test)?.mse(&model)?;
    let result = SynthResult {
        variant,
        train_examples,
        seed,
        epochs,
        best_epoch,
        test_mse,
        valid_mse: best_metric,
        no_mixing_floor: no_mixing_floor(gen, test),
        wall_seconds: start.elapsed().as_secs_f64(),
        config: config.clone(),
    };
    Ok((model, result))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapProvenance {
    TrueAttention,
    Pseudo,
}

/// Row-stochastic `N x N` map.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub n: usize,
    /// Row-major.
    pub data: Vec<f64>,
    pub provenance: MapProvenance,
}

impl AttentionMap {
    /// Normalises each row of a nonnegative matrix to sum to 1; all-zero
    /// rows become uniform.
    pub fn from_weights(n: usize, mut data: Vec<f64>, provenance: MapProvenance) -> Result<Self> {
        if data.len() != n * n || data.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Analysis(format!("not a nonnegative {n}x{n} matrix")));
        }
        for row in data.chunks_mut(n) {
            let s: f64 = row.iter().sum();
            if s > 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            } else {
                row.iter_mut().for_each(|v| *v = 1.0 / n as f64);
            }
        }
        Ok(AttentionMap { n, data, provenance })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn argmax_row(&self, i: usize) -> usize {
        let row = self.row(i);
        (0..self.n).fold(0, |b, j| if row[j] > row[b] { j } else { b })
    }
}

fn traced_mixer_input<T: Scalar>(
    model: &Model<T>,
    input: &[f64],
) -> Result<(Tensor<T>, Option<Vec<Tensor<T>>>)> {
    let n = input.len();
    let x = Tensor::from_fn([1, n], |i| T::from_f64_lossy(input[i]));
    let tape = Tape::inference();
    let trace = model.forward_traced(&tape, ModelInput::Signal(&x), &Mask::all_valid(1, n))?;
    let last = trace
        .layers
        .last()
        .ok_or_else(|| Error::Analysis("model has no layers".into()))?;
    Ok((last.mix_in.value().clone(), last.attention.clone()))
}

/// Row-normalised `sum_f |d out[i, f] / d in[j, f]|` of the last token
/// mixer, evaluated at the mixer input produced by `input`.
pub fn pseudo_attention<T: Scalar>(model: &Model<T>, input: &[f64]) -> Result<AttentionMap> {
    let layer = model
        .layers
        .last()
        .ok_or_else(|| Error::Analysis("model has no layers".into()))?;
    if matches!(layer.mixer, TokenMixer::Identity) {
        return Err(Error::Analysis(
            "identity mixing has no token-mixing block".into(),
        ));
    }
    let (mix_in, _) = traced_mixer_input(model, input)?;
    let (n, d) = (mix_in.shape()[1], mix_in.shape()[2]);
    let positions = sinusoidal_positions::<T>(n, d);
    let mask = Mask::all_valid(1, n);
    let tape = Tape::new();
    let x = tape.leaf(mix_in);
    let out = layer.mixer.token_mix(&tape, &x, &mask, Some(&positions))?;
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        for f in 0..d {
            let mut seed = Tensor::zeros([1, n, d]);
            seed.data_mut()[i * d + f] = T::one();
            let grads = tape.backward_seeded(&out, seed)?;
            let Some(g) = grads.wrt(&x) else { continue };
            for j in 0..n {
                weights[i * n + j] += g.data()[j * d + f].to_f64_lossy().abs();
            }
        }
    }
    AttentionMap::from_weights(n, weights, MapProvenance::Pseudo)
}

/// Head-averaged softmax weights of the last layer of an attention model.
pub fn true_attention<T: Scalar>(model: &Model<T>, input: &[f64]) -> Result<AttentionMap> {
    let (_, heads) = traced_mixer_input(model, input)?;
    let heads = heads.ok_or_else(|| Error::Analysis("last layer is not attention".into()))?;
    let n = input.len();
    let mut avg = vec![0.0; n * n];
    for h in &heads {
        for (a, v) in avg.iter_mut().zip(h.data()) {
            *a += v.to_f64_lossy() / heads.len() as f64;
        }
    }
    AttentionMap::from_weights(n, avg, MapProvenance::TrueAttention)
}

/// Mean map weight from shape cells to the other shape of the same kind,
/// and to shapes of the other kind, averaged over rows inside shapes.
pub fn same_vs_different(map: &AttentionMap, seq: &ShapeSequence) -> (f64, f64) {
    let (mut same, mut diff, mut rows) = (0.0, 0.0, 0usize);
    for (si, s) in seq.shapes.iter().enumerate() {
        let partner: Vec<usize> = seq
            .shapes
            .iter()
            .enumerate()
            .filter(|(oi, o)| *oi != si && o.kind == s.kind)
            .flat_map(|(_, o)| o.cells())
            .collect();
        let other: Vec<usize> = seq
            .shapes
            .iter()
            .filter(|o| o.kind != s.kind)
            .flat_map(|o| o.cells())
            .collect();
        for i in s.cells() {
            same += partner.iter().map(|&j| map.at(i, j)).sum::<f64>() / partner.len() as f64;
            diff += other.iter().map(|&j| map.at(i, j)).sum::<f64>() / other.len() as f64;
            rows += 1;
        }
    }
    (same / rows as f64, diff / rows as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapFormat {
    Csv,
    Pgm,
}

/// CSV of the raw values, or a binary 8-bit PGM where each row is scaled
/// linearly from `[0, row max]` to `[0, 255]`.
pub fn export_map(map: &AttentionMap, path: &Path, format: MapFormat) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    match format {
        MapFormat::Csv => {
            for i in 0..map.n {
                let row: Vec<String> = map.row(i).iter().map(|v| format!("{v:.9e}")).collect();
                writeln!(out, "{}", row.join(",")).map_err(io)?;
            }
        }
        MapFormat::Pgm => {
            write!(out, "P5\n{} {}\n255\n", map.n, map.n).map_err(io)?;
            let mut pixels = Vec::with_capacity(map.n * map.n);
            for i in 0..map.n {
                let row = map.row(i);
                let max = row.iter().cloned().fold(0.0, f64::max);
                pixels.extend(row.iter().map(|v| {
                    if max > 0.0 {
                        (v / max * 255.0).round().clamp(0.0, 255.0) as u8
                    } else {
                        0
                    }
                }));
            }
            out.write_all(&pixels).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

/// Reads a map written with [`MapFormat::Csv`].
pub fn read_map_csv(path: &Path, provenance: MapProvenance) -> Result<AttentionMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut data = Vec::new();
    let mut n = 0;
    for (i, line) in text.lines().enumerate() {
        for v in line.split(',') {
            data.push(v.trim().parse::<f64>().map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        n += 1;
    }
    if data.len() != n * n {
        return Err(Error::Analysis("map is not square".into()));
    }
    Ok(AttentionMap { n, data, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triangle_profile_peaks_at_one() {
        let t = Shape {
            kind: ShapeKind::Triangle,
            start: 0,
            width: 5,
            height: 2.0,
        };
        let p: Vec<f64> = (0..5).map(|i| t.profile(i)).collect();
        assert_eq!(p, [1.0 / 3.0, 2.0 / 3.0, 1.0, 2.0 / 3.0, 1.0 / 3.0]);
    }

    #[test]
    fn shapes_do_not_touch() {
        for s in generate(&GeneratorConfig::default(), 4, 200).unwrap() {
            let mut cells: Vec<_> = s.shapes.iter().map(|s| (s.start, s.start + s.width)).collect();
            cells.sort();
            for w in cells.windows(2) {
                assert!(w[0].1 < w[1].0);
            }
        }
    }

    #[test]
    fn identity_map_pgm_pixels() {
        let map = AttentionMap::from_weights(2, vec![1.0, 0.0, 0.0, 1.0], MapProvenance::Pseudo).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        export_map(&map, &path, MapFormat::Pgm).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), b"P5\n2 2\n255\n\xff\x00\x00\xff");
    }
}

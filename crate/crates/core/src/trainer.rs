//! Adam training with best-epoch selection, learning-rate grid search,
//! random search, and the statistics used to compare search outcomes.

use std::io::{BufRead, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelInput};
use crate::param::Parameterized;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};
use crate::text::{batch_iter, Batch, Example, Vocabulary};

/// Learning rates tried by [`grid_search`] by default.
pub const LR_GRID: [f64; 7] = [1e-3, 5e-4, 2e-4, 1e-4, 5e-5, 2e-5, 1e-5];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub dropout_p: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            dropout_p: 0.1,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Param(format!("bad learning rate {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Param(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// Adam with bias correction; moments are kept in parameter visit order.
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    pub learning_rate: f64,
    step: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(learning_rate: f64, config: AdamConfig) -> Self {
        Adam {
            config,
            learning_rate,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Applies one update from the gradients stored in each `Param::grad`;
    /// parameters without a gradient are left alone.
    pub fn step(&mut self, module: &mut impl Parameterized<T>) {
        self.step += 1;
        let c = self.config;
        let lr = self.learning_rate;
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one, eps) = (T::one(), T::from_f64_lossy(c.eps));
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        let mut i = 0;
        module.visit_params_mut(&mut |p| {
            if m_all.len() <= i {
                m_all.push(Tensor::zeros(p.value.shape()));
                v_all.push(Tensor::zeros(p.value.shape()));
            }
            if let Some(g) = &p.grad {
                let (m, v) = (m_all[i].data_mut(), v_all[i].data_mut());
                for (j, (w, &g)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                    m[j] = b1 * m[j] + (one - b1) * g;
                    v[j] = b2 * v[j] + (one - b2) * g * g;
                    let m_hat = m[j].to_f64_lossy() / bc1;
                    let v_hat = v[j].to_f64_lossy() / bc2;
                    *w -= T::from_f64_lossy(lr * m_hat) / (T::from_f64_lossy(v_hat.sqrt()) + eps);
                }
            }
            i += 1;
        });
    }
}

/// Whether larger validation values are better.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Mse,
}

impl Metric {
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Metric::Accuracy => a > b,
            Metric::Mse => a < b,
        }
    }
}

/// A supervised task the trainer can optimise.
pub trait Objective<T: Scalar> {
    type Batch;

    /// Training batches for one epoch in an order determined by `seed`.
    fn batches(&self, batch_size: usize, seed: u64) -> Result<Vec<Self::Batch>>;

    /// Mean training loss of one batch, with dropout drawn from `rng`.
    fn loss<'t>(
        &self,
        model: &Model<T>,
        tape: &'t Tape<T>,
        batch: &Self::Batch,
        rng: &mut dyn RngCore,
    ) -> Result<Var<'t, T>>;

    fn validate(&self, model: &Model<T>) -> Result<f64>;

    fn metric(&self) -> Metric;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_metric: f64,
}

pub struct TrainOutcome<T: Scalar> {
    /// Parameters from the best validation epoch.
    pub model: Model<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Validation metric before the first update.
    pub initial_metric: f64,
}

/// Builds a fresh model from `config.seed` and trains it.
pub fn train<T: Scalar, O: Objective<T>>(
    model_config: &ModelConfig,
    config: &TrainConfig,
    objective: &O,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let mut mc = model_config.clone();
    mc.dropout_p = config.dropout_p;
    let model = Model::seeded(&mc, config.seed)?;
    train_model(model, config, objective)
}

/// Trains an existing model in place of a fresh one.
pub fn train_model<T: Scalar, O: Objective<T>>(
    mut model: Model<T>,
    config: &TrainConfig,
    objective: &O,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let metric = objective.metric();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_d0e5);
    let mut adam = Adam::new(config.learning_rate, config.adam);
    let initial_metric = objective.validate(&model)?;
    let mut best = (model.clone(), 0, initial_metric);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut total = 0.0;
        let mut count = 0usize;
        for batch in objective.batches(config.batch_size, config.seed.wrapping_add(epoch as u64))? {
            let tape = Tape::new();
            let loss = objective.loss(&model, &tape, &batch, &mut rng)?;
            let value = loss.item().to_f64_lossy();
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            tape.backward(&loss)?.store_into(&mut model);
            adam.step(&mut model);
            total += value;
            count += 1;
        }
        let valid_metric = objective.validate(&model)?;
        if !valid_metric.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: valid_metric,
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss: total / count.max(1) as f64,
            valid_metric,
        });
        if epoch == 1 && best.1 == 0 || metric.better(valid_metric, best.2) {
            best = (model.clone(), epoch, valid_metric);
        }
    }
    model.zero_grads();
    let (mut best_model, best_epoch, best_metric) = if config.epochs == 0 {
        (model, 0, initial_metric)
    } else {
        best
    };
    best_model.zero_grads();
    Ok(TrainOutcome {
        model: best_model,
        history,
        best_epoch,
        best_metric,
        initial_metric,
    })
}

/// Sentence classification with cross-entropy loss and accuracy.
pub struct TextClassification {
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub vocab: Vocabulary,
    pub n_cap: Option<usize>,
}

impl TextClassification {
    pub fn accuracy<T: Scalar>(&self, model: &Model<T>, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        for batch in batch_iter(examples, &self.vocab, 64, self.n_cap, None)? {
            let tape = Tape::inference();
            let logits = model.forward(&tape, ModelInput::Tokens(&batch.ids), &batch.mask)?;
            let c = logits.value().cols();
            for (row, &label) in logits.value().data().chunks(c).zip(&batch.labels) {
                let pred = row
                    .iter()
                    .enumerate()
                    .fold(0, |best, (i, v)| if *v > row[best] { i } else { best });
                correct += usize::from(pred == label);
            }
        }
        Ok(correct as f64 / examples.len() as f64)
    }
}

impl<T: Scalar> Objective<T> for TextClassification {
    type Batch = Batch;

    fn batches(&self, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
        Ok(batch_iter(&self.train, &self.vocab, batch_size, self.n_cap, Some(seed))?.collect())
    }

    fn loss<'t>(
        &self,
        model: &Model<T>,
        tape: &'t Tape<T>,
        batch: &Batch,
        rng: &mut dyn RngCore,
    ) -> Result<Var<'t, T>> {
        model
            .forward_train(tape, ModelInput::Tokens(&batch.ids), &batch.mask, rng)?
            .cross_entropy(&batch.labels)
    }

    fn validate(&self, model: &Model<T>) -> Result<f64> {
        self.accuracy(model, &self.valid)
    }

    fn metric(&self) -> Metric {
        Metric::Accuracy
    }
}

/// One finished trial, written as one JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub config: TrainConfig,
    pub score: f64,
    pub seed: u64,
    pub wall_seconds: f64,
    pub best_epoch: usize,
    pub initial_score: f64,
}

fn run_trial<T: Scalar, O: Objective<T>>(
    model_config: &ModelConfig,
    config: TrainConfig,
    objective: &O,
) -> Result<TrialRecord> {
    let start = Instant::now();
    let outcome = train::<T, O>(model_config, &config, objective)?;
    Ok(TrialRecord {
        seed: config.seed,
        config,
        score: outcome.best_metric,
        wall_seconds: start.elapsed().as_secs_f64(),
        best_epoch: outcome.best_epoch,
        initial_score: outcome.initial_metric,
    })
}

pub struct SearchResult {
    pub best: TrialRecord,
    pub records: Vec<TrialRecord>,
}

fn pick_best(records: Vec<TrialRecord>, metric: Metric) -> Result<SearchResult> {
    let best = records
        .iter()
        .cloned()
        .reduce(|a, b| if metric.better(b.score, a.score) { b } else { a })
        .ok_or_else(|| Error::Param("no trials".into()))?;
    Ok(SearchResult { best, records })
}

/// One trial per learning rate, every trial with `base.seed`.
pub fn grid_search<T: Scalar, O: Objective<T>>(
    model_config: &ModelConfig,
    base: &TrainConfig,
    grid: &[f64],
    objective: &O,
) -> Result<SearchResult> {
    if grid.is_empty() {
        return Err(Error::Param("empty learning-rate grid".into()));
    }
    let records = grid
        .iter()
        .map(|&lr| {
            let config = TrainConfig {
                learning_rate: lr,
                ..base.clone()
            };
            run_trial::<T, O>(model_config, config, objective)
        })
        .collect::<Result<Vec<_>>>()?;
    pick_best(records, objective.metric())
}

/// Base of the logarithm whose value is drawn uniformly from `[-8, -1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    #[default]
    Natural,
    Ten,
}

/// `(learning_rate, dropout_p)` pairs: `log lr ~ U(-8, -1)`, `p ~ U(0, 0.5)`.
pub fn sample_hyperparameters(num_trials: usize, seed: u64, base: LogBase) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..num_trials)
        .map(|_| {
            let e: f64 = rng.gen_range(-8.0..=-1.0);
            let lr = match base {
                LogBase::Natural => e.exp(),
                LogBase::Ten => 10f64.powf(e),
            };
            (lr, rng.gen_range(0.0..=0.5))
        })
        .collect()
}

/// Random search; trial `i` trains with seed `seed + i`.
pub fn random_search<T: Scalar, O: Objective<T>>(
    model_config: &ModelConfig,
    base: &TrainConfig,
    num_trials: usize,
    seed: u64,
    log_base: LogBase,
    objective: &O,
) -> Result<SearchResult> {
    if num_trials == 0 {
        return Err(Error::Param("num_trials must be at least 1".into()));
    }
    let records = sample_hyperparameters(num_trials, seed, log_base)
        .into_iter()
        .enumerate()
        .map(|(i, (lr, p))| {
            let config = TrainConfig {
                learning_rate: lr,
                dropout_p: p.min(0.5).min(1.0 - f64::EPSILON),
                seed: seed.wrapping_add(i as u64),
                ..base.clone()
            };
            run_trial::<T, O>(model_config, config, objective)
        })
        .collect::<Result<Vec<_>>>()?;
    pick_best(records, objective.metric())
}

/// Expected maximum of `k` draws with replacement from `scores`:
/// `sum_i s_(i) [(i/n)^k - ((i-1)/n)^k]` over the ascending order statistics.
pub fn expected_validation_performance(scores: &[f64], k: usize) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Param("no scores".into()));
    }
    if k == 0 {
        return Err(Error::Param("k must be at least 1".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let k = k as i32;
    Ok(sorted
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let i = i as f64;
            s * (((i + 1.0) / n).powi(k) - (i / n).powi(k))
        })
        .sum())
}

/// `(a - b) / b`.
pub fn relative_improvement(score_a: f64, score_b: f64) -> Result<f64> {
    if !(score_b > 0.0) {
        return Err(Error::Param(format!("baseline score {score_b} must be positive")));
    }
    Ok((score_a - score_b) / score_b)
}

pub fn write_trials(path: &Path, records: &[TrialRecord]) -> Result<()> {
    let mut out = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        let line = serde_json::to_string(r)?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_trials(path: &Path) -> Result<Vec<TrialRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evp_small_cases() {
        assert!((expected_validation_performance(&[0.2, 0.8], 2).unwrap() - 0.65).abs() < 1e-12);
        let s = [0.3, 0.1, 0.7, 0.5];
        assert!((expected_validation_performance(&s, 1).unwrap() - 0.4).abs() < 1e-12);
        assert!((expected_validation_performance(&s, 500).unwrap() - 0.7).abs() < 1e-12);
        assert!(expected_validation_performance(&[], 1).is_err());
    }

    #[test]
    fn relative_improvement_is_base_relative() {
        assert!((relative_improvement(0.88, 0.80).unwrap() - 0.10).abs() < 1e-12);
        assert_eq!(relative_improvement(0.5, 0.5).unwrap(), 0.0);
        let (ab, ba) = (
            relative_improvement(0.9, 0.6).unwrap(),
            relative_improvement(0.6, 0.9).unwrap(),
        );
        assert!((ab + ba).abs() > 1e-3);
    }

    #[test]
    fn sampled_hyperparameters_respect_bounds() {
        for (lr, p) in sample_hyperparameters(1000, 3, LogBase::Natural) {
            assert!(((-8f64).exp()..=(-1f64).exp()).contains(&lr));
            assert!((0.0..=0.5).contains(&p));
        }
        assert_eq!(
            sample_hyperparameters(5, 9, LogBase::Natural),
            sample_hyperparameters(5, 9, LogBase::Natural)
        );
    }

    #[test]
    fn adam_with_zero_lr_leaves_parameters() {
        use crate::param::Param;
        let mut p = Param::<f64>::full([3], 1.0);
        p.grad = Some(Tensor::full([3], 2.0));
        Adam::new(0.0, AdamConfig::default()).step(&mut p);
        assert_eq!(p.value.data(), [1.0; 3]);
        Adam::new(0.1, AdamConfig::default()).step(&mut p);
        assert!((p.value.data()[0] - 0.9).abs() < 1e-6);
    }
}

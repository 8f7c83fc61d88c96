//! The JSON document read by `train-text --config`.

use std::path::{Path, PathBuf};

use hypermixer::layers::MixingKind;
use hypermixer::model::ModelConfig;
use hypermixer::text::{self, Example, Schema};
use hypermixer::trainer::{LogBase, TrainConfig};
use hypermixer::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub task: TaskSection,
    #[serde(default)]
    pub search: Option<SearchSection>,
    /// Output directory, relative to the config file.
    pub out: PathBuf,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: MixingKind,
    pub num_layers: usize,
    pub d: usize,
    pub d_prime: usize,
    #[serde(default)]
    pub heads: Option<usize>,
    /// Truncation length; defaults per kind for fixed-length mixers.
    #[serde(default)]
    pub n_cap: Option<usize>,
    #[serde(default)]
    pub reinject_positions: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    /// `"sentiment_fixture"` or a path to a training TSV.
    pub train: String,
    /// Validation TSV; the training set is scored when absent.
    #[serde(default)]
    pub valid: Option<String>,
    #[serde(default = "single")]
    pub schema: Schema,
    #[serde(default = "binary")]
    pub labels: Vec<String>,
    #[serde(default = "one")]
    pub min_frequency: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub trials: usize,
    #[serde(default)]
    pub log_base: LogBase,
}

fn single() -> Schema {
    Schema::Single
}

fn binary() -> Vec<String> {
    vec!["0".into(), "1".into()]
}

fn one() -> usize {
    1
}

pub const FIXTURE: &str = "sentiment_fixture";

impl RunConfig {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((config, base))
    }

    pub fn n_cap(&self) -> Option<usize> {
        self.model.n_cap.or_else(|| text::default_n_cap(self.model.kind))
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let labels = self.task.labels.len();
        let mut mc = ModelConfig::classifier(
            self.model.kind,
            self.model.num_layers,
            self.model.d,
            self.model.d_prime,
            vocab_size,
            labels,
            self.n_cap().unwrap_or(0),
        );
        if self.model.kind == MixingKind::Attention {
            if let Some(h) = self.model.heads {
                mc.token_mixing.heads = Some(h);
            }
        }
        mc.token_mixing.reinject_positions = self.model.reinject_positions;
        mc
    }

    fn read(&self, base: &Path, name: &str) -> Result<Vec<Example>> {
        if name == FIXTURE {
            return Ok(text::sentiment_fixture());
        }
        let labels: Vec<&str> = self.task.labels.iter().map(String::as_str).collect();
        text::load_tsv(&base.join(name), self.task.schema, &labels)
    }

    /// Training and validation examples.
    pub fn datasets(&self, base: &Path) -> Result<(Vec<Example>, Vec<Example>)> {
        let train = self.read(base, &self.task.train)?;
        let valid = match &self.task.valid {
            Some(v) => self.read(base, v)?,
            None => train.clone(),
        };
        Ok((train, valid))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let err = serde_json::from_str::<RunConfig>(
            r#"{"model": {"kind": "fnet", "num_layers": 1, "d": 4, "d_prime": 4, "colour": 1},
                "train": {"learning_rate": 0.001, "dropout_p": 0.0, "batch_size": 2, "epochs": 1, "seed": 0},
                "task": {"train": "sentiment_fixture"}, "out": "o", "seed": 0}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }
}

//! TSV loading, tokenisation, vocabulary and padded batching for text
//! classification.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::MixingKind;
use crate::tensor::Mask;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SEP: usize = 2;
const SPECIALS: [&str; 3] = ["[PAD]", "[UNK]", "[SEP]"];

/// 2,000 single-sentence sentiment examples labelled `0`/`1`, with header.
pub const SENTIMENT_FIXTURE: &str = include_str!("../fixtures/sentiment_2k.tsv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schema {
    /// `sentence <TAB> label`
    Single,
    /// `sentence1 <TAB> sentence2 <TAB> label`
    Pair,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub text_a: String,
    pub text_b: Option<String>,
    pub label: usize,
}

/// Parses a TSV file whose first line is a header. Labels must be one of
/// `labels`; the id of a label is its index there.
pub fn load_tsv(path: &Path, schema: Schema, labels: &[&str]) -> Result<Vec<Example>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_tsv(file, schema, labels, &path.display().to_string())
}

pub fn parse_tsv(reader: impl Read, schema: Schema, labels: &[&str], source: &str) -> Result<Vec<Example>> {
    let columns = match schema {
        Schema::Single => 2,
        Schema::Pair => 3,
    };
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::Parse {
            path: source.into(),
            line: line_no,
            msg: e.to_string(),
        })?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != columns {
            return Err(Error::Parse {
                path: source.into(),
                line: line_no,
                msg: format!("expected {columns} columns, found {}", fields.len()),
            });
        }
        let raw = fields[columns - 1].trim();
        let label = labels
            .iter()
            .position(|l| *l == raw)
            .ok_or_else(|| Error::Data(format!("{source}:{line_no}: unknown label {raw:?}")))?;
        out.push(Example {
            text_a: fields[0].to_string(),
            text_b: (schema == Schema::Pair).then(|| fields[1].to_string()),
            label,
        });
    }
    Ok(out)
}

/// Inverse of [`parse_tsv`], header line included.
pub fn write_tsv(out: &mut impl Write, examples: &[Example], labels: &[&str]) -> Result<()> {
    let pair = examples.first().is_some_and(|e| e.text_b.is_some());
    let header = if pair {
        "sentence1\tsentence2\tlabel"
    } else {
        "sentence\tlabel"
    };
    let io = |e: std::io::Error| Error::Data(format!("write failed: {e}"));
    writeln!(out, "{header}").map_err(io)?;
    for e in examples {
        let label = labels
            .get(e.label)
            .ok_or_else(|| Error::Data(format!("label id {} has no name", e.label)))?;
        match &e.text_b {
            Some(b) => writeln!(out, "{}\t{}\t{}", e.text_a, b, label),
            None => writeln!(out, "{}\t{}", e.text_a, label),
        }
        .map_err(io)?;
    }
    Ok(())
}

/// The bundled sentiment fixture.
pub fn sentiment_fixture() -> Vec<Example> {
    parse_tsv(
        SENTIMENT_FIXTURE.as_bytes(),
        Schema::Single,
        &["0", "1"],
        "sentiment_2k.tsv",
    )
    .expect("bundled fixture parses")
}

/// Lowercases, splits on whitespace, and makes every punctuation character
/// a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.to_lowercase().split_whitespace() {
        let mut current = String::new();
        for c in word.chars() {
            if c.is_alphanumeric() {
                current.push(c);
            } else {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(c.to_string());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub min_frequency: usize,
}

impl Vocabulary {
    /// Tokens seen at least `min_frequency` times, most frequent first and
    /// ties broken lexicographically, after the three reserved ids.
    pub fn build(examples: &[Example], min_frequency: usize) -> Result<Self> {
        if min_frequency == 0 {
            return Err(Error::Param("min_frequency must be at least 1".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for e in examples {
            let texts = std::iter::once(&e.text_a).chain(e.text_b.as_ref());
            for tok in texts.flat_map(|t| tokenize(t)) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(String, usize)> =
            counts.into_iter().filter(|(_, c)| *c >= min_frequency).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens, min_frequency))
    }

    fn from_tokens(tokens: Vec<String>, min_frequency: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens,
            index,
            min_frequency,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Sentence pairs become `a [SEP] b`.
    pub fn encode_example(&self, e: &Example) -> Vec<usize> {
        let mut ids = self.encode(&e.text_a);
        if let Some(b) = &e.text_b {
            ids.push(SEP);
            ids.extend(self.encode(b));
        }
        ids
    }
}

/// Default truncation length for fixed-length mixers.
pub fn default_n_cap(kind: MixingKind) -> Option<usize> {
    match kind {
        MixingKind::Mlpmixer => Some(250),
        MixingKind::Gmlp => Some(100),
        _ => None,
    }
}

/// Right-padded token ids with their validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Row-major `[B, N]`.
    pub ids: Vec<usize>,
    pub mask: Mask,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn from_sequences(seqs: &[Vec<usize>], labels: Vec<usize>) -> Result<Self> {
        let n = seqs.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut ids = vec![PAD; seqs.len() * n];
        for (row, s) in ids.chunks_mut(n).zip(seqs) {
            row[..s.len()].copy_from_slice(s);
        }
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len().max(1)).collect();
        Ok(Batch {
            ids,
            mask: Mask::from_lengths(&lengths, n)?,
            labels,
        })
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }
}

/// Iterator over batches of encoded examples in (optionally) shuffled order.
pub struct BatchIter {
    encoded: Vec<(Vec<usize>, usize)>,
    order: Vec<usize>,
    batch_size: usize,
    cursor: usize,
    truncated: usize,
}

impl BatchIter {
    /// Number of sequences cut to `n_cap`.
    pub fn truncated(&self) -> usize {
        self.truncated
    }
}

impl Iterator for BatchIter {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let (seqs, labels): (Vec<_>, Vec<_>) = self.order[self.cursor..end]
            .iter()
            .map(|&i| self.encoded[i].clone())
            .unzip();
        self.cursor = end;
        Some(Batch::from_sequences(&seqs, labels).expect("batch shapes are consistent"))
    }
}

/// Batches `examples`, truncating to `n_cap` tokens. With a seed the order
/// is a seeded shuffle; without, the input order is kept.
pub fn batch_iter(
    examples: &[Example],
    vocab: &Vocabulary,
    batch_size: usize,
    n_cap: Option<usize>,
    seed: Option<u64>,
) -> Result<BatchIter> {
    if batch_size == 0 || n_cap == Some(0) {
        return Err(Error::Param("batch_size and n_cap must be at least 1".into()));
    }
    let mut truncated = 0;
    let encoded = examples
        .iter()
        .map(|e| {
            let mut ids = vocab.encode_example(e);
            if let Some(cap) = n_cap.filter(|&c| ids.len() > c) {
                ids.truncate(cap);
                truncated += 1;
            }
            if ids.is_empty() {
                ids.push(UNK);
            }
            (ids, e.label)
        })
        .collect::<Vec<_>>();
    let mut order: Vec<usize> = (0..encoded.len()).collect();
    if let Some(seed) = seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(BatchIter {
        encoded,
        order,
        batch_size,
        cursor: 0,
        truncated,
    })
}

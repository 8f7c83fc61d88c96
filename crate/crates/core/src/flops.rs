//! Closed-form operation counts for the building blocks, HyperMixer and
//! multi-head self-attention, plus cross-checks against the tape counter.
//!
//! Conventions: a dot product of length `k` costs `2k`; transcendental
//! functions and division cost 1; GELU costs 9 per element; softmax over
//! `N` values costs `3N`; linear layers are counted without bias.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{mlp1_forward, HyperMixing, Mlp};
use crate::tensor::{Mask, Tape, Tensor};

/// `[N, d] x [d, M]`: `N * M` dot products of length `d`.
pub fn flops_matmul(n: u64, d: u64, m: u64) -> u64 {
    n * m * 2 * d
}

/// One vector through a bias-free `(d, d')` linear layer.
pub fn flops_linear(d: u64, d_prime: u64) -> u64 {
    2 * d * d_prime
}

/// GELU over `N` vectors of `d` features.
pub fn flops_gelu(n: u64, d: u64) -> u64 {
    9 * n * d
}

/// MLP `d -> d' -> d` on one vector.
pub fn flops_mlp_equal(d: u64, d_prime: u64) -> u64 {
    4 * d * d_prime + 9 * d_prime
}

/// MLP `d -> d' -> d''` on one vector.
pub fn flops_mlp_unequal(d: u64, d_prime: u64, d_second: u64) -> u64 {
    2 * d * d_prime + 2 * d_prime * d_second + 9 * d_prime
}

/// Softmax over `N` values.
pub fn flops_softmax(n: u64) -> u64 {
    3 * n
}

/// Tied hypernetwork: one `d -> d' -> d'` MLP applied to each of `N` tokens.
pub fn flops_hypernet_tied(n: u64, d: u64, d_prime: u64) -> u64 {
    n * (2 * d * d_prime + 2 * d_prime * d_prime + 9 * d_prime)
}

/// How to read the GELU term of the token-mixing MLP count, which is
/// often written as a bare `9'`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingGeluTerm {
    /// `9 * d'`: GELU over the `d'` hidden units, as everywhere else.
    #[default]
    NineDPrime,
    /// A literal `9`.
    Literal,
}

/// Token-mixing MLP (`N -> d' -> N`) applied to each of the `d` features.
pub fn flops_mixing_mlp(n: u64, d: u64, d_prime: u64) -> u64 {
    flops_mixing_mlp_with(n, d, d_prime, MixingGeluTerm::NineDPrime)
}

pub fn flops_mixing_mlp_with(n: u64, d: u64, d_prime: u64, term: MixingGeluTerm) -> u64 {
    let gelu = match term {
        MixingGeluTerm::NineDPrime => 9 * d_prime,
        MixingGeluTerm::Literal => 9,
    };
    d * (4 * n * d_prime + gelu)
}

/// Tied HyperMixer token mixing: `d(4Nd' + 9d') + N(2dd' + 2d'^2 + 9d')`.
pub fn flops_hypermixer(n: u64, d: u64, d_prime: u64) -> u64 {
    flops_mixing_mlp(n, d, d_prime) + flops_hypernet_tied(n, d, d_prime)
}

fn head_dim(d: u64, h: u64) -> Result<u64> {
    if h == 0 || d % h != 0 {
        return Err(Error::Param(format!("{h} heads do not divide d = {d}")));
    }
    Ok(d / h)
}

/// Multi-head self-attention, term for term in its usual closed form:
/// `h*3*2(d/h)^2 + h*N^2*2(d/h) + 3N + 2N^2 d`.
///
/// The projection term carries no factor of `N` and the softmax term is
/// counted once; see [`flops_attention_corrected`].
pub fn flops_attention(n: u64, d: u64, h: u64) -> Result<u64> {
    let dh = head_dim(d, h)?;
    Ok(h * 3 * 2 * dh * dh + h * (n * n) * 2 * dh + 3 * n + n * n * d * 2)
}

/// Attention with per-token full-width projections (`3 * N * 2d^2`) and a
/// softmax over every row of every head (`3 N^2 h`). For sensitivity
/// analysis only.
pub fn flops_attention_corrected(n: u64, d: u64, h: u64) -> Result<u64> {
    head_dim(d, h)?;
    Ok(3 * n * 2 * d * d + 2 * d * n * n + 3 * n * n * h + 2 * d * n * n)
}

/// Closed-form counts at one configuration, with tape-instrumented counts
/// for the blocks whose closed forms are exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub n: u64,
    pub d: u64,
    pub d_prime: u64,
    pub d_second: u64,
    pub heads: u64,
    pub matmul: u64,
    pub linear: u64,
    pub gelu: u64,
    pub mlp_eq: u64,
    pub mlp_neq: u64,
    pub softmax: u64,
    pub hypernet_tied: u64,
    pub mixing_mlp: u64,
    pub hypermixer_total: u64,
    pub attention_total: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instrumented: Option<InstrumentedFlops>,
}

/// Bias-free counts read from the tape while running the real modules.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstrumentedFlops {
    pub mixing_mlp: u64,
    pub hypernet_tied: u64,
    /// Per token.
    pub mlp_eq: u64,
    /// One row of length `N`.
    pub softmax: u64,
}

impl FlopReport {
    /// `matmul` is `[N, d] x [d, d']`; `gelu` covers `N x d'` values.
    pub fn new(n: u64, d: u64, d_prime: u64, d_second: u64, heads: u64) -> Result<Self> {
        if n == 0 || d == 0 || d_prime == 0 || d_second == 0 {
            return Err(Error::Param("all dimensions must be positive".into()));
        }
        Ok(FlopReport {
            n,
            d,
            d_prime,
            d_second,
            heads,
            matmul: flops_matmul(n, d, d_prime),
            linear: flops_linear(d, d_prime),
            gelu: flops_gelu(n, d_prime),
            mlp_eq: flops_mlp_equal(d, d_prime),
            mlp_neq: flops_mlp_unequal(d, d_prime, d_second),
            softmax: flops_softmax(n),
            hypernet_tied: flops_hypernet_tied(n, d, d_prime),
            mixing_mlp: flops_mixing_mlp(n, d, d_prime),
            hypermixer_total: flops_hypermixer(n, d, d_prime),
            attention_total: flops_attention(n, d, heads)?,
            instrumented: None,
        })
    }

    pub fn with_instrumented(mut self) -> Result<Self> {
        self.instrumented = Some(instrument(
            self.n as usize,
            self.d as usize,
            self.d_prime as usize,
        )?);
        Ok(self)
    }
}

/// Runs mixing MLP, tied hypernetwork, feature MLP and softmax on random
/// inputs (batch of one) and reads the bias-free tape counts of each.
pub fn instrument(n: usize, d: usize, d_prime: usize) -> Result<InstrumentedFlops> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Tensor::<f64>::from_fn([1, n, d], |i| ((i * 7 % 11) as f64 - 5.0) / 5.0);
    let mask = Mask::all_valid(1, n);
    let hyper = HyperMixing::<f64>::new(d, d_prime, true, false, &mut rng);

    let tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let (w1, w2) = hyper.generate(&tape, &xv, None, &mask)?;
    let hypernet = tape.flops();
    mlp1_forward(&w1, &w2, &xv)?;
    let mixing = tape.flops().since(&hypernet);

    let feature = Mlp::<f64>::new(d, d_prime, d, &mut rng);
    let tape = Tape::inference();
    feature.forward(&tape, &tape.constant(Tensor::from_fn([1, d], |i| i as f64)))?;
    let mlp = tape.flops();

    let tape = Tape::inference();
    tape.constant(Tensor::<f64>::from_fn([1, n], |i| i as f64))
        .softmax_rows();
    let softmax = tape.flops();

    Ok(InstrumentedFlops {
        mixing_mlp: mixing.bias_free_total(),
        hypernet_tied: hypernet.bias_free_total(),
        mlp_eq: mlp.bias_free_total(),
        softmax: softmax.bias_free_total(),
    })
}

/// One row of the complexity table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    #[serde(rename = "N")]
    pub n: u64,
    pub flops_hypermixer: u64,
    pub flops_attention: u64,
    /// `flops_attention / flops_hypermixer`.
    pub ratio: f64,
}

pub fn complexity_table(n_list: &[u64], d: u64, d_prime: u64, h: u64) -> Result<Vec<ComplexityRow>> {
    if n_list.is_empty() {
        return Err(Error::Param("empty N list".into()));
    }
    n_list
        .iter()
        .map(|&n| {
            let hm = flops_hypermixer(n, d, d_prime);
            let at = flops_attention(n, d, h)?;
            Ok(ComplexityRow {
                n,
                flops_hypermixer: hm,
                flops_attention: at,
                ratio: at as f64 / hm as f64,
            })
        })
        .collect()
}

/// Writes `N,flops_hypermixer,flops_attention,ratio` rows to `path`.
pub fn emit_complexity_table(
    n_list: &[u64],
    d: u64,
    d_prime: u64,
    h: u64,
    path: &Path,
) -> Result<Vec<ComplexityRow>> {
    let rows = complexity_table(n_list, d, d_prime, h)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in &rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows)
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("{}: {other:?}", path.display())),
    }
}

/// Smallest `N` in `1..=limit` at which attention needs more operations
/// than HyperMixer.
pub fn crossover(d: u64, d_prime: u64, h: u64, limit: u64) -> Result<Option<u64>> {
    for n in 1..=limit {
        if flops_attention(n, d, h)? > flops_hypermixer(n, d, d_prime) {
            return Ok(Some(n));
        }
    }
    Ok(None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_configuration() {
        assert_eq!(flops_mlp_equal(256, 512), 528_896);
        assert_eq!(flops_mlp_equal(7, 3), flops_mlp_unequal(7, 3, 7));
        assert!(flops_attention(10, 256, 3).is_err());
    }

    #[test]
    fn literal_gelu_term_differs_only_in_that_term() {
        let a = flops_mixing_mlp(10, 4, 6);
        let b = flops_mixing_mlp_with(10, 4, 6, MixingGeluTerm::Literal);
        assert_eq!(a - b, 4 * (9 * 6 - 9));
    }

    #[test]
    fn instrumented_counts_match_closed_forms() {
        let r = FlopReport::new(8, 4, 6, 4, 2)
            .unwrap()
            .with_instrumented()
            .unwrap();
        let i = r.instrumented.clone().unwrap();
        assert_eq!(i.mixing_mlp, r.mixing_mlp);
        assert_eq!(i.hypernet_tied, r.hypernet_tied);
        assert_eq!(i.mlp_eq, r.mlp_eq);
        assert_eq!(i.softmax, r.softmax);
        assert_eq!(r.hypermixer_total, r.mixing_mlp + r.hypernet_tied);
    }
}

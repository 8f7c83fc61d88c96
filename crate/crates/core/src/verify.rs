//! Finite-difference gradient suite over the primitive ops and every
//! token-mixing variant inside a full two-layer model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::layers::MixingKind;
use crate::model::{Model, ModelConfig, ModelInput};
use crate::param::Param;
use crate::tensor::{gradcheck, GradcheckOptions, GradcheckReport, Mask, Tape, Tensor, Var};

/// Dims of the per-variant check.
pub const CHECK_LAYERS: usize = 2;
pub const CHECK_D: usize = 4;
pub const CHECK_D_PRIME: usize = 6;
pub const CHECK_N: usize = 5;
const CHECK_VOCAB: usize = 9;
const CHECK_CLASSES: usize = 3;

#[derive(Clone, Debug, Serialize)]
pub struct NamedCheck {
    pub name: String,
    pub report: GradcheckReport,
}

impl NamedCheck {
    pub fn passed(&self) -> bool {
        self.report.passed()
    }
}

fn weights(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

/// A random linear functional of `v`, so no gradient is trivially zero.
fn project<'t>(v: Var<'t, f64>, seed: u64) -> Result<Var<'t, f64>> {
    let w = v.tape().constant(weights(v.shape(), seed));
    Ok(v.mul(&w)?.sum())
}

fn params(shapes: &[&[usize]], seed: u64) -> Vec<Param<f64>> {
    shapes
        .iter()
        .enumerate()
        .map(|(i, s)| Param::new(weights(s, seed + i as u64)))
        .collect()
}

type OpLoss = for<'t> fn(&'t Tape<f64>, &Vec<Param<f64>>) -> Result<Var<'t, f64>>;

fn check_op(name: &str, shapes: &[&[usize]], loss: OpLoss, opts: &GradcheckOptions) -> Result<NamedCheck> {
    let mut ps = params(shapes, 17);
    Ok(NamedCheck {
        name: name.into(),
        report: gradcheck(&mut ps, loss, opts)?,
    })
}

fn ragged() -> Mask {
    Mask::from_lengths(&[3, 2], 3).expect("valid lengths")
}

/// One check per differentiable primitive.
pub fn check_ops(opts: &GradcheckOptions) -> Result<Vec<NamedCheck>> {
    let mut out = Vec::new();
    out.push(check_op(
        "matmul",
        &[&[3, 4], &[4, 2]],
        |t, p| project(t.param(&p[0]).matmul(&t.param(&p[1]))?, 1),
        opts,
    )?);
    out.push(check_op(
        "bmm",
        &[&[2, 4, 3], &[2, 4, 2]],
        |t, p| project(t.param(&p[0]).bmm(&t.param(&p[1]), true, false)?, 2),
        opts,
    )?);
    out.push(check_op(
        "bmm_shared",
        &[&[3, 4], &[2, 3, 5]],
        |t, p| project(t.param(&p[0]).bmm(&t.param(&p[1]), true, false)?, 3),
        opts,
    )?);
    out.push(check_op(
        "mul",
        &[&[2, 3], &[2, 3]],
        |t, p| project(t.param(&p[0]).mul(&t.param(&p[1]))?, 4),
        opts,
    )?);
    out.push(check_op(
        "add_broadcast",
        &[&[2, 3, 4], &[3, 4]],
        |t, p| project(t.param(&p[0]).add_broadcast(&t.param(&p[1]))?, 5),
        opts,
    )?);
    out.push(check_op(
        "add_bias",
        &[&[2, 3, 4], &[4]],
        |t, p| project(t.param(&p[0]).add_bias(&t.param(&p[1]))?, 6),
        opts,
    )?);
    out.push(check_op(
        "gelu",
        &[&[3, 5]],
        |t, p| project(t.param(&p[0]).gelu(), 7),
        opts,
    )?);
    out.push(check_op(
        "softmax",
        &[&[3, 5]],
        |t, p| project(t.param(&p[0]).softmax_rows(), 8),
        opts,
    )?);
    out.push(check_op(
        "masked_softmax",
        &[&[2, 3, 3]],
        |t, p| project(t.param(&p[0]).masked_softmax(&ragged())?, 9),
        opts,
    )?);
    out.push(check_op(
        "layer_norm",
        &[&[2, 5], &[5], &[5]],
        |t, p| {
            let y = t.param(&p[0]).layer_norm(&t.param(&p[1]), &t.param(&p[2]))?;
            project(y, 10)
        },
        opts,
    )?);
    out.push(check_op(
        "mean_pool",
        &[&[2, 3, 4]],
        |t, p| project(t.param(&p[0]).mean_pool(&ragged())?, 11),
        opts,
    )?);
    out.push(check_op(
        "fourier_tokens",
        &[&[2, 3, 4]],
        |t, p| project(t.param(&p[0]).fourier_tokens(&ragged())?, 12),
        opts,
    )?);
    out.push(check_op(
        "narrow_concat",
        &[&[2, 6]],
        |t, p| {
            let x = t.param(&p[0]);
            let y = Var::concat_last(&[x.narrow_last(3, 3)?, x.narrow_last(0, 2)?])?;
            project(y, 13)
        },
        opts,
    )?);
    out.push(check_op(
        "block",
        &[&[4, 5]],
        |t, p| project(t.param(&p[0]).block(1..3, 0..4)?, 14),
        opts,
    )?);
    out.push(check_op(
        "gather_rows",
        &[&[5, 3]],
        |t, p| project(t.param(&p[0]).gather_rows(&[4, 0, 4, 2], &[2, 2])?, 15),
        opts,
    )?);
    out.push(check_op(
        "cross_entropy",
        &[&[3, 4]],
        |t, p| t.param(&p[0]).cross_entropy(&[0, 3, 1]),
        opts,
    )?);
    out.push(check_op(
        "masked_mse",
        &[&[2, 3]],
        |t, p| t.param(&p[0]).masked_mse(&weights(&[2, 3], 16), &ragged()),
        opts,
    )?);
    Ok(out)
}

/// Gradients of a two-layer classifier using `kind`, on a batch of two
/// sequences of which the second is padded.
pub fn check_variant(kind: MixingKind, opts: &GradcheckOptions) -> Result<NamedCheck> {
    let config = ModelConfig::classifier(
        kind,
        CHECK_LAYERS,
        CHECK_D,
        CHECK_D_PRIME,
        CHECK_VOCAB,
        CHECK_CLASSES,
        CHECK_N,
    );
    let mut model = Model::<f64>::seeded(&config, 3)?;
    let ids: Vec<usize> = vec![3, 7, 1, 8, 5, 2, 6, 4, 0, 0];
    let mask = Mask::from_lengths(&[CHECK_N, 3], CHECK_N)?;
    let labels = [2usize, 0];
    let report = gradcheck(
        &mut model,
        |tape, m: &Model<f64>| {
            m.forward(tape, ModelInput::Tokens(&ids), &mask)?
                .cross_entropy(&labels)
        },
        opts,
    )?;
    Ok(NamedCheck {
        name: kind.name().into(),
        report,
    })
}

/// Every variant, in [`MixingKind::ALL`] order.
pub fn check_all_variants(opts: &GradcheckOptions) -> Result<Vec<NamedCheck>> {
    MixingKind::ALL.iter().map(|&k| check_variant(k, opts)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitive_ops_pass() {
        for c in check_ops(&GradcheckOptions::default()).unwrap() {
            assert!(c.passed(), "{}: {}", c.name, c.report.max_rel_error);
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let opts = GradcheckOptions {
            inject_fault: true,
            ..Default::default()
        };
        let c = check_variant(MixingKind::HypermixerTied, &opts).unwrap();
        assert!(!c.passed());
    }
}

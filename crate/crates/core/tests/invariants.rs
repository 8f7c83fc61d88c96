use hypermixer::layers::{MixingKind, TokenMixer, TokenMixingSpec};
use hypermixer::model::{Model, ModelConfig, ModelInput};
use hypermixer::{Error, Mask, Tape, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn permute_rows(x: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let d = x.cols();
    let mut out = x.data().to_vec();
    for (dst, &src) in perm.iter().enumerate() {
        out[dst * d..(dst + 1) * d].copy_from_slice(&x.data()[src * d..(src + 1) * d]);
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

fn mix(mixer: &TokenMixer<f64>, x: &Tensor<f64>, mask: &Mask) -> Tensor<f64> {
    let tape = Tape::inference();
    mixer
        .token_mix(&tape, &tape.constant(x.clone()), mask, None)
        .unwrap()
        .value()
        .clone()
}

/// Largest deviation from `mix(P x) = P mix(x)` over `trials` permutations.
fn equivariance_gap(mixer: &TokenMixer<f64>, n: usize, d: usize, trials: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = random(&[1, n, d], seed);
    let mask = Mask::all_valid(1, n);
    let base = mix(mixer, &x, &mask);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let lhs = mix(mixer, &permute_rows(&x, &perm), &mask);
        worst = worst.max(lhs.max_abs_diff(&permute_rows(&base, &perm)));
    }
    worst
}

fn mixer(kind: MixingKind, d: usize, dp: usize, n_max: usize, seed: u64) -> TokenMixer<f64> {
    let spec = TokenMixingSpec::new(kind, d, dp, n_max);
    TokenMixer::new(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hypermixer_commutes_with_permutations(seed in 0u64..1000, n in 1usize..20, tied in any::<bool>()) {
        let kind = if tied { MixingKind::HypermixerTied } else { MixingKind::HypermixerUntied };
        let m = mixer(kind, 4, 6, 0, seed);
        prop_assert!(equivariance_gap(&m, n, 4, 5, seed) < 1e-9);
    }

    #[test]
    fn attention_and_fnet_free_mixers_commute_with_permutations(seed in 0u64..1000, n in 1usize..12) {
        for kind in [MixingKind::Attention, MixingKind::SharedVector] {
            let m = mixer(kind, 4, 6, 0, seed);
            prop_assert!(equivariance_gap(&m, n, 4, 3, seed) < 1e-9, "{kind}");
        }
    }

    #[test]
    fn padding_does_not_change_valid_outputs(seed in 0u64..1000, len in 1usize..9, pad in 0usize..6) {
        for kind in [
            MixingKind::HypermixerTied,
            MixingKind::HypermixerUntied,
            MixingKind::Attention,
            MixingKind::Fnet,
            MixingKind::SharedVector,
            MixingKind::Mlpmixer,
            MixingKind::Gmlp,
        ] {
            let m = mixer(kind, 4, 6, 16, seed);
            let d = 4;
            let short = random(&[1, len, d], seed);
            let mut padded = short.data().to_vec();
            padded.extend(random(&[pad * d], seed + 1).data());
            let padded = Tensor::new([1, len + pad, d], padded).unwrap();
            let a = mix(&m, &short, &Mask::all_valid(1, len));
            let b = mix(&m, &padded, &Mask::from_lengths(&[len], len + pad).unwrap());
            let diff = a.data().iter().zip(&b.data()[..len * d]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            prop_assert!(diff < 1e-9, "{kind}: {diff}");
            if kind != MixingKind::Fnet {
                prop_assert!(b.data()[len * d..].iter().all(|v| *v == 0.0), "{kind} leaks into padding");
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..1000, r in 1usize..6, c in 1usize..9) {
        let tape = Tape::inference();
        let s = tape.constant(random(&[r, c], seed).map(|v| v * 30.0)).softmax_rows();
        for row in s.value().data().chunks(c) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| *v >= 0.0));
        }
    }
}

#[test]
fn mlpmixer_and_gmlp_are_not_equivariant() {
    let m = mixer(MixingKind::Mlpmixer, 4, 6, 16, 3);
    assert!(equivariance_gap(&m, 16, 4, 20, 3) > 1e-3);
    let mut g = mixer(MixingKind::Gmlp, 4, 6, 16, 3);
    if let TokenMixer::Gmlp(inner) = &mut g {
        inner.spatial.value = random(&[16, 16], 4);
    }
    assert!(equivariance_gap(&g, 16, 4, 20, 3) > 1e-3);
}

fn small_classifier(kind: MixingKind, n_max: usize) -> Model<f64> {
    let config = ModelConfig::classifier(kind, 2, 8, 12, 50, 3, n_max);
    Model::seeded(&config, 11).unwrap()
}

fn logits(model: &Model<f64>, ids: &[usize], lengths: &[usize], n: usize) -> Result<Tensor<f64>, Error> {
    let tape = Tape::inference();
    let mask = Mask::from_lengths(lengths, n)?;
    Ok(model
        .forward(&tape, ModelInput::Tokens(ids), &mask)?
        .value()
        .clone())
}

#[test]
fn one_hypermixer_model_handles_any_length() {
    let model = small_classifier(MixingKind::HypermixerTied, 0);
    for n in [1usize, 7, 53, 301] {
        let ids: Vec<usize> = (0..n).map(|i| 3 + i % 47).collect();
        let out = logits(&model, &ids, &[n], n).unwrap();
        assert_eq!(out.shape(), &[1, 3]);
        assert!(out.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn padded_batches_give_the_same_logits() {
    for kind in [MixingKind::HypermixerTied, MixingKind::Attention] {
        let model = small_classifier(kind, 0);
        let ids: Vec<usize> = (0..9).map(|i| 3 + i * 5 % 47).collect();
        let alone = logits(&model, &ids, &[9], 9).unwrap();
        let mut padded = ids.clone();
        padded.extend([0; 6]);
        let together = logits(&model, &padded, &[9], 15).unwrap();
        assert!(alone.max_abs_diff(&together) < 1e-6, "{kind}");
    }
}

#[test]
fn fixed_length_mixers_reject_long_inputs() {
    let model = small_classifier(MixingKind::Mlpmixer, 250);
    let ids = vec![5usize; 301];
    match logits(&model, &ids, &[301], 301) {
        Err(Error::Capacity {
            n_max: 250, n: 301, ..
        }) => {}
        other => panic!("expected a capacity error, got {other:?}"),
    }
    assert!(logits(&model, &ids[..250], &[250], 250).is_ok());
}

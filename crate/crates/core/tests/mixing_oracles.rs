//! Token-mixing modules against naive loop implementations written from the
//! definitions, on random inputs.

use hypermixer::layers::{
    mlp1_forward, HyperMixing, Linear, MixingKind, Mlp, MultiHeadAttention, TokenMixer, TokenMixingSpec,
};
use hypermixer::{Mask, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-10;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Row-major matrix helper.
#[derive(Clone)]
struct M {
    r: usize,
    c: usize,
    v: Vec<f64>,
}

impl M {
    fn from(t: &Tensor<f64>) -> M {
        let s = t.shape();
        M {
            r: s[s.len() - 2],
            c: s[s.len() - 1],
            v: t.data().to_vec(),
        }
    }
    fn get(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.c + j]
    }
    fn mul(&self, o: &M) -> M {
        assert_eq!(self.c, o.r);
        let mut v = vec![0.0; self.r * o.c];
        for i in 0..self.r {
            for j in 0..o.c {
                for k in 0..self.c {
                    v[i * o.c + j] += self.get(i, k) * o.get(k, j);
                }
            }
        }
        M { r: self.r, c: o.c, v }
    }
    fn t(&self) -> M {
        let mut v = vec![0.0; self.v.len()];
        for i in 0..self.r {
            for j in 0..self.c {
                v[j * self.r + i] = self.get(i, j);
            }
        }
        M {
            r: self.c,
            c: self.r,
            v,
        }
    }
    fn map(&self, f: impl Fn(f64) -> f64) -> M {
        M {
            r: self.r,
            c: self.c,
            v: self.v.iter().map(|&x| f(x)).collect(),
        }
    }
}

fn linear(l: &Linear<f64>, x: &M) -> M {
    let w = M::from(&l.weight.value);
    let mut y = x.mul(&w);
    for i in 0..y.r {
        for j in 0..y.c {
            y.v[i * y.c + j] += l.bias.value.data()[j];
        }
    }
    y
}

fn mlp(m: &Mlp<f64>, x: &M) -> M {
    linear(&m.fc2, &linear(&m.fc1, x).map(gelu))
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn mlp1_forward_is_w1_gelu_w2t_x() {
    let (n, d, dp) = (7, 3, 5);
    let x = random(&[1, n, d], 1);
    let w1 = random(&[n, dp], 2);
    let w2 = random(&[n, dp], 3);
    let tape = Tape::inference();
    let got = mlp1_forward(
        &tape.constant(w1.clone()),
        &tape.constant(w2.clone()),
        &tape.constant(x.clone()),
    )
    .unwrap();
    let want = M::from(&w1).mul(&M::from(&w2).t().mul(&M::from(&x)).map(gelu));
    assert!(max_diff(got.value().data(), &want.v) < TOL);
}

#[test]
fn hypermixing_generates_weights_per_token() {
    let (n, d, dp) = (6, 4, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for tied in [true, false] {
        let hyper = HyperMixing::<f64>::new(d, dp, tied, false, &mut rng);
        let x = random(&[1, n, d], 5);
        let tape = Tape::inference();
        let got = hyper
            .forward(&tape, &tape.constant(x.clone()), &Mask::all_valid(1, n), None)
            .unwrap();

        let xm = M::from(&x);
        let w1 = mlp(&hyper.h1, &xm);
        let w2 = match &hyper.h2 {
            Some(h2) => mlp(h2, &xm),
            None => w1.clone(),
        };
        let w2 = w2.map(|v| v / (n as f64).sqrt());
        let want = w1.mul(&w2.t().mul(&xm).map(gelu)).map(|v| v / (dp as f64).sqrt());
        assert!(max_diff(got.value().data(), &want.v) < TOL, "tied={tied}");
    }
}

#[test]
fn hypermixing_without_scaling_matches_plain_formula() {
    let (n, d, dp) = (5, 3, 4);
    let mut hyper = HyperMixing::<f64>::new(d, dp, true, false, &mut ChaCha8Rng::seed_from_u64(6));
    hyper.fan_in_scaling = false;
    let x = random(&[1, n, d], 7);
    let tape = Tape::inference();
    let got = hyper
        .forward(&tape, &tape.constant(x.clone()), &Mask::all_valid(1, n), None)
        .unwrap();
    let xm = M::from(&x);
    let w = mlp(&hyper.h1, &xm);
    let want = w.mul(&w.t().mul(&xm).map(gelu));
    assert!(max_diff(got.value().data(), &want.v) < TOL);
}

#[test]
fn mlpmixer_uses_leading_rows_of_its_weights() {
    let (n_max, n, d, dp) = (9, 6, 3, 4);
    let spec = TokenMixingSpec::new(MixingKind::Mlpmixer, d, dp, n_max);
    let mixer = TokenMixer::<f64>::new(&spec, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let TokenMixer::MlpMixer(m) = &mixer else { panic!() };
    let x = random(&[1, n, d], 9);
    let tape = Tape::inference();
    let got = mixer
        .token_mix(&tape, &tape.constant(x.clone()), &Mask::all_valid(1, n), None)
        .unwrap();
    let head = |p: &Tensor<f64>| M {
        r: n,
        c: dp,
        v: p.data()[..n * dp].to_vec(),
    };
    let want = head(&m.w1.value).mul(&head(&m.w2.value).t().mul(&M::from(&x)).map(gelu));
    assert!(max_diff(got.value().data(), &want.v) < TOL);
}

#[test]
fn attention_matches_per_head_softmax() {
    let (n, d, h) = (5, 8, 2);
    let att = MultiHeadAttention::<f64>::new(d, h, &mut ChaCha8Rng::seed_from_u64(10));
    let x = random(&[1, n, d], 11);
    let tape = Tape::inference();
    let got = att
        .forward(&tape, &tape.constant(x.clone()), &Mask::all_valid(1, n))
        .unwrap();

    let xm = M::from(&x);
    let (q, k, v) = (
        linear(&att.query, &xm),
        linear(&att.key, &xm),
        linear(&att.value, &xm),
    );
    let dh = d / h;
    let mut merged = M {
        r: n,
        c: d,
        v: vec![0.0; n * d],
    };
    for head in 0..h {
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| {
                    (0..dh)
                        .map(|c| q.get(i, head * dh + c) * k.get(j, head * dh + c))
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for c in 0..dh {
                merged.v[i * d + head * dh + c] = (0..n)
                    .map(|j| (scores[j] - max).exp() / z * v.get(j, head * dh + c))
                    .sum();
            }
        }
    }
    let want = linear(&att.output, &merged);
    assert!(max_diff(got.value().data(), &want.v) < TOL);
}

#[test]
fn fnet_is_real_part_of_token_dft() {
    for n in [4usize, 7, 70, 128] {
        let d = 3;
        let x = random(&[1, n, d], n as u64);
        let spec = TokenMixingSpec::new(MixingKind::Fnet, d, 4, 0);
        let mixer = TokenMixer::<f64>::new(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tape = Tape::inference();
        let got = mixer
            .token_mix(&tape, &tape.constant(x.clone()), &Mask::all_valid(1, n), None)
            .unwrap();
        let xm = M::from(&x);
        let mut want = vec![0.0; n * d];
        for k in 0..n {
            for f in 0..d {
                want[k * d + f] = (0..n)
                    .map(|j| (2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64).cos() * xm.get(j, f))
                    .sum();
            }
        }
        assert!(max_diff(got.value().data(), &want) < 1e-9, "n={n}");
    }
}

#[test]
fn shared_vector_repeats_one_row() {
    let (n, d, dp) = (4, 3, 5);
    let spec = TokenMixingSpec::new(MixingKind::SharedVector, d, dp, 0);
    let mixer = TokenMixer::<f64>::new(&spec, &mut ChaCha8Rng::seed_from_u64(12)).unwrap();
    let TokenMixer::SharedVector(s) = &mixer else {
        panic!()
    };
    let x = random(&[1, n, d], 13);
    let tape = Tape::inference();
    let got = mixer
        .token_mix(&tape, &tape.constant(x.clone()), &Mask::all_valid(1, n), None)
        .unwrap();
    let rows = |p: &Tensor<f64>| M {
        r: n,
        c: dp,
        v: (0..n).flat_map(|_| p.data().to_vec()).collect(),
    };
    let want = rows(&s.w1.value).mul(&rows(&s.w2.value).t().mul(&M::from(&x)).map(gelu));
    assert!(max_diff(got.value().data(), &want.v) < TOL);
}

#[test]
fn gmlp_gates_with_spatial_projection() {
    let (n, d, dp) = (5, 3, 6);
    let spec = TokenMixingSpec::new(MixingKind::Gmlp, d, dp, n);
    let mut mixer = TokenMixer::<f64>::new(&spec, &mut ChaCha8Rng::seed_from_u64(14)).unwrap();
    let TokenMixer::Gmlp(g) = &mut mixer else { panic!() };
    g.spatial.value = random(&[n, n], 15);
    g.gate_bias.value = random(&[n], 16);
    let g = g.clone();
    let x = random(&[1, n, d], 17);
    let tape = Tape::inference();
    let got = mixer
        .token_mix(&tape, &tape.constant(x.clone()), &Mask::all_valid(1, n), None)
        .unwrap();

    let z = linear(&g.proj_in, &M::from(&x)).map(gelu);
    let half = dp / 2;
    let mut gated = M {
        r: n,
        c: half,
        v: vec![0.0; n * half],
    };
    for i in 0..n {
        for c in 0..half {
            let mix: f64 = (0..n)
                .map(|j| g.spatial.value.data()[i * n + j] * z.get(j, half + c))
                .sum();
            gated.v[i * half + c] = z.get(i, c) * (mix + g.gate_bias.value.data()[i]);
        }
    }
    let want = linear(&g.proj_out, &gated);
    assert!(max_diff(got.value().data(), &want.v) < TOL);
}

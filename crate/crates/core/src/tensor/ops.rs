//! Differentiable operations on [`Var`].
//!
//! Every op computes its value eagerly, charges its cost to the tape's
//! [`FlopCounter`](super::FlopCounter) and, when an input is tracked, records
//! a backward rule closing over whatever it needs from the forward pass.

use std::ops::Range;

use rand::Rng;

use super::array::gemm;
use super::fft::{dft_cost, real_dft_columns};
use super::tape::OpKind;
use super::{Mask, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Tanh-approximation constant of GELU.
pub const GELU_C: f64 = 0.044715;

/// Variance floor of layer normalisation.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `(batch, rows, cols)` view of a 2-D or 3-D tensor.
fn batched(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [r, c] => Some((1, r, c)),
        [b, r, c] => Some((b, r, c)),
        _ => None,
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl<'t, T: Scalar> Var<'t, T> {
    /// `[..., K] x [K, P] -> [..., P]`; leading dimensions are flattened into rows.
    pub fn matmul(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = (&*self.value, &*rhs.value);
        if b.ndim() != 2 || a.ndim() == 0 || a.cols() != b.shape()[0] {
            return Err(Error::shape("matmul", a.shape(), b.shape()));
        }
        let (m, k, p) = (a.rows(), a.cols(), b.shape()[1]);
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = p;
        let mut out = Tensor::zeros(shape);
        gemm(m, k, p, a.data(), false, b.data(), false, out.data_mut(), false);
        self.tape.count(OpKind::MatMul, 2 * m * k * p);

        let (av, bv) = (self.value.clone(), rhs.value.clone());
        Ok(self.tape.op(out, &[self, rhs], move |g, needs| {
            let da = needs[0].then(|| {
                let mut d = Tensor::zeros(av.shape());
                gemm(m, p, k, g.data(), false, bv.data(), true, d.data_mut(), false);
                d
            });
            let db = needs[1].then(|| {
                let mut d = Tensor::zeros(bv.shape());
                gemm(k, m, p, av.data(), true, g.data(), false, d.data_mut(), false);
                d
            });
            vec![da, db]
        }))
    }

    /// Batched product `op(A_b) * op(B_b)` over 3-D (or 2-D, batch 1) inputs.
    ///
    /// A batch size of 1 on either side broadcasts against the other. With
    /// `ta`, the stored matrices of `self` are read transposed; same for `tb`.
    pub fn bmm(&self, rhs: &Var<'t, T>, ta: bool, tb: bool) -> Result<Var<'t, T>> {
        let err = || Error::shape("bmm", self.shape(), rhs.shape());
        let (ba, ra, ca) = batched(self.shape()).ok_or_else(err)?;
        let (bb, rb, cb) = batched(rhs.shape()).ok_or_else(err)?;
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, p) = if tb { (cb, rb) } else { (rb, cb) };
        if k != kb || (ba != bb && ba != 1 && bb != 1) {
            return Err(err());
        }
        let batch = ba.max(bb);
        let (sa, sb, sc) = (m * k, k * p, m * p);
        let mut out = Tensor::zeros(if self.value.ndim() == 2 && rhs.value.ndim() == 2 {
            vec![m, p]
        } else {
            vec![batch, m, p]
        });
        {
            let (a, b) = (self.value.data(), rhs.value.data());
            let c = out.data_mut();
            for i in 0..batch {
                let (ia, ib) = (if ba == 1 { 0 } else { i }, if bb == 1 { 0 } else { i });
                gemm(
                    m,
                    k,
                    p,
                    &a[ia * sa..],
                    ta,
                    &b[ib * sb..],
                    tb,
                    &mut c[i * sc..],
                    false,
                );
            }
        }
        self.tape.count(OpKind::MatMul, batch * 2 * m * k * p);

        let (av, bv) = (self.value.clone(), rhs.value.clone());
        Ok(self.tape.op(out, &[self, rhs], move |g, needs| {
            let g = g.data();
            let da = needs[0].then(|| {
                let mut d = Tensor::zeros(av.shape());
                let dd = d.data_mut();
                for i in 0..batch {
                    let ia = if ba == 1 { 0 } else { i };
                    let ib = if bb == 1 { 0 } else { i };
                    let (gb, bm) = (&g[i * sc..], &bv.data()[ib * sb..]);
                    if ta {
                        gemm(k, p, m, bm, tb, gb, true, &mut dd[ia * sa..], true);
                    } else {
                        gemm(m, p, k, gb, false, bm, !tb, &mut dd[ia * sa..], true);
                    }
                }
                d
            });
            let db = needs[1].then(|| {
                let mut d = Tensor::zeros(bv.shape());
                let dd = d.data_mut();
                for i in 0..batch {
                    let ia = if ba == 1 { 0 } else { i };
                    let ib = if bb == 1 { 0 } else { i };
                    let (gb, am) = (&g[i * sc..], &av.data()[ia * sa..]);
                    if tb {
                        gemm(p, m, k, gb, true, am, ta, &mut dd[ib * sb..], true);
                    } else {
                        gemm(k, m, p, am, !ta, gb, false, &mut dd[ib * sb..], true);
                    }
                }
                d
            });
            vec![da, db]
        }))
    }

    pub fn add(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("add", &self.value, &rhs.value)?;
        let out = self.value.zip_map(&rhs.value, |a, b| a + b);
        self.tape.count(OpKind::Elementwise, out.len());
        Ok(self.tape.op(out, &[self, rhs], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]
        }))
    }

    pub fn sub(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("sub", &self.value, &rhs.value)?;
        let out = self.value.zip_map(&rhs.value, |a, b| a - b);
        self.tape.count(OpKind::Elementwise, out.len());
        Ok(self.tape.op(out, &[self, rhs], |g, needs| {
            vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
        }))
    }

    /// Adds a `[N, e]` tensor to every batch item of a `[B, N, e]` tensor.
    pub fn add_broadcast(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        let (b, n, e) = batched(self.shape())
            .filter(|_| self.value.ndim() == 3)
            .ok_or_else(|| Error::shape("add_broadcast", self.shape(), rhs.shape()))?;
        if rhs.shape() != [n, e] {
            return Err(Error::shape("add_broadcast", self.shape(), rhs.shape()));
        }
        let block = n * e;
        let mut out = (*self.value).clone();
        for chunk in out.data_mut().chunks_mut(block) {
            for (o, &v) in chunk.iter_mut().zip(rhs.value.data()) {
                *o += v;
            }
        }
        self.tape.count(OpKind::Elementwise, out.len());
        Ok(self.tape.op(out, &[self, rhs], move |g, needs| {
            let dr = needs[1].then(|| {
                let mut d = Tensor::zeros([n, e]);
                for i in 0..b {
                    for (o, &v) in d.data_mut().iter_mut().zip(&g.data()[i * block..]) {
                        *o += v;
                    }
                }
                d
            });
            vec![needs[0].then(|| g.clone()), dr]
        }))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, rhs: &Var<'t, T>) -> Result<Var<'t, T>> {
        same_shape("mul", &self.value, &rhs.value)?;
        let out = self.value.zip_map(&rhs.value, |a, b| a * b);
        self.tape.count(OpKind::Elementwise, out.len());
        let (av, bv) = (self.value.clone(), rhs.value.clone());
        Ok(self.tape.op(out, &[self, rhs], move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&bv, |g, b| g * b)),
                needs[1].then(|| g.zip_map(&av, |g, a| g * a)),
            ]
        }))
    }

    pub fn scale(&self, factor: f64) -> Var<'t, T> {
        let c = T::from_f64_lossy(factor);
        let out = self.value.map(|v| v * c);
        self.tape.count(OpKind::Elementwise, out.len());
        self.tape
            .op(out, &[self], move |g, _| vec![Some(g.map(|v| v * c))])
    }

    /// Adds a length-`n` bias to every row of a `[..., n]` tensor.
    pub fn add_bias(&self, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        let n = self.value.cols();
        if bias.value.ndim() != 1 || bias.value.len() != n {
            return Err(Error::shape("add_bias", self.shape(), bias.shape()));
        }
        let mut out = (*self.value).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &b) in row.iter_mut().zip(bias.value.data()) {
                *o += b;
            }
        }
        self.tape.count(OpKind::BiasAdd, out.len());
        Ok(self.tape.op(out, &[self, bias], move |g, needs| {
            let db = needs[1].then(|| {
                let mut d = Tensor::zeros([n]);
                for row in g.data().chunks(n) {
                    for (o, &v) in d.data_mut().iter_mut().zip(row) {
                        *o += v;
                    }
                }
                d
            });
            vec![needs[0].then(|| g.clone()), db]
        }))
    }

    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + c x^3)))`, charged 9 operations per element.
    ///
    /// Evaluated as `x * sigmoid(2u)`, which equals the tanh form exactly.
    pub fn gelu(&self) -> Var<'t, T> {
        let s = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
        let c = T::from_f64_lossy(GELU_C);
        let two = T::from_f64_lossy(2.0);
        let three = T::from_f64_lossy(3.0);
        let one = T::one();
        let recording = self.tape.is_recording() && self.node.is_some();
        let xs = self.value.data();
        let mut sig: Vec<T> = xs.iter().map(|&x| -two * s * (x + c * x * x * x)).collect();
        T::exp_in_place(&mut sig);
        for e in sig.iter_mut() {
            *e = one / (one + *e);
        }
        let out = Tensor::new(self.shape(), xs.iter().zip(&sig).map(|(&x, &g)| x * g).collect())
            .expect("same length as input");
        let slope: Vec<T> = if recording {
            xs.iter()
                .zip(&sig)
                .map(|(&x, &g)| g + x * g * (one - g) * two * s * (one + three * c * x * x))
                .collect()
        } else {
            Vec::new()
        };
        self.tape.count(OpKind::Gelu, 9 * out.len());
        if !recording {
            return self.tape.constant(out);
        }
        let fault = if self.tape.gelu_fault() {
            T::from_f64_lossy(1.1)
        } else {
            one
        };
        self.tape.op(out, &[self], move |g, _| {
            let mut d = g.clone();
            for (v, &k) in d.data_mut().iter_mut().zip(&slope) {
                *v *= k * fault;
            }
            vec![Some(d)]
        })
    }

    /// Softmax along the last axis, stabilised by the row maximum.
    ///
    /// Charged `3 * N` per row of length `N` (exp, divide, and the
    /// normalising sum); the max subtraction is not counted.
    pub fn softmax_rows(&self) -> Var<'t, T> {
        self.softmax_impl(None)
            .expect("unmasked softmax has no shape preconditions")
    }

    /// Softmax over the last axis of a `[B, M, N]` tensor where keys that are
    /// invalid in `mask` (shape `[B, N]`) receive weight exactly zero.
    pub fn masked_softmax(&self, mask: &Mask) -> Result<Var<'t, T>> {
        self.softmax_impl(Some(mask))
    }

    fn softmax_impl(&self, mask: Option<&Mask>) -> Result<Var<'t, T>> {
        let n = self.value.cols();
        let rows = self.value.rows();
        let rows_per_batch = if let Some(mask) = mask {
            let (b, m, nn) = batched(self.shape())
                .ok_or_else(|| Error::shape("masked_softmax", self.shape(), &[mask.batch(), mask.len()]))?;
            mask.check("masked_softmax", b, nn)?;
            m
        } else {
            rows.max(1)
        };
        let mut out = Tensor::zeros(self.shape());
        for r in 0..rows {
            let x = self.value.row(r);
            let valid = mask.map(|m| m.row(r / rows_per_batch));
            let is_valid = |j: usize| valid.map_or(true, |v| v[j]);
            let max = (0..n)
                .filter(|&j| is_valid(j))
                .map(|j| x[j])
                .fold(T::neg_infinity(), T::max);
            let o = &mut out.data_mut()[r * n..(r + 1) * n];
            if max == T::neg_infinity() {
                continue;
            }
            for (o, &x) in o.iter_mut().zip(x) {
                *o = x - max;
            }
            T::exp_in_place(o);
            let mut sum = T::zero();
            for (j, o) in o.iter_mut().enumerate() {
                if is_valid(j) {
                    sum += *o;
                } else {
                    *o = T::zero();
                }
            }
            let inv = T::one() / sum;
            for v in o.iter_mut() {
                *v *= inv;
            }
        }
        self.tape.count(OpKind::Softmax, 3 * n * rows);
        if !self.tape.is_recording() || self.node.is_none() {
            return Ok(self.tape.constant(out));
        }
        let yv = out.clone();
        Ok(self.tape.op(out, &[self], move |g, _| {
            let mut d = Tensor::zeros(yv.shape());
            for r in 0..rows {
                let (y, gr) = (yv.row(r), g.row(r));
                let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((o, &y), &g) in d.data_mut()[r * n..(r + 1) * n].iter_mut().zip(y).zip(gr) {
                    *o = y * (g - dot);
                }
            }
            vec![Some(d)]
        }))
    }

    /// Normalises every vector along the last axis to zero mean and unit
    /// variance (with `LAYER_NORM_EPS`), then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Var<'t, T>, bias: &Var<'t, T>) -> Result<Var<'t, T>> {
        let d = self.value.cols();
        if gain.value.shape() != [d] || bias.value.shape() != [d] {
            return Err(Error::shape("layer_norm", self.shape(), gain.shape()));
        }
        let rows = self.value.rows();
        let eps = T::from_f64_lossy(LAYER_NORM_EPS);
        let dn = T::from_usize_lossy(d);
        let mut xhat = Tensor::zeros(self.shape());
        let mut inv_std = vec![T::zero(); rows];
        let mut out = Tensor::zeros(self.shape());
        for r in 0..rows {
            let x = self.value.row(r);
            let mean = x.iter().copied().sum::<T>() / dn;
            let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (x[j] - mean) * is;
                xhat.data_mut()[r * d + j] = h;
                out.data_mut()[r * d + j] = h * gain.value.data()[j] + bias.value.data()[j];
            }
        }
        self.tape.count(OpKind::LayerNorm, 8 * rows * d);
        let gv = gain.value.clone();
        Ok(self.tape.op(out, &[self, gain, bias], move |g, needs| {
            let dx = needs[0].then(|| {
                let mut dx = Tensor::zeros(xhat.shape());
                for r in 0..rows {
                    let (h, gr) = (xhat.row(r), g.row(r));
                    let dh: Vec<T> = gr.iter().zip(gv.data()).map(|(&a, &b)| a * b).collect();
                    let mean_dh = dh.iter().copied().sum::<T>() / dn;
                    let mean_dhh = dh.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() / dn;
                    for j in 0..d {
                        dx.data_mut()[r * d + j] = inv_std[r] * (dh[j] - mean_dh - h[j] * mean_dhh);
                    }
                }
                dx
            });
            let (mut dg, mut db) = (Tensor::zeros([d]), Tensor::zeros([d]));
            for r in 0..rows {
                for j in 0..d {
                    dg.data_mut()[j] += g.row(r)[j] * xhat.row(r)[j];
                    db.data_mut()[j] += g.row(r)[j];
                }
            }
            vec![dx, needs[1].then_some(dg), needs[2].then_some(db)]
        }))
    }

    /// Inverted dropout: in training, zeroes each element with probability
    /// `p` and rescales survivors by `1/(1-p)`; identity otherwise.
    pub fn dropout(&self, p: f64, training: bool, rng: &mut impl Rng) -> Result<Var<'t, T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!(
                "dropout probability must be in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask = Tensor::from_fn(
            self.shape(),
            |_| {
                if rng.gen::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            },
        );
        let out = self.value.zip_map(&mask, |a, m| a * m);
        self.tape.count(OpKind::Elementwise, out.len());
        Ok(self.tape.op(out, &[self], move |g, _| {
            vec![Some(g.zip_map(&mask, |g, m| g * m))]
        }))
    }

    /// Zeroes the rows of a `[B, N, ...]` tensor at invalid mask positions.
    pub fn mask_rows(&self, mask: &Mask) -> Result<Var<'t, T>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(Error::shape("mask_rows", shape, &[mask.batch(), mask.len()]));
        }
        mask.check("mask_rows", shape[0], shape[1])?;
        if mask.is_all_valid() {
            return Ok(self.clone());
        }
        let inner: usize = shape[2..].iter().product();
        let apply = {
            let mask = mask.clone();
            move |t: &Tensor<T>| {
                let mut t = t.clone();
                for (i, chunk) in t.data_mut().chunks_mut(inner.max(1)).enumerate() {
                    if !mask.is_valid(i / mask.len(), i % mask.len()) {
                        chunk.iter_mut().for_each(|v| *v = T::zero());
                    }
                }
                t
            }
        };
        let out = apply(&self.value);
        self.tape.count(OpKind::Elementwise, out.len());
        Ok(self.tape.op(out, &[self], move |g, _| vec![Some(apply(g))]))
    }

    /// Sub-block `rows x cols` of a 2-D tensor.
    pub fn block(&self, rows: Range<usize>, cols: Range<usize>) -> Result<Var<'t, T>> {
        let shape = self.shape().to_vec();
        if shape.len() != 2 || rows.end > shape[0] || cols.end > shape[1] {
            return Err(Error::shape("block", &shape, &[rows.end, cols.end]));
        }
        let (nr, nc, w) = (rows.len(), cols.len(), shape[1]);
        let out = Tensor::from_fn([nr, nc], |i| {
            self.value.data()[(rows.start + i / nc) * w + cols.start + i % nc]
        });
        Ok(self.tape.op(out, &[self], move |g, _| {
            let mut d = Tensor::zeros(shape.clone());
            for i in 0..nr {
                let dst = (rows.start + i) * w + cols.start;
                d.data_mut()[dst..dst + nc].copy_from_slice(g.row(i));
            }
            vec![Some(d)]
        }))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn narrow_last(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let c = self.value.cols();
        if start + len > c {
            return Err(Error::shape("narrow_last", self.shape(), &[start + len]));
        }
        let rows = self.value.rows();
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.value.row(r)[start..start + len]);
        }
        let full = self.shape().to_vec();
        Ok(self.tape.op(Tensor::new(shape, data)?, &[self], move |g, _| {
            let mut d = Tensor::zeros(full.clone());
            for r in 0..rows {
                d.data_mut()[r * c + start..r * c + start + len].copy_from_slice(g.row(r));
            }
            vec![Some(d)]
        }))
    }

    /// Concatenates tensors along the last axis.
    pub fn concat_last(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat_last of nothing".into()))?;
        let lead = &first.shape()[..first.shape().len() - 1];
        for p in parts {
            if &p.shape()[..p.shape().len() - 1] != lead {
                return Err(Error::shape("concat_last", first.shape(), p.shape()));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|p| p.value.cols()).collect();
        let total: usize = widths.iter().sum();
        let rows = first.value.rows();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.value.row(r));
            }
        }
        let mut shape = first.shape().to_vec();
        *shape.last_mut().unwrap() = total;
        let inputs: Vec<&Var<'t, T>> = parts.iter().collect();
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape().to_vec()).collect();
        Ok(first
            .tape
            .op(Tensor::new(shape, data)?, &inputs, move |g, needs| {
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (i, &w) in widths.iter().enumerate() {
                    grads.push(needs[i].then(|| {
                        let mut d = Tensor::zeros(shapes[i].clone());
                        for r in 0..rows {
                            d.data_mut()[r * w..(r + 1) * w].copy_from_slice(&g.row(r)[offset..offset + w]);
                        }
                        d
                    }));
                    offset += w;
                }
                grads
            }))
    }

    /// Row lookup into a `[V, d]` table; `ids` fill a tensor of shape `lead`.
    pub fn gather_rows(&self, ids: &[usize], lead: &[usize]) -> Result<Var<'t, T>> {
        let shape = self.shape().to_vec();
        if shape.len() != 2 || lead.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("gather_rows", &shape, lead));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= shape[0]) {
            return Err(Error::Data(format!(
                "token id {bad} out of range for vocabulary of {}",
                shape[0]
            )));
        }
        let d = shape[1];
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(self.value.row(i));
        }
        let mut out_shape = lead.to_vec();
        out_shape.push(d);
        let ids = ids.to_vec();
        Ok(self.tape.op(Tensor::new(out_shape, data)?, &[self], move |g, _| {
            let mut t = Tensor::zeros(shape.clone());
            for (r, &i) in ids.iter().enumerate() {
                for (o, &v) in t.data_mut()[i * d..(i + 1) * d].iter_mut().zip(g.row(r)) {
                    *o += v;
                }
            }
            vec![Some(t)]
        }))
    }

    /// `[B, N, d] -> [B, d]`, averaging only valid positions.
    pub fn mean_pool(&self, mask: &Mask) -> Result<Var<'t, T>> {
        let (b, n, d) = match *self.shape() {
            [b, n, d] => (b, n, d),
            _ => {
                return Err(Error::shape(
                    "mean_pool",
                    self.shape(),
                    &[mask.batch(), mask.len()],
                ))
            }
        };
        mask.check("mean_pool", b, n)?;
        let weights: Vec<T> = (0..b * n)
            .map(|i| {
                let (bb, j) = (i / n, i % n);
                if mask.is_valid(bb, j) {
                    T::one() / T::from_usize_lossy(mask.count(bb).max(1))
                } else {
                    T::zero()
                }
            })
            .collect();
        let mut out = Tensor::zeros([b, d]);
        for i in 0..b * n {
            let w = weights[i];
            let src = &self.value.data()[i * d..(i + 1) * d];
            for (o, &v) in out.data_mut()[(i / n) * d..(i / n + 1) * d].iter_mut().zip(src) {
                *o += w * v;
            }
        }
        self.tape.count(OpKind::Reduction, 2 * b * n * d);
        Ok(self.tape.op(out, &[self], move |g, _| {
            let mut dx = Tensor::zeros([b, n, d]);
            for i in 0..b * n {
                let w = weights[i];
                let src = g.row(i / n);
                for (o, &v) in dx.data_mut()[i * d..(i + 1) * d].iter_mut().zip(src) {
                    *o = w * v;
                }
            }
            vec![Some(dx)]
        }))
    }

    pub fn sum(&self) -> Var<'t, T> {
        let shape = self.shape().to_vec();
        self.tape.count(OpKind::Reduction, self.value.len());
        self.tape
            .op(Tensor::scalar(self.value.sum()), &[self], move |g, _| {
                vec![Some(Tensor::full(shape.clone(), g.item()))]
            })
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value.len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `[B, C]` logits.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t, T>> {
        let (b, c) = match *self.shape() {
            [b, c] if b == labels.len() => (b, c),
            _ => return Err(Error::shape("cross_entropy", self.shape(), &[labels.len()])),
        };
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = Tensor::zeros([b, c]);
        let mut loss = T::zero();
        for r in 0..b {
            let x = self.value.row(r);
            let max = x.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = x.iter().map(|&v| (v - max).exp()).sum();
            for j in 0..c {
                probs.data_mut()[r * c + j] = (x[j] - max).exp() / sum;
            }
            loss += sum.ln() + max - x[labels[r]];
        }
        let bn = T::from_usize_lossy(b);
        self.tape.count(OpKind::Loss, 4 * b * c);
        let labels = labels.to_vec();
        Ok(self.tape.op(Tensor::scalar(loss / bn), &[self], move |g, _| {
            let scale = g.item() / bn;
            let mut d = probs.clone();
            for (r, &l) in labels.iter().enumerate() {
                d.data_mut()[r * c + l] -= T::one();
            }
            vec![Some(d.map(|v| v * scale))]
        }))
    }

    /// Mean squared error over valid positions of `[B, N]` (or `[B, N, 1]`) predictions.
    pub fn masked_mse(&self, target: &Tensor<T>, mask: &Mask) -> Result<Var<'t, T>> {
        if self.value.len() != target.len() || target.len() != mask.batch() * mask.len() {
            return Err(Error::shape("masked_mse", self.shape(), target.shape()));
        }
        let valid: Vec<bool> = (0..target.len())
            .map(|i| mask.is_valid(i / mask.len(), i % mask.len()))
            .collect();
        let count = T::from_usize_lossy(valid.iter().filter(|&&v| v).count().max(1));
        let diff: Vec<T> = self
            .value
            .data()
            .iter()
            .zip(target.data())
            .zip(&valid)
            .map(|((&p, &t), &v)| if v { p - t } else { T::zero() })
            .collect();
        let loss = diff.iter().map(|&e| e * e).sum::<T>() / count;
        self.tape.count(OpKind::Loss, 3 * diff.len());
        let shape = self.shape().to_vec();
        Ok(self.tape.op(Tensor::scalar(loss), &[self], move |g, _| {
            let s = T::from_f64_lossy(2.0) * g.item() / count;
            vec![Some(
                Tensor::new(shape.clone(), diff.iter().map(|&e| e * s).collect()).unwrap(),
            )]
        }))
    }

    /// Real part of the DFT along the token axis of `[B, N, d]`, taken over
    /// the valid positions of each row only; invalid rows come out zero.
    pub fn fourier_tokens(&self, mask: &Mask) -> Result<Var<'t, T>> {
        let (b, n, d) = batched(self.shape())
            .filter(|_| self.value.ndim() == 3)
            .ok_or_else(|| Error::shape("fourier_tokens", self.shape(), &[mask.batch(), mask.len()]))?;
        mask.check("fourier_tokens", b, n)?;
        let positions: Vec<Vec<usize>> = (0..b).map(|r| mask.valid_positions(r)).collect();
        let transform = move |x: &Tensor<T>| -> Tensor<T> {
            let mut out = Tensor::zeros([b, n, d]);
            for (r, pos) in positions.iter().enumerate() {
                let mut packed = Vec::with_capacity(pos.len() * d);
                for &j in pos {
                    let s = (r * n + j) * d;
                    packed.extend_from_slice(&x.data()[s..s + d]);
                }
                let spectrum = real_dft_columns(&packed, pos.len(), d);
                for (k, &j) in pos.iter().enumerate() {
                    let s = (r * n + j) * d;
                    out.data_mut()[s..s + d].copy_from_slice(&spectrum[k * d..(k + 1) * d]);
                }
            }
            out
        };
        let cost: usize = (0..b).map(|r| dft_cost(mask.count(r), d)).sum();
        self.tape.count(OpKind::Fourier, cost);
        let out = transform(&self.value);
        // The cosine matrix is symmetric, so the transform is its own adjoint.
        Ok(self.tape.op(out, &[self], move |g, _| vec![Some(transform(g))]))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let old = self.shape().to_vec();
        let out = (*self.value).clone().reshape(shape)?;
        Ok(self.tape.op(out, &[self], move |g, _| {
            vec![Some(g.clone().reshape(old.clone()).expect("same element count"))]
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn identity_times_b_is_b() {
        let tape = Tape::<f64>::new();
        let b = t(&[3, 3], &[0.3, -1.2, 4.0, 2.2, 0.0, 1.5, -0.7, 0.9, 3.3]);
        let out = tape
            .constant(Tensor::eye(3))
            .matmul(&tape.constant(b.clone()))
            .unwrap();
        assert_eq!(out.value(), &b);
    }

    #[test]
    fn matmul_counts_two_mpk() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::ones([2, 3]));
        let b = tape.constant(Tensor::ones([3, 4]));
        a.matmul(&b).unwrap();
        assert_eq!(tape.flops().get(OpKind::MatMul), 48);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let err = tape
            .constant(Tensor::ones([2, 3]))
            .matmul(&tape.constant(Tensor::ones([2, 3])))
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn gelu_values_and_count() {
        let tape = Tape::<f64>::new();
        let y = tape
            .constant(t(&[2, 3], &[0.0, 1.0, -1.0, 2.0, 0.5, -3.0]))
            .gelu();
        assert_eq!(y.value().data()[0], 0.0);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
        assert!((y.value().data()[1] - 0.841192).abs() < 1e-6);
        assert_eq!(tape.flops().get(OpKind::Gelu), 54);
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::<f64>::new();
        let y = tape.constant(t(&[1, 4], &[2.0; 4])).softmax_rows();
        assert_eq!(y.value().data(), &[0.25; 4]);
        let y = tape.constant(t(&[1, 2], &[0.0, 3f64.ln()])).softmax_rows();
        assert!((y.value().data()[0] - 0.25).abs() < 1e-12);
        assert!((y.value().data()[1] - 0.75).abs() < 1e-12);
        let y = tape
            .constant(t(&[1, 3], &[1.0, f64::NEG_INFINITY, 2.0]))
            .softmax_rows();
        assert_eq!(y.value().data()[1], 0.0);
        assert_eq!(tape.flops().get(OpKind::Softmax), 3 * 4 + 3 * 2 + 3 * 3);
    }

    #[test]
    fn masked_softmax_zeroes_pad_keys() {
        let tape = Tape::<f64>::new();
        let mask = Mask::from_lengths(&[2], 3).unwrap();
        let y = tape
            .constant(t(&[1, 3, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 9.0, 4.0, 4.0, 4.0]))
            .masked_softmax(&mask)
            .unwrap();
        for r in 0..3 {
            let row = y.value().row(r);
            assert_eq!(row[2], 0.0);
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::ones([2]));
        let b = tape.constant(Tensor::zeros([2]));
        let y = tape.constant(t(&[1, 2], &[1.0, 3.0])).layer_norm(&g, &b).unwrap();
        assert!((y.value().data()[0] + 1.0).abs() < 1e-4);
        assert!((y.value().data()[1] - 1.0).abs() < 1e-4);
        let y = tape.constant(t(&[1, 2], &[5.0, 5.0])).layer_norm(&g, &b).unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn dropout_modes() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = tape.constant(Tensor::ones([100_000]));
        assert_eq!(x.dropout(0.0, true, &mut rng).unwrap().value(), x.value());
        assert_eq!(x.dropout(0.7, false, &mut rng).unwrap().value(), x.value());
        assert!(x.dropout(1.0, true, &mut rng).is_err());
        let y = x.dropout(0.5, true, &mut rng).unwrap();
        let survivors = y.value().data().iter().filter(|&&v| v != 0.0).count() as f64;
        assert!((survivors / 1e5 - 0.5).abs() < 0.01);
        assert!(y.value().data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let g = tape.backward(&x.sum()).unwrap();
        assert_eq!(g.wrt(&x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn gather_rejects_out_of_vocabulary() {
        let tape = Tape::<f64>::new();
        let table = tape.constant(Tensor::zeros([3, 2]));
        assert!(matches!(table.gather_rows(&[0, 3], &[1, 2]), Err(Error::Data(_))));
    }
}

//! Amplitude-aware linear attention.
//!
//! Queries and keys pass through the positive feature map
//! `phi(x) = elu(x) + 1`. For query `i`, with `s = phi(q_i) . sum_m phi(k_m)`,
//! the score against key `j` is
//!
//! ```text
//! A[i][j] = beta * phi(q_i) . phi(k_j) - gamma,   beta = 1 + 1/s,   gamma = s / N
//! ```
//!
//! and `y_i = sum_j A[i][j] v_j`. Every score row sums to exactly one, and
//! scaling `phi(q_i)` up widens the spread of the row, so the query magnitude
//! survives the normalization. Scores can be negative because of the `gamma`
//! offset; nothing here clamps them.
//!
//! Because `beta` and `gamma` are per-query scalars, the sum can be reordered
//! around two context aggregates, `sum_j phi(k_j)^T v_j` and `sum_j v_j`,
//! which is what [`mala_linear`] does in `O(N d dv)`. [`mala_quadratic`]
//! (behind the default `reference` feature) builds the full score matrix and
//! serves as the oracle for the reordered path.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

/// Lower bound applied to `s` before taking `1/s`. `phi > 0` keeps `s`
/// positive, but very negative logits can underflow it.
pub const S_FLOOR: f64 = 1e-6;

/// `elu(x) + 1`: `x + 1` for `x >= 0`, `exp(x)` otherwise.
#[inline]
pub fn phi(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        libm::exp(x)
    }
}

#[inline]
pub fn phi_grad(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        libm::exp(x)
    }
}

pub fn phi_tensor(x: &Tensor) -> Tensor {
    x.map(phi)
}

/// Query, key and value matrices for one attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct MalaInput {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
}

impl MalaInput {
    pub fn new(q: Tensor, k: Tensor, v: Tensor) -> Result<Self> {
        let shape_err = |q: &Tensor, k: &Tensor| Error::Shape {
            op: "mala",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        };
        if q.rank() != 2 || k.rank() != 2 || v.rank() != 2 {
            return Err(shape_err(&q, &v));
        }
        if q.dim(1) != k.dim(1) {
            return Err(shape_err(&q, &k));
        }
        if k.dim(0) != v.dim(0) {
            return Err(shape_err(&k, &v));
        }
        if k.dim(0) == 0 {
            return Err(Error::EmptySequence);
        }
        Ok(Self { q, k, v })
    }

    /// Number of keys (the `N` in `gamma = s / N`).
    pub fn seq_len(&self) -> usize {
        self.k.dim(0)
    }

    pub fn head_dim(&self) -> usize {
        self.q.dim(1)
    }

    pub fn value_dim(&self) -> usize {
        self.v.dim(1)
    }
}

/// The aggregates that make the linear path possible.
#[derive(Debug, Clone, PartialEq)]
pub struct MalaContext {
    /// `sum_j phi(k_j)^T v_j`, `[d, dv]`.
    pub kv: Tensor,
    /// `sum_j v_j`, `[dv]`.
    pub vsum: Tensor,
    /// `sum_m phi(k_m)`, `[d]`; strictly positive.
    pub ksum: Tensor,
}

/// Per-query normalization scalars.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MalaScalars {
    pub s: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl MalaScalars {
    /// From the raw coupling `s = phi(q_i) . ksum` and the key count.
    pub fn new(s: f64, n: usize) -> Self {
        let guarded = s.max(S_FLOOR);
        Self {
            s,
            beta: 1.0 + 1.0 / guarded,
            gamma: s / n as f64,
        }
    }

    pub fn for_query(phi_q: &[f64], ksum: &[f64], n: usize) -> Self {
        Self::new(dot(phi_q, ksum), n)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn mala_context(k: &Tensor, v: &Tensor) -> Result<MalaContext> {
    if k.rank() != 2 || v.rank() != 2 || k.dim(0) != v.dim(0) {
        return Err(Error::Shape {
            op: "mala_context",
            left: k.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    let (n, d, dv) = (k.dim(0), k.dim(1), v.dim(1));
    let mut kv = vec![0.0; d * dv];
    let mut vsum = vec![0.0; dv];
    let mut ksum = vec![0.0; d];
    let mut fk = vec![0.0; d];
    for j in 0..n {
        for (f, &x) in fk.iter_mut().zip(k.row(j)) {
            *f = phi(x);
        }
        let vj = v.row(j);
        for (a, &f) in fk.iter().enumerate() {
            ksum[a] += f;
            let dst = &mut kv[a * dv..(a + 1) * dv];
            for (o, &x) in dst.iter_mut().zip(vj) {
                *o += f * x;
            }
        }
        for (o, &x) in vsum.iter_mut().zip(vj) {
            *o += x;
        }
    }
    Ok(MalaContext {
        kv: Tensor::new(&[d, dv], kv)?,
        vsum: Tensor::new(&[dv], vsum)?,
        ksum: Tensor::new(&[d], ksum)?,
    })
}

/// `O(N)` path: `y_i = beta_i phi(q_i) kv - gamma_i vsum`. Never forms the
/// `N x N` score matrix.
pub fn mala_linear(input: &MalaInput) -> Result<Tensor> {
    let ctx = mala_context(&input.k, &input.v)?;
    let (nq, d, dv) = (input.q.dim(0), input.head_dim(), input.value_dim());
    let n = input.seq_len();
    let mut out = vec![0.0; nq * dv];
    let mut fq = vec![0.0; d];
    let kv = ctx.kv.data();
    for i in 0..nq {
        for (f, &x) in fq.iter_mut().zip(input.q.row(i)) {
            *f = phi(x);
        }
        let sc = MalaScalars::for_query(&fq, ctx.ksum.data(), n);
        let yi = &mut out[i * dv..(i + 1) * dv];
        for (a, &f) in fq.iter().enumerate() {
            let w = sc.beta * f;
            for (o, &x) in yi.iter_mut().zip(&kv[a * dv..(a + 1) * dv]) {
                *o += w * x;
            }
        }
        for (o, &x) in yi.iter_mut().zip(ctx.vsum.data()) {
            *o -= sc.gamma * x;
        }
    }
    Tensor::new(&[nq, dv], out)
}

/// Reference path: materializes the score matrix `A` and returns `(A V, A)`.
/// `O(N^2)` time and memory.
#[cfg(feature = "reference")]
pub fn mala_quadratic(input: &MalaInput) -> Result<(Tensor, Tensor)> {
    let fq = phi_tensor(&input.q);
    let fk = phi_tensor(&input.k);
    let n = input.seq_len();
    let mut scores = matmul(&fq, &fk.transpose()?)?;
    let ksum = crate::tensor::reduce_sum(&fk, 0)?;
    for i in 0..fq.dim(0) {
        let sc = MalaScalars::for_query(fq.row(i), ksum.data(), n);
        for a in &mut scores.data_mut()[i * n..(i + 1) * n] {
            *a = sc.beta * *a - sc.gamma;
        }
    }
    let y = matmul(&scores, &input.v)?;
    Ok((y, scores))
}

/// Same arithmetic as [`mala_quadratic`] but one score row at a time, so
/// memory stays `O(N)` while time stays `O(N^2)`. Used by the benchmark at
/// sequence lengths where the full matrix would not fit.
#[cfg(feature = "reference")]
pub fn mala_quadratic_rowwise(input: &MalaInput) -> Result<Tensor> {
    let fq = phi_tensor(&input.q);
    let fk = phi_tensor(&input.k);
    let n = input.seq_len();
    let dv = input.value_dim();
    let ksum = crate::tensor::reduce_sum(&fk, 0)?;
    let mut out = vec![0.0; fq.dim(0) * dv];
    for i in 0..fq.dim(0) {
        let qi = fq.row(i);
        let sc = MalaScalars::for_query(qi, ksum.data(), n);
        let yi = &mut out[i * dv..(i + 1) * dv];
        for j in 0..n {
            let a = sc.beta * dot(qi, fk.row(j)) - sc.gamma;
            for (o, &x) in yi.iter_mut().zip(input.v.row(j)) {
                *o += a * x;
            }
        }
    }
    Tensor::new(&[fq.dim(0), dv], out)
}

/// Score row `i` with the post-kernel query `phi(q_i)` scaled by `t`.
/// `O(N d)`; does not need the full matrix.
pub fn score_row(input: &MalaInput, i: usize, t: f64) -> Result<Vec<f64>> {
    if i >= input.q.dim(0) {
        return Err(Error::Axis {
            axis: i,
            rank: input.q.dim(0),
        });
    }
    let n = input.seq_len();
    let fq: Vec<f64> = input.q.row(i).iter().map(|&x| t * phi(x)).collect();
    let fk = phi_tensor(&input.k);
    let ksum = crate::tensor::reduce_sum(&fk, 0)?;
    let sc = MalaScalars::for_query(&fq, ksum.data(), n);
    Ok((0..n)
        .map(|j| sc.beta * dot(&fq, fk.row(j)) - sc.gamma)
        .collect())
}

/// `max_j A[i][j] - min_j A[i][j]` with `phi(q_i)` scaled by `t > 0`.
///
/// With the keys fixed the gap is `(t + 1/s_1) (a_max - a_min)`, where
/// `a_j = phi(q_i) . phi(k_j)` and `s_1` is the unscaled coupling, so it grows
/// strictly with `t` unless all `a_j` coincide.
pub fn attention_gap(input: &MalaInput, i: usize, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::Config(alloc::format!("query scale must be positive, got {t}")));
    }
    let row = score_row(input, i, t)?;
    let (lo, hi) = row
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &a| {
            (lo.min(a), hi.max(a))
        });
    Ok(hi - lo)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MalaGrads {
    pub dq: Tensor,
    pub dk: Tensor,
    pub dv: Tensor,
}

/// Gradients of [`mala_linear`] with respect to `Q`, `K` and `V`, flowing
/// through `beta`, `gamma` and `s` (no stop-gradient on the normalizers).
/// Same `O(N d dv)` cost as the forward pass.
pub fn mala_backward(input: &MalaInput, dy: &Tensor) -> Result<MalaGrads> {
    let (nq, d, dv) = (input.q.dim(0), input.head_dim(), input.value_dim());
    if dy.shape() != [nq, dv] {
        return Err(Error::Shape {
            op: "mala_backward",
            left: alloc::vec![nq, dv],
            right: dy.shape().to_vec(),
        });
    }
    let n = input.seq_len();
    let ctx = mala_context(&input.k, &input.v)?;
    let kv = ctx.kv.data();
    let ksum = ctx.ksum.data();
    let vsum = ctx.vsum.data();

    let mut dq = vec![0.0; nq * d];
    let mut dkv = vec![0.0; d * dv];
    let mut dksum = vec![0.0; d];
    let mut dvsum = vec![0.0; dv];
    let mut fq = vec![0.0; d];
    let mut qkv = vec![0.0; dv];
    for i in 0..nq {
        let qrow = input.q.row(i);
        for (f, &x) in fq.iter_mut().zip(qrow) {
            *f = phi(x);
        }
        let sc = MalaScalars::for_query(&fq, ksum, n);
        let g = dy.row(i);

        qkv.iter_mut().for_each(|x| *x = 0.0);
        for (a, &f) in fq.iter().enumerate() {
            for (o, &x) in qkv.iter_mut().zip(&kv[a * dv..(a + 1) * dv]) {
                *o += f * x;
            }
        }
        let dbeta = dot(g, &qkv);
        let dgamma = -dot(g, vsum);
        let dbeta_ds = if sc.s > S_FLOOR { -1.0 / (sc.s * sc.s) } else { 0.0 };
        let ds = dbeta * dbeta_ds + dgamma / n as f64;

        let dqi = &mut dq[i * d..(i + 1) * d];
        for a in 0..d {
            let dfq = sc.beta * dot(&kv[a * dv..(a + 1) * dv], g) + ds * ksum[a];
            dqi[a] = dfq * phi_grad(qrow[a]);
            let w = sc.beta * fq[a];
            for (o, &x) in dkv[a * dv..(a + 1) * dv].iter_mut().zip(g) {
                *o += w * x;
            }
            dksum[a] += ds * fq[a];
        }
        for (o, &x) in dvsum.iter_mut().zip(g) {
            *o -= sc.gamma * x;
        }
    }

    let mut dk = vec![0.0; n * d];
    let mut dvv = vec![0.0; n * dv];
    for j in 0..n {
        let krow = input.k.row(j);
        let vrow = input.v.row(j);
        let dkj = &mut dk[j * d..(j + 1) * d];
        let dvj = &mut dvv[j * dv..(j + 1) * dv];
        dvj.copy_from_slice(&dvsum);
        for a in 0..d {
            let f = phi(krow[a]);
            let row = &dkv[a * dv..(a + 1) * dv];
            dkj[a] = (dot(row, vrow) + dksum[a]) * phi_grad(krow[a]);
            for (o, &x) in dvj.iter_mut().zip(row) {
                *o += f * x;
            }
        }
    }

    Ok(MalaGrads {
        dq: Tensor::new(&[nq, d], dq)?,
        dk: Tensor::new(&[n, d], dk)?,
        dv: Tensor::new(&[n, dv], dvv)?,
    })
}

/// Projection matrices for [`multihead_mala`]; all `[D, D]`, applied as
/// `x . W`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
}

impl MultiHeadWeights {
    pub fn identity(dim: usize) -> Self {
        let eye = Tensor::from_fn(&[dim, dim], |i| if i / dim == i % dim { 1.0 } else { 0.0 });
        Self {
            wq: eye.clone(),
            wk: eye.clone(),
            wv: eye.clone(),
            wo: eye,
        }
    }

    fn dim(&self) -> usize {
        self.wq.dim(0)
    }
}

fn check_heads(x: &Tensor, w: &MultiHeadWeights, heads: usize) -> Result<(usize, usize)> {
    let dim = w.dim();
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(alloc::format!(
            "model width {dim} is not divisible by {heads} heads"
        )));
    }
    if x.rank() != 2 || x.dim(1) != dim {
        return Err(Error::Shape {
            op: "multihead_mala",
            left: x.shape().to_vec(),
            right: w.wq.shape().to_vec(),
        });
    }
    for m in [&w.wk, &w.wv, &w.wo] {
        if m.shape() != w.wq.shape() {
            return Err(Error::Shape {
                op: "multihead_mala",
                left: w.wq.shape().to_vec(),
                right: m.shape().to_vec(),
            });
        }
    }
    Ok((dim, dim / heads))
}

fn take_cols(x: &Tensor, start: usize, width: usize) -> Tensor {
    let n = x.dim(0);
    let stride = x.dim(1);
    Tensor::from_fn(&[n, width], |idx| x.data()[(idx / width) * stride + start + idx % width])
}

fn put_cols(dst: &mut Tensor, src: &Tensor, start: usize) {
    let width = src.dim(1);
    let stride = dst.dim(1);
    for i in 0..src.dim(0) {
        dst.data_mut()[i * stride + start..i * stride + start + width].copy_from_slice(src.row(i));
    }
}

/// Projects `x` (`[N, D]`) to per-head queries, keys and values, runs
/// [`mala_linear`] per head, concatenates and applies the output projection.
pub fn multihead_mala(x: &Tensor, w: &MultiHeadWeights, heads: usize) -> Result<Tensor> {
    let (dim, dh) = check_heads(x, w, heads)?;
    let q = matmul(x, &w.wq)?;
    let k = matmul(x, &w.wk)?;
    let v = matmul(x, &w.wv)?;
    let mut cat = Tensor::zeros(&[x.dim(0), dim]);
    for h in 0..heads {
        let input = MalaInput::new(
            take_cols(&q, h * dh, dh),
            take_cols(&k, h * dh, dh),
            take_cols(&v, h * dh, dh),
        )?;
        put_cols(&mut cat, &mala_linear(&input)?, h * dh);
    }
    matmul(&cat, &w.wo)
}

/// Input and weight gradients of [`multihead_mala`].
pub fn multihead_mala_backward(
    x: &Tensor,
    w: &MultiHeadWeights,
    heads: usize,
    dy: &Tensor,
) -> Result<(Tensor, MultiHeadWeights)> {
    let (dim, dh) = check_heads(x, w, heads)?;
    let n = x.dim(0);
    let q = matmul(x, &w.wq)?;
    let k = matmul(x, &w.wk)?;
    let v = matmul(x, &w.wv)?;
    let mut cat = Tensor::zeros(&[n, dim]);
    let mut inputs = Vec::with_capacity(heads);
    for h in 0..heads {
        let input = MalaInput::new(
            take_cols(&q, h * dh, dh),
            take_cols(&k, h * dh, dh),
            take_cols(&v, h * dh, dh),
        )?;
        put_cols(&mut cat, &mala_linear(&input)?, h * dh);
        inputs.push(input);
    }
    let dwo = matmul(&cat.transpose()?, dy)?;
    let dcat = matmul(dy, &w.wo.transpose()?)?;
    let mut dq = Tensor::zeros(&[n, dim]);
    let mut dk = Tensor::zeros(&[n, dim]);
    let mut dv = Tensor::zeros(&[n, dim]);
    for (h, input) in inputs.iter().enumerate() {
        let g = mala_backward(input, &take_cols(&dcat, h * dh, dh))?;
        put_cols(&mut dq, &g.dq, h * dh);
        put_cols(&mut dk, &g.dk, h * dh);
        put_cols(&mut dv, &g.dv, h * dh);
    }
    let xt = x.transpose()?;
    let grads = MultiHeadWeights {
        wq: matmul(&xt, &dq)?,
        wk: matmul(&xt, &dk)?,
        wv: matmul(&xt, &dv)?,
        wo: dwo,
    };
    let dx = matmul(&dq, &w.wq.transpose()?)?
        .add(&matmul(&dk, &w.wk.transpose()?)?)?
        .add(&matmul(&dv, &w.wv.transpose()?)?)?;
    Ok((dx, grads))
}

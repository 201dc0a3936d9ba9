//! Layer primitives over `[C, H, W]` feature maps with explicit backward
//! passes. Weights are borrowed slices of the model's flat parameter vector;
//! weight gradients are accumulated into the matching slices of a gradient
//! vector of the same layout.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mala::{phi, MalaScalars, S_FLOOR};
use crate::tensor::Tensor;

pub(crate) const NORM_EPS: f64 = 1e-5;

fn plane(x: &Tensor) -> usize {
    x.dim(1) * x.dim(2)
}

/// 1x1 convolution: `y[o] = b[o] + sum_i w[o, i] x[i]`. `w` is `[cout, cin]`.
pub fn pointwise(x: &Tensor, w: &[f64], b: &[f64]) -> Tensor {
    let cin = x.dim(0);
    let cout = b.len();
    let p = plane(x);
    let mut out = vec![0.0; cout * p];
    for o in 0..cout {
        let dst = &mut out[o * p..(o + 1) * p];
        dst.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..cin {
            let k = w[o * cin + i];
            for (d, &s) in dst.iter_mut().zip(&x.data()[i * p..(i + 1) * p]) {
                *d += k * s;
            }
        }
    }
    Tensor::new(&[cout, x.dim(1), x.dim(2)], out).expect("pointwise output shape")
}

/// Returns `dx`; accumulates into `dw` and `db`.
pub fn pointwise_backward(x: &Tensor, w: &[f64], dy: &Tensor, dw: &mut [f64], db: &mut [f64]) -> Tensor {
    let cin = x.dim(0);
    let cout = dy.dim(0);
    let p = plane(x);
    let mut dx = vec![0.0; cin * p];
    for o in 0..cout {
        let g = &dy.data()[o * p..(o + 1) * p];
        db[o] += g.iter().sum::<f64>();
        for i in 0..cin {
            let xi = &x.data()[i * p..(i + 1) * p];
            dw[o * cin + i] += g.iter().zip(xi).map(|(a, b)| a * b).sum::<f64>();
            let k = w[o * cin + i];
            for (d, &gv) in dx[i * p..(i + 1) * p].iter_mut().zip(g) {
                *d += k * gv;
            }
        }
    }
    Tensor::new(x.shape(), dx).expect("pointwise grad shape")
}

/// Saved statistics of [`layer_norm`].
#[derive(Debug, Clone)]
pub struct NormCache {
    xhat: Tensor,
    rstd: Vec<f64>,
}

/// Normalizes each position across channels, then applies a per-channel gain
/// and bias.
pub fn layer_norm(x: &Tensor, gain: &[f64], bias: &[f64]) -> (Tensor, NormCache) {
    let c = x.dim(0);
    let p = plane(x);
    let mut mean = vec![0.0; p];
    let mut var = vec![0.0; p];
    for ch in 0..c {
        for (m, &v) in mean.iter_mut().zip(&x.data()[ch * p..(ch + 1) * p]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= c as f64);
    for ch in 0..c {
        for ((s, &v), &m) in var.iter_mut().zip(&x.data()[ch * p..(ch + 1) * p]).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let rstd: Vec<f64> = var
        .iter()
        .map(|&s| 1.0 / libm::sqrt(s / c as f64 + NORM_EPS))
        .collect();
    let mut xhat = vec![0.0; c * p];
    let mut out = vec![0.0; c * p];
    for ch in 0..c {
        let range = ch * p..(ch + 1) * p;
        for (((xh, o), &v), (&m, &r)) in xhat[range.clone()]
            .iter_mut()
            .zip(&mut out[range.clone()])
            .zip(&x.data()[range])
            .zip(mean.iter().zip(&rstd))
        {
            *xh = (v - m) * r;
            *o = gain[ch] * *xh + bias[ch];
        }
    }
    let xhat = Tensor::new(x.shape(), xhat).expect("norm shape");
    (
        Tensor::new(x.shape(), out).expect("norm shape"),
        NormCache { xhat, rstd },
    )
}

pub fn layer_norm_backward(
    cache: &NormCache,
    gain: &[f64],
    dy: &Tensor,
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Tensor {
    let c = dy.dim(0);
    let p = plane(dy);
    let xhat = cache.xhat.data();
    // dxhat = dy * gain; dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
    let mut m1 = vec![0.0; p];
    let mut m2 = vec![0.0; p];
    for ch in 0..c {
        let g = &dy.data()[ch * p..(ch + 1) * p];
        let xh = &xhat[ch * p..(ch + 1) * p];
        let mut sg = 0.0;
        let mut sgx = 0.0;
        for i in 0..p {
            sg += g[i];
            sgx += g[i] * xh[i];
            let d = g[i] * gain[ch];
            m1[i] += d;
            m2[i] += d * xh[i];
        }
        dbias[ch] += sg;
        dgain[ch] += sgx;
    }
    let inv_c = 1.0 / c as f64;
    let mut dx = vec![0.0; c * p];
    for ch in 0..c {
        let g = &dy.data()[ch * p..(ch + 1) * p];
        let xh = &xhat[ch * p..(ch + 1) * p];
        for i in 0..p {
            dx[ch * p + i] = cache.rstd[i] * (g[i] * gain[ch] - m1[i] * inv_c - xh[i] * m2[i] * inv_c);
        }
    }
    Tensor::new(dy.shape(), dx).expect("norm grad shape")
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// `x * sigmoid(x)`.
pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

pub fn silu_backward(x: &Tensor, dy: &Tensor) -> Tensor {
    x.zip_map(dy, |v, g| {
        let s = sigmoid(v);
        g * (s + v * s * (1.0 - s))
    })
    .expect("silu grad shape")
}

/// 2x2 convolution with stride 2. `w` is `[cout, cin, 2, 2]`. Input height
/// and width must be even.
pub fn down2(x: &Tensor, w: &[f64], b: &[f64]) -> Tensor {
    let (cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let cout = b.len();
    let (oh, ow) = (h / 2, wd / 2);
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        let dst = &mut out[o * oh * ow..(o + 1) * oh * ow];
        dst.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..cin {
            let src = &x.data()[i * h * wd..(i + 1) * h * wd];
            let k = &w[(o * cin + i) * 4..(o * cin + i) * 4 + 4];
            for r in 0..oh {
                let row0 = &src[2 * r * wd..2 * r * wd + wd];
                let row1 = &src[(2 * r + 1) * wd..(2 * r + 1) * wd + wd];
                for c in 0..ow {
                    dst[r * ow + c] += k[0] * row0[2 * c]
                        + k[1] * row0[2 * c + 1]
                        + k[2] * row1[2 * c]
                        + k[3] * row1[2 * c + 1];
                }
            }
        }
    }
    Tensor::new(&[cout, oh, ow], out).expect("down2 shape")
}

pub fn down2_backward(x: &Tensor, w: &[f64], dy: &Tensor, dw: &mut [f64], db: &mut [f64]) -> Tensor {
    let (cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let cout = dy.dim(0);
    let (oh, ow) = (h / 2, wd / 2);
    let mut dx = vec![0.0; cin * h * wd];
    for o in 0..cout {
        let g = &dy.data()[o * oh * ow..(o + 1) * oh * ow];
        db[o] += g.iter().sum::<f64>();
        for i in 0..cin {
            let src = &x.data()[i * h * wd..(i + 1) * h * wd];
            let base = (o * cin + i) * 4;
            let k = [w[base], w[base + 1], w[base + 2], w[base + 3]];
            let mut acc = [0.0; 4];
            let dst = &mut dx[i * h * wd..(i + 1) * h * wd];
            for r in 0..oh {
                for c in 0..ow {
                    let gv = g[r * ow + c];
                    let p00 = 2 * r * wd + 2 * c;
                    let p10 = p00 + wd;
                    acc[0] += gv * src[p00];
                    acc[1] += gv * src[p00 + 1];
                    acc[2] += gv * src[p10];
                    acc[3] += gv * src[p10 + 1];
                    dst[p00] += k[0] * gv;
                    dst[p00 + 1] += k[1] * gv;
                    dst[p10] += k[2] * gv;
                    dst[p10 + 1] += k[3] * gv;
                }
            }
            for t in 0..4 {
                dw[base + t] += acc[t];
            }
        }
    }
    Tensor::new(x.shape(), dx).expect("down2 grad shape")
}

/// 2x2 transposed convolution with stride 2. `w` is `[cin, cout, 2, 2]`.
pub fn up2(x: &Tensor, w: &[f64], b: &[f64]) -> Tensor {
    let (cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let cout = b.len();
    let (oh, ow) = (2 * h, 2 * wd);
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        out[o * oh * ow..(o + 1) * oh * ow].iter_mut().for_each(|v| *v = b[o]);
    }
    for i in 0..cin {
        let src = &x.data()[i * h * wd..(i + 1) * h * wd];
        for o in 0..cout {
            let base = (i * cout + o) * 4;
            let k = [w[base], w[base + 1], w[base + 2], w[base + 3]];
            let dst = &mut out[o * oh * ow..(o + 1) * oh * ow];
            for r in 0..h {
                for c in 0..wd {
                    let v = src[r * wd + c];
                    let p00 = 2 * r * ow + 2 * c;
                    dst[p00] += k[0] * v;
                    dst[p00 + 1] += k[1] * v;
                    dst[p00 + ow] += k[2] * v;
                    dst[p00 + ow + 1] += k[3] * v;
                }
            }
        }
    }
    Tensor::new(&[cout, oh, ow], out).expect("up2 shape")
}

pub fn up2_backward(x: &Tensor, w: &[f64], dy: &Tensor, dw: &mut [f64], db: &mut [f64]) -> Tensor {
    let (cin, h, wd) = (x.dim(0), x.dim(1), x.dim(2));
    let cout = dy.dim(0);
    let ow = 2 * wd;
    let op = 4 * h * wd;
    for o in 0..cout {
        db[o] += dy.data()[o * op..(o + 1) * op].iter().sum::<f64>();
    }
    let mut dx = vec![0.0; cin * h * wd];
    for i in 0..cin {
        let src = &x.data()[i * h * wd..(i + 1) * h * wd];
        let dsrc = &mut dx[i * h * wd..(i + 1) * h * wd];
        for o in 0..cout {
            let base = (i * cout + o) * 4;
            let k = [w[base], w[base + 1], w[base + 2], w[base + 3]];
            let g = &dy.data()[o * op..(o + 1) * op];
            let mut acc = [0.0; 4];
            for r in 0..h {
                for c in 0..wd {
                    let p00 = 2 * r * ow + 2 * c;
                    let gs = [g[p00], g[p00 + 1], g[p00 + ow], g[p00 + ow + 1]];
                    let v = src[r * wd + c];
                    let mut d = 0.0;
                    for t in 0..4 {
                        acc[t] += gs[t] * v;
                        d += k[t] * gs[t];
                    }
                    dsrc[r * wd + c] += d;
                }
            }
            for t in 0..4 {
                dw[base + t] += acc[t];
            }
        }
    }
    Tensor::new(x.shape(), dx).expect("up2 grad shape")
}

/// Which axis of a `[C, H = freq, W = time]` map attention runs along.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum AttentionAxis {
    /// One sequence of `W` time frames per frequency bin.
    Time,
    /// One sequence of `H` frequency bins per time frame.
    Frequency,
}

/// Token addressing for one attention axis: token `t` of sequence `s` sits
/// at flat position `s * outer + t * step` of every channel plane.
#[derive(Clone, Copy)]
struct Axial {
    count: usize,
    len: usize,
    outer: usize,
    step: usize,
}

impl Axial {
    fn new(x: &Tensor, axis: AttentionAxis) -> Self {
        let (h, w) = (x.dim(1), x.dim(2));
        match axis {
            AttentionAxis::Time => Self {
                count: h,
                len: w,
                outer: w,
                step: 1,
            },
            AttentionAxis::Frequency => Self {
                count: w,
                len: h,
                outer: 1,
                step: w,
            },
        }
    }

    /// Copies sequence `s` of the channel plane starting at `base`.
    #[inline]
    fn load(&self, src: &[f64], base: usize, s: usize, dst: &mut [f64]) {
        let start = base + s * self.outer;
        if self.step == 1 {
            dst.copy_from_slice(&src[start..start + self.len]);
        } else {
            for (t, d) in dst.iter_mut().enumerate() {
                *d = src[start + t * self.step];
            }
        }
    }

    #[inline]
    fn store(&self, dst: &mut [f64], base: usize, s: usize, src: &[f64]) {
        let start = base + s * self.outer;
        if self.step == 1 {
            dst[start..start + self.len].copy_from_slice(src);
        } else {
            for (t, &v) in src.iter().enumerate() {
                dst[start + t * self.step] = v;
            }
        }
    }
}

fn check_attention(x: &Tensor, w: &[f64], heads: usize) -> Result<usize> {
    let c = x.dim(0);
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::Config(alloc::format!(
            "model width {c} is not divisible by {heads} heads"
        )));
    }
    if w.len() != 4 * c * c {
        return Err(Error::Shape {
            op: "axial_attention",
            left: vec![4 * c * c],
            right: vec![w.len()],
        });
    }
    Ok(c / heads)
}

/// `x W` per position for a `[C, C]` matrix `w` stored row-major by input
/// channel, i.e. a 1x1 convolution with the transposed kernel.
fn project(x: &Tensor, w: &[f64]) -> Tensor {
    let c = x.dim(0);
    let wt: Vec<f64> = (0..c * c).map(|idx| w[(idx % c) * c + idx / c]).collect();
    pointwise(x, &wt, &vec![0.0; c])
}

fn project_backward(x: &Tensor, w: &[f64], dy: &Tensor, dw: &mut [f64]) -> Tensor {
    let c = x.dim(0);
    let wt: Vec<f64> = (0..c * c).map(|idx| w[(idx % c) * c + idx / c]).collect();
    let mut dwt = vec![0.0; c * c];
    let dx = pointwise_backward(x, &wt, dy, &mut dwt, &mut vec![0.0; c]);
    for (idx, g) in dwt.into_iter().enumerate() {
        dw[(idx % c) * c + idx / c] += g;
    }
    dx
}

/// One head of one sequence, copied out channel by channel so every
/// operation runs over a contiguous row of `len` positions.
struct Rows {
    len: usize,
    fq: Vec<f64>,
    fk: Vec<f64>,
    v: Vec<f64>,
    kv: Vec<f64>,
    ksum: Vec<f64>,
    vsum: Vec<f64>,
    beta: Vec<f64>,
    gamma: Vec<f64>,
    /// `s` per position, for the floor test in the backward pass.
    s: Vec<f64>,
}

impl Rows {
    fn new(dh: usize, len: usize) -> Self {
        Self {
            len,
            fq: vec![0.0; dh * len],
            fk: vec![0.0; dh * len],
            v: vec![0.0; dh * len],
            kv: vec![0.0; dh * dh],
            ksum: vec![0.0; dh],
            vsum: vec![0.0; dh],
            beta: vec![0.0; len],
            gamma: vec![0.0; len],
            s: vec![0.0; len],
        }
    }

    /// Loads sequence `s` of head channels `ch0..ch0 + dh` and forms the
    /// context sums and per-position scalars.
    fn load(&mut self, pr: (&[f64], &[f64], &[f64]), ax: &Axial, seq: usize, ch0: usize, p: usize) {
        let (len, dh) = (self.len, self.ksum.len());
        for a in 0..dh {
            let base = (ch0 + a) * p;
            ax.load(pr.0, base, seq, &mut self.fq[a * len..(a + 1) * len]);
            ax.load(pr.1, base, seq, &mut self.fk[a * len..(a + 1) * len]);
            ax.load(pr.2, base, seq, &mut self.v[a * len..(a + 1) * len]);
        }
        for a in 0..dh {
            let fk = &self.fk[a * len..(a + 1) * len];
            self.ksum[a] = fk.iter().sum();
            self.vsum[a] = self.v[a * len..(a + 1) * len].iter().sum();
            for b in 0..dh {
                self.kv[a * dh + b] = dot(fk, &self.v[b * len..(b + 1) * len]);
            }
        }
        self.s.iter_mut().for_each(|x| *x = 0.0);
        for a in 0..dh {
            axpy(self.ksum[a], &self.fq[a * len..(a + 1) * len], &mut self.s);
        }
        for t in 0..len {
            let sc = MalaScalars::new(self.s[t], len);
            self.beta[t] = sc.beta;
            self.gamma[t] = sc.gamma;
        }
    }

    /// `out[b] = sum_a kv[a][b] fq[a]` for every position.
    fn query_context(&self, out: &mut [f64]) {
        let (len, dh) = (self.len, self.ksum.len());
        out.iter_mut().for_each(|x| *x = 0.0);
        for b in 0..dh {
            let row = &mut out[b * len..(b + 1) * len];
            for a in 0..dh {
                axpy(self.kv[a * dh + b], &self.fq[a * len..(a + 1) * len], row);
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(k: f64, x: &[f64], y: &mut [f64]) {
    for (o, &v) in y.iter_mut().zip(x) {
        *o += k * v;
    }
}

/// Maps after the input projections: raw queries and keys, their feature
/// maps, values and the concatenated per-head attention outputs.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    q: Tensor,
    k: Tensor,
    fq: Tensor,
    fk: Tensor,
    v: Tensor,
    cat: Tensor,
}

fn attend(x: &Tensor, w: &[f64], heads: usize, axis: AttentionAxis) -> Result<AttentionCache> {
    let dh = check_attention(x, w, heads)?;
    let c = x.dim(0);
    let cc = c * c;
    let q = project(x, &w[..cc]);
    let k = project(x, &w[cc..2 * cc]);
    let v = project(x, &w[2 * cc..3 * cc]);
    let fq = q.map(phi);
    let fk = k.map(phi);
    let ax = Axial::new(x, axis);
    let p = plane(x);
    let mut cat = vec![0.0; c * p];
    let mut rows = Rows::new(dh, ax.len);
    let mut out = vec![0.0; dh * ax.len];
    let len = ax.len;
    for s in 0..ax.count {
        for h in 0..heads {
            let ch0 = h * dh;
            rows.load((fq.data(), fk.data(), v.data()), &ax, s, ch0, p);
            rows.query_context(&mut out);
            for b in 0..dh {
                let row = &mut out[b * len..(b + 1) * len];
                for t in 0..len {
                    row[t] = rows.beta[t] * row[t] - rows.gamma[t] * rows.vsum[b];
                }
                ax.store(&mut cat, (ch0 + b) * p, s, row);
            }
        }
    }
    Ok(AttentionCache {
        q,
        k,
        fq,
        fk,
        v,
        cat: Tensor::new(x.shape(), cat)?,
    })
}

/// Multi-head amplitude-aware attention applied independently to every
/// sequence along `axis`. `w` holds `wq, wk, wv, wo` back to back, each
/// `[C, C]` and applied to tokens as row vectors (`x W`).
pub fn axial_attention(x: &Tensor, w: &[f64], heads: usize, axis: AttentionAxis) -> Result<Tensor> {
    Ok(axial_attention_cached(x, w, heads, axis)?.0)
}

/// [`axial_attention`] that also returns the intermediate maps, so the
/// backward pass need not recompute them.
pub fn axial_attention_cached(
    x: &Tensor,
    w: &[f64],
    heads: usize,
    axis: AttentionAxis,
) -> Result<(Tensor, AttentionCache)> {
    let pr = attend(x, w, heads, axis)?;
    let cc = x.dim(0) * x.dim(0);
    Ok((project(&pr.cat, &w[3 * cc..]), pr))
}

/// Returns `dx`; accumulates the weight gradient into `dw` (same layout as
/// `w`).
pub fn axial_attention_backward(
    x: &Tensor,
    w: &[f64],
    heads: usize,
    axis: AttentionAxis,
    dy: &Tensor,
    dw: &mut [f64],
) -> Result<Tensor> {
    let pr = attend(x, w, heads, axis)?;
    axial_attention_backward_cached(&pr, x, w, heads, axis, dy, dw)
}

/// `d phi(x) / dx` from `x` and `phi(x)`: 1 on the linear branch, `phi(x)`
/// on the exponential one.
#[inline]
fn phi_grad_from(x: f64, fx: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        fx
    }
}

/// [`axial_attention_backward`] reusing the maps from
/// [`axial_attention_cached`] on the same `x` and `w`.
pub fn axial_attention_backward_cached(
    pr: &AttentionCache,
    x: &Tensor,
    w: &[f64],
    heads: usize,
    axis: AttentionAxis,
    dy: &Tensor,
    dw: &mut [f64],
) -> Result<Tensor> {
    let c = x.dim(0);
    let cc = c * c;
    let dh = c / heads;
    let dcat = project_backward(&pr.cat, &w[3 * cc..], dy, &mut dw[3 * cc..]);
    let ax = Axial::new(x, axis);
    let len = ax.len;
    let p = plane(x);
    let mut dfq = vec![0.0; c * p];
    let mut dfk = vec![0.0; c * p];
    let mut dv = vec![0.0; c * p];
    let mut rows = Rows::new(dh, len);
    let mut g = vec![0.0; dh * len];
    let mut qkv = vec![0.0; dh * len];
    let mut ds = vec![0.0; len];
    let mut bg = vec![0.0; len];
    let mut dkv = vec![0.0; dh * dh];
    let mut dksum = vec![0.0; dh];
    let mut dvsum = vec![0.0; dh];
    let mut buf = vec![0.0; len];
    for s in 0..ax.count {
        for h in 0..heads {
            let ch0 = h * dh;
            rows.load((pr.fq.data(), pr.fk.data(), pr.v.data()), &ax, s, ch0, p);
            for b in 0..dh {
                ax.load(dcat.data(), (ch0 + b) * p, s, &mut g[b * len..(b + 1) * len]);
            }
            rows.query_context(&mut qkv);
            for t in 0..len {
                let (mut dbeta, mut dgamma) = (0.0, 0.0);
                for b in 0..dh {
                    dbeta += g[b * len + t] * qkv[b * len + t];
                    dgamma -= g[b * len + t] * rows.vsum[b];
                }
                let st = rows.s[t];
                let dbeta_ds = if st > S_FLOOR { -1.0 / (st * st) } else { 0.0 };
                ds[t] = dbeta * dbeta_ds + dgamma / len as f64;
            }
            for b in 0..dh {
                let gb = &g[b * len..(b + 1) * len];
                dvsum[b] = -dot(&rows.gamma, gb);
            }
            for a in 0..dh {
                let fqa = &rows.fq[a * len..(a + 1) * len];
                // d fq[a] = beta * sum_b kv[a][b] g[b] + ds * ksum[a]
                buf.iter_mut().for_each(|x| *x = 0.0);
                for b in 0..dh {
                    axpy(rows.kv[a * dh + b], &g[b * len..(b + 1) * len], &mut buf);
                }
                for t in 0..len {
                    buf[t] = rows.beta[t] * buf[t] + ds[t] * rows.ksum[a];
                }
                ax.store(&mut dfq, (ch0 + a) * p, s, &buf);
                for t in 0..len {
                    bg[t] = rows.beta[t] * fqa[t];
                }
                for b in 0..dh {
                    dkv[a * dh + b] = dot(&bg, &g[b * len..(b + 1) * len]);
                }
                dksum[a] = dot(&ds, fqa);
            }
            for a in 0..dh {
                buf.iter_mut().for_each(|x| *x = dksum[a]);
                for b in 0..dh {
                    axpy(dkv[a * dh + b], &rows.v[b * len..(b + 1) * len], &mut buf);
                }
                ax.store(&mut dfk, (ch0 + a) * p, s, &buf);
            }
            for b in 0..dh {
                buf.iter_mut().for_each(|x| *x = dvsum[b]);
                for a in 0..dh {
                    axpy(dkv[a * dh + b], &rows.fk[a * len..(a + 1) * len], &mut buf);
                }
                ax.store(&mut dv, (ch0 + b) * p, s, &buf);
            }
        }
    }
    for ((g, &q), &f) in dfq.iter_mut().zip(pr.q.data()).zip(pr.fq.data()) {
        *g *= phi_grad_from(q, f);
    }
    for ((g, &k), &f) in dfk.iter_mut().zip(pr.k.data()).zip(pr.fk.data()) {
        *g *= phi_grad_from(k, f);
    }
    let dq = Tensor::new(x.shape(), dfq)?;
    let dk = Tensor::new(x.shape(), dfk)?;
    let dv = Tensor::new(x.shape(), dv)?;
    let mut dx = project_backward(x, &w[..cc], &dq, &mut dw[..cc]);
    for (part, range) in [(&dk, cc..2 * cc), (&dv, 2 * cc..3 * cc)] {
        let d = project_backward(x, &w[range.clone()], part, &mut dw[range]);
        for (a, b) in dx.data_mut().iter_mut().zip(d.data()) {
            *a += b;
        }
    }
    Ok(dx)
}

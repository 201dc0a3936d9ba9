//! Dense row-major tensors and the handful of kernels the rest of the crate
//! is built from.
//!
//! Everything here is sequential and allocation-explicit: the same inputs
//! always produce bit-identical outputs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Wraps `data` with `shape`. A zero-sized dimension is allowed so that
    /// empty channel groups can be represented.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                left: shape.to_vec(),
                right: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Dimension `i`, panicking on out-of-range like slice indexing.
    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape, self.data)
    }

    /// Element of a rank-2 tensor.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    /// Element of a rank-3 tensor.
    pub fn at3(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.shape[1] + i) * self.shape[2] + j]
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.same_shape("zip_map", other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|x| k * x)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, &x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.same_shape("max_abs_diff", other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (&a, &b)| m.max((a - b).abs())))
    }

    /// `max|self - reference| / max|reference|`; falls back to the absolute
    /// deviation when the reference is identically zero.
    pub fn rel_diff(&self, reference: &Tensor) -> Result<f64> {
        let d = self.max_abs_diff(reference)?;
        let scale = reference.max_abs();
        Ok(if scale > 0.0 { d / scale } else { d })
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                left: self.shape.clone(),
                right: Vec::new(),
            });
        }
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Self {
            shape: vec![n, m],
            data: out,
        })
    }

    fn same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }
}

/// `[m x k] . [k x n] -> [m x n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Raw-slice matmul accumulating into `out` (`out += a . b`), i-k-j order.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// Sum along `axis`, dropping that dimension. Reducing a rank-1 tensor yields
/// a one-element tensor.
pub fn reduce_sum(x: &Tensor, axis: usize) -> Result<Tensor> {
    let rank = x.rank();
    if axis >= rank {
        return Err(Error::Axis { axis, rank });
    }
    let outer: usize = x.shape[..axis].iter().product();
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for a in 0..len {
            let base = (o * len + a) * inner;
            for (d, &v) in dst.iter_mut().zip(&x.data[base..base + inner]) {
                *d += v;
            }
        }
    }
    let mut shape: Vec<usize> = x.shape.clone();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Ok(Tensor { shape, data: out })
}

/// Uniform values in `[-scale, scale)`.
pub fn rand_init(shape: &[usize], rng: &mut Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.uniform(-scale, scale))
}

fn check_conv(x: &Tensor, w: &Tensor, pad: (usize, usize)) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    if x.rank() != 3 || w.rank() != 3 || x.shape[0] != w.shape[0] {
        return Err(Error::Shape {
            op: "dwconv2d",
            left: x.shape.clone(),
            right: w.shape.clone(),
        });
    }
    let (c, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let (kh, kw) = (w.shape[1], w.shape[2]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Geometry { kh, kw });
    }
    let oh = (h + 2 * pad.0 + 1).saturating_sub(kh);
    let ow = (wd + 2 * pad.1 + 1).saturating_sub(kw);
    if oh == 0 || ow == 0 {
        return Err(Error::Shape {
            op: "dwconv2d",
            left: x.shape.clone(),
            right: w.shape.clone(),
        });
    }
    Ok((c, h, wd, kh, kw, oh, ow))
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `k` so that the
/// input index `o + k - pad` lies inside `[0, len)`.
#[inline]
fn tap_range(k: usize, pad: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(out_len);
    (lo, hi.max(lo))
}

/// Depthwise 2-D cross-correlation with zero padding: channel `c` of the
/// output only sees channel `c` of the input. No kernel flip.
///
/// `x` is `[C, H, W]`, `w` is `[C, kh, kw]` with odd `kh`, `kw`.
pub fn dwconv2d(x: &Tensor, w: &Tensor, pad: (usize, usize)) -> Result<Tensor> {
    let (c, h, wd, kh, kw, oh, ow) = check_conv(x, w, pad)?;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let xin = &x.data[ch * h * wd..(ch + 1) * h * wd];
        let ker = &w.data[ch * kh * kw..(ch + 1) * kh * kw];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for a in 0..kh {
            let (ilo, ihi) = tap_range(a, pad.0, h, oh);
            for b in 0..kw {
                let k = ker[a * kw + b];
                if k == 0.0 {
                    continue;
                }
                let (jlo, jhi) = tap_range(b, pad.1, wd, ow);
                if jlo == jhi {
                    continue;
                }
                for i in ilo..ihi {
                    let src = (i + a - pad.0) * wd + b;
                    let row = &mut dst[i * ow + jlo..i * ow + jhi];
                    let srow = &xin[src + jlo - pad.1..src + jhi - pad.1];
                    for (o, &v) in row.iter_mut().zip(srow) {
                        *o += k * v;
                    }
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![c, oh, ow],
        data: out,
    })
}

/// Gradients of [`dwconv2d`] with respect to its input and its kernel.
pub fn dwconv2d_backward(
    x: &Tensor,
    w: &Tensor,
    pad: (usize, usize),
    dy: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (c, h, wd, kh, kw, oh, ow) = check_conv(x, w, pad)?;
    if dy.shape != [c, oh, ow] {
        return Err(Error::Shape {
            op: "dwconv2d_backward",
            left: vec![c, oh, ow],
            right: dy.shape.clone(),
        });
    }
    let mut dx = vec![0.0; c * h * wd];
    let mut dw = vec![0.0; c * kh * kw];
    for ch in 0..c {
        let xin = &x.data[ch * h * wd..(ch + 1) * h * wd];
        let ker = &w.data[ch * kh * kw..(ch + 1) * kh * kw];
        let g = &dy.data[ch * oh * ow..(ch + 1) * oh * ow];
        let dxc = &mut dx[ch * h * wd..(ch + 1) * h * wd];
        let dwc = &mut dw[ch * kh * kw..(ch + 1) * kh * kw];
        for a in 0..kh {
            let (ilo, ihi) = tap_range(a, pad.0, h, oh);
            for b in 0..kw {
                let k = ker[a * kw + b];
                let (jlo, jhi) = tap_range(b, pad.1, wd, ow);
                if jlo == jhi {
                    continue;
                }
                let mut acc = 0.0;
                for i in ilo..ihi {
                    let src = (i + a - pad.0) * wd + b;
                    let grow = &g[i * ow + jlo..i * ow + jhi];
                    let xrow = &xin[src + jlo - pad.1..src + jhi - pad.1];
                    let dxrow = &mut dxc[src + jlo - pad.1..src + jhi - pad.1];
                    for ((&gv, &xv), d) in grow.iter().zip(xrow).zip(dxrow) {
                        acc += gv * xv;
                        *d += k * gv;
                    }
                }
                dwc[a * kw + b] += acc;
            }
        }
    }
    Ok((
        Tensor {
            shape: vec![c, h, wd],
            data: dx,
        },
        Tensor {
            shape: vec![c, kh, kw],
            data: dw,
        },
    ))
}

//! Forward and backward kernels on plain tensors. The tape in
//! [`super::Tape`] records calls to these; they are also usable directly
//! for inference-only paths.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// `op(a) · op(b)` where `a` is stored row-major as `m×k` (or `k×m` when
/// `trans_a`) and `b` as `k×n` (or `n×k` when `trans_b`).
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    gemm_acc(m, k, n, a, trans_a, b, trans_b, T::zero(), &mut c);
    c
}

/// Like [`gemm`] but writes `c = op(a)·op(b) + beta·c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    let sa = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let sb = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    if k == 0 {
        return;
    }
    T::gemm(m, k, n, T::one(), a, sa, b, sb, beta, c);
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let data = gemm(m, k, n, a.data(), false, b.data(), false);
    Ok(Tensor::from_parts_unchecked(vec![m, n], data))
}

/// Column-wise softmax with max subtraction: every column sums to one.
pub fn softmax_cols<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = x.dims2("softmax_cols")?;
    let src = x.data();
    let mut out = vec![T::zero(); m * n];
    for j in 0..n {
        let mut max = T::neg_infinity();
        for i in 0..m {
            max = max.max(src[i * n + j]);
        }
        let mut total = T::zero();
        for i in 0..m {
            let e = (src[i * n + j] - max).exp();
            out[i * n + j] = e;
            total += e;
        }
        for i in 0..m {
            out[i * n + j] = out[i * n + j] / total;
        }
    }
    Ok(Tensor::from_parts_unchecked(vec![m, n], out))
}

/// Gradient of column softmax given its output `y` and upstream `g`.
pub(crate) fn softmax_cols_backward<T: Scalar>(y: &[T], g: &[T], m: usize, n: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); m * n];
    for j in 0..n {
        let mut dot = T::zero();
        for i in 0..m {
            dot += y[i * n + j] * g[i * n + j];
        }
        for i in 0..m {
            dx[i * n + j] = y[i * n + j] * (g[i * n + j] - dot);
        }
    }
    dx
}

/// Geometry of a 2-d cross-correlation on a `C×H×W` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new<T: Scalar>(
        x: &Tensor<T>,
        w: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let (c_in, h, wd) = x.dims3("conv2d")?;
        let &[c_out, wc_in, kh, kw] = w.shape() else {
            return Err(Error::dim(
                "conv2d",
                format!("kernel must be rank 4, got {:?}", w.shape()),
            ));
        };
        if wc_in != c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "kernel {kh}×{kw} larger than padded input {}×{}",
                    h + 2 * pad,
                    wd + 2 * pad
                ),
            ));
        }
        Ok(ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_positions(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds input patches into a `(C·kh·kw) × (Ho·Wo)` matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    if g.is_pointwise() {
        return x.to_vec();
    }
    let p = g.out_positions();
    let mut cols = vec![T::zero(); g.patch_len() * p];
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.wo + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    if g.is_pointwise() {
        return cols.to_vec();
    }
    let p = g.out_positions();
    let mut x = vec![T::zero(); g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut x[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Cross-correlation forward; also returns the unfolded input for reuse in
/// the backward pass.
pub(crate) fn conv2d_with_cols<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<T>, ConvGeom)> {
    let g = ConvGeom::new(x, w, stride, pad)?;
    if b.shape() != [g.c_out] {
        return Err(Error::ShapeMismatch {
            op: "conv2d bias",
            lhs: vec![g.c_out],
            rhs: b.shape().to_vec(),
        });
    }
    let cols = im2col(x.data(), &g);
    let p = g.out_positions();
    let mut out = vec![T::zero(); g.c_out * p];
    for (co, row) in out.chunks_exact_mut(p).enumerate() {
        row.fill(b.data()[co]);
    }
    gemm_acc(
        g.c_out,
        g.patch_len(),
        p,
        w.data(),
        false,
        &cols,
        false,
        T::one(),
        &mut out,
    );
    Ok((
        Tensor::from_parts_unchecked(vec![g.c_out, g.ho, g.wo], out),
        cols,
        g,
    ))
}

pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    conv2d_with_cols(x, w, b, stride, pad).map(|(out, _, _)| out)
}

/// Window maximum without padding; ties resolve to the first element in
/// row-major scan order. Returns the flat argmax index of every output.
pub(crate) fn maxpool2d_with_argmax<T: Scalar>(
    x: &Tensor<T>,
    window: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = x.dims3("maxpool2d")?;
    if window == 0 || stride == 0 {
        return Err(Error::dim("maxpool2d", "window and stride must be positive"));
    }
    if window > h || window > w {
        return Err(Error::dim(
            "maxpool2d",
            format!("window {window} exceeds input {h}×{w}"),
        ));
    }
    let ho = (h - window) / stride + 1;
    let wo = (w - window) / stride + 1;
    let src = x.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ky in 0..window {
                    let row = (ch * h + oy * stride + ky) * w + ox * stride;
                    for kx in 0..window {
                        let v = src[row + kx];
                        if best_idx == usize::MAX || v > best {
                            best = v;
                            best_idx = row + kx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_parts_unchecked(vec![c, ho, wo], out), arg))
}

pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>> {
    maxpool2d_with_argmax(x, window, stride).map(|(t, _)| t)
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = x.dims3("global_avg_pool")?;
    let n = T::of((h * w) as f64);
    let data = x
        .data()
        .chunks_exact(h * w)
        .map(|ch| ch.iter().copied().sum::<T>() / n)
        .collect();
    Ok(Tensor::from_parts_unchecked(vec![c], data))
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Fully connected layer `w·x + b` with `w: out×in`, `x: in`.
pub fn dense<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (out, inp) = w.dims2("dense")?;
    if x.numel() != inp || x.rank() != 1 {
        return Err(Error::ShapeMismatch {
            op: "dense",
            lhs: x.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    if b.shape() != [out] {
        return Err(Error::ShapeMismatch {
            op: "dense bias",
            lhs: vec![out],
            rhs: b.shape().to_vec(),
        });
    }
    let mut y = b.data().to_vec();
    gemm_acc(out, inp, 1, w.data(), false, x.data(), false, T::one(), &mut y);
    Ok(Tensor::from_parts_unchecked(vec![out], y))
}

/// Softmax of a vector; the last axis is normalised.
pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = x.iter().map(|&v| (v - max).exp()).collect();
    let total: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / total).collect()
}

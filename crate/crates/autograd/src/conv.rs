//! Convolution kernels on NCHW tensors.
//!
//! Three mutually-adjoint operators share one im2col layout:
//! `conv2d` (y = A_w x), `conv_transpose2d` (x = A_wᵀ y) and
//! `conv2d_weight_grad` (the bilinear form's derivative in w). Each one's
//! gradient is expressed through the other two, which keeps every order of
//! differentiation closed over this set.

use crate::error::{Result, TensorError};
use crate::real::Real;
use crate::tensor::Tensor;

/// Stride and symmetric zero padding of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, pad: usize) -> Self {
        assert!(stride >= 1, "stride must be positive");
        Self { stride, pad }
    }

    /// Output extent along one axis, or `None` when the kernel does not fit.
    pub fn out_len(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        if padded < kernel {
            return None;
        }
        Some((padded - kernel) / self.stride + 1)
    }
}

fn dims4(t: &[usize], what: &str) -> Result<[usize; 4]> {
    match t {
        &[a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(TensorError::Shape(format!("{what} must be rank 4, got {t:?}"))),
    }
}

/// Valid output-index range `[lo, hi)` such that `o * stride + k - pad` lies in `[0, len)`.
#[inline]
fn valid_range(len: usize, out_len: usize, k: usize, g: ConvGeom) -> (usize, usize) {
    let (s, p) = (g.stride as isize, g.pad as isize);
    let off = k as isize - p;
    // o*s + off >= 0
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    // o*s + off <= len - 1
    let top = len as isize - 1 - off;
    let hi = if top < 0 { 0 } else { top / s + 1 };
    let lo = (lo as usize).min(out_len);
    let hi = (hi as usize).min(out_len).max(lo);
    (lo, hi)
}

struct Layout {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    oh: usize,
    ow: usize,
    g: ConvGeom,
}

impl Layout {
    fn rows(&self) -> usize {
        self.ci * self.k * self.k
    }
    fn plane(&self) -> usize {
        self.oh * self.ow
    }
    fn cols(&self) -> usize {
        self.n * self.plane()
    }
}

/// Writes the patch matrix (ci·k·k, n·oh·ow) of `x`.
fn im2col<T: Real>(x: &[T], l: &Layout) -> Vec<T> {
    let cols = l.cols();
    let plane = l.plane();
    let mut col = vec![T::zero(); l.rows() * cols];
    let s = l.g.stride;
    for n in 0..l.n {
        for c in 0..l.ci {
            let xc = &x[(n * l.ci + c) * l.h * l.w..][..l.h * l.w];
            for kh in 0..l.k {
                let (oh_lo, oh_hi) = valid_range(l.h, l.oh, kh, l.g);
                for kw in 0..l.k {
                    let (ow_lo, ow_hi) = valid_range(l.w, l.ow, kw, l.g);
                    let row = (c * l.k + kh) * l.k + kw;
                    let dst = &mut col[row * cols + n * plane..][..plane];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * s + kh - l.g.pad;
                        let src_row = &xc[ih * l.w..][..l.w];
                        let drow = &mut dst[oh * l.ow..][..l.ow];
                        if s == 1 {
                            let iw0 = ow_lo + kw - l.g.pad;
                            drow[ow_lo..ow_hi]
                                .copy_from_slice(&src_row[iw0..iw0 + (ow_hi - ow_lo)]);
                        } else {
                            for ow in ow_lo..ow_hi {
                                drow[ow] = src_row[ow * s + kw - l.g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a patch matrix back into an image tensor; the adjoint of `im2col`.
fn col2im<T: Real>(col: &[T], l: &Layout) -> Vec<T> {
    let cols = l.cols();
    let plane = l.plane();
    let mut x = vec![T::zero(); l.n * l.ci * l.h * l.w];
    let s = l.g.stride;
    for n in 0..l.n {
        for c in 0..l.ci {
            let xc = &mut x[(n * l.ci + c) * l.h * l.w..][..l.h * l.w];
            for kh in 0..l.k {
                let (oh_lo, oh_hi) = valid_range(l.h, l.oh, kh, l.g);
                for kw in 0..l.k {
                    let (ow_lo, ow_hi) = valid_range(l.w, l.ow, kw, l.g);
                    let row = (c * l.k + kh) * l.k + kw;
                    let src = &col[row * cols + n * plane..][..plane];
                    for oh in oh_lo..oh_hi {
                        let ih = oh * s + kh - l.g.pad;
                        let xrow = &mut xc[ih * l.w..][..l.w];
                        let srow = &src[oh * l.ow..][..l.ow];
                        for ow in ow_lo..ow_hi {
                            xrow[ow * s + kw - l.g.pad] += srow[ow];
                        }
                    }
                }
            }
        }
    }
    x
}

/// (n, c, p) -> (c, n·p)
fn to_channel_major<T: Real>(t: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); t.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[ci * n * p + ni * p..][..p].copy_from_slice(&t[(ni * c + ci) * p..][..p]);
        }
    }
    out
}

/// (c, n·p) -> (n, c, p)
fn from_channel_major<T: Real>(t: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); t.len()];
    for ni in 0..n {
        for ci in 0..c {
            out[(ni * c + ci) * p..][..p].copy_from_slice(&t[ci * n * p + ni * p..][..p]);
        }
    }
    out
}

/// Cross-correlation `x (n, ci, h, w) * w (co, ci, k, k) -> (n, co, oh, ow)`, no bias.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, g: ConvGeom) -> Result<Tensor<T>> {
    let [n, ci, h, wd] = dims4(x.shape(), "conv2d input")?;
    let [co, wci, k, k2] = dims4(w.shape(), "conv2d weight")?;
    if wci != ci || k != k2 {
        return Err(TensorError::Shape(format!(
            "conv2d weight {:?} incompatible with input {:?}",
            w.shape(),
            x.shape()
        )));
    }
    let (oh, ow) = match (g.out_len(h, k), g.out_len(wd, k)) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(TensorError::Shape(format!(
                "kernel {k} with {g:?} does not fit input {h}x{wd}"
            )))
        }
    };
    let l = Layout { n, ci, h, w: wd, k, oh, ow, g };
    let col = im2col(x.data(), &l);
    let (rows, cols) = (l.rows(), l.cols());
    let mut out = vec![T::zero(); co * cols];
    T::gemm(
        co, rows, cols, T::one(), w.data(), rows as isize, 1, &col, cols as isize, 1, T::zero(),
        &mut out, cols as isize, 1,
    );
    let data = from_channel_major(&out, n, co, l.plane());
    Ok(Tensor::from_parts(vec![n, co, oh, ow], data))
}

/// Adjoint of [`conv2d`] in its input: maps `y (n, co, oh, ow)` to `(n, ci, h, w)`,
/// with `w (co, ci, k, k)`. `out_hw` resolves the ambiguity of strided geometry.
pub fn conv_transpose2d<T: Real>(
    y: &Tensor<T>,
    w: &Tensor<T>,
    g: ConvGeom,
    out_hw: (usize, usize),
) -> Result<Tensor<T>> {
    let [n, co, oh, ow] = dims4(y.shape(), "conv_transpose2d input")?;
    let [wco, ci, k, k2] = dims4(w.shape(), "conv_transpose2d weight")?;
    let (h, wd) = out_hw;
    if wco != co || k != k2 {
        return Err(TensorError::Shape(format!(
            "conv_transpose2d weight {:?} incompatible with input {:?}",
            w.shape(),
            y.shape()
        )));
    }
    if g.out_len(h, k) != Some(oh) || g.out_len(wd, k) != Some(ow) {
        return Err(TensorError::Shape(format!(
            "conv_transpose2d: output {h}x{wd} inconsistent with input {oh}x{ow} for k={k}, {g:?}"
        )));
    }
    let l = Layout { n, ci, h, w: wd, k, oh, ow, g };
    let (rows, cols) = (l.rows(), l.cols());
    let ymat = to_channel_major(y.data(), n, co, l.plane());
    let mut col = vec![T::zero(); rows * cols];
    // col = wᵀ · ymat
    T::gemm(
        rows, co, cols, T::one(), w.data(), 1, rows as isize, &ymat, cols as isize, 1, T::zero(),
        &mut col, cols as isize, 1,
    );
    Ok(Tensor::from_parts(vec![n, ci, h, wd], col2im(&col, &l)))
}

/// Gradient of `<g, conv2d(x, w)>` with respect to `w`: `(co, ci, k, k)`.
pub fn conv2d_weight_grad<T: Real>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    k: usize,
    g: ConvGeom,
) -> Result<Tensor<T>> {
    let [n, ci, h, wd] = dims4(x.shape(), "weight-grad input")?;
    let [gn, co, oh, ow] = dims4(grad_out.shape(), "weight-grad output grad")?;
    if gn != n || g.out_len(h, k) != Some(oh) || g.out_len(wd, k) != Some(ow) {
        return Err(TensorError::Shape(format!(
            "weight-grad: input {:?} and output grad {:?} disagree for k={k}, {g:?}",
            x.shape(),
            grad_out.shape()
        )));
    }
    let l = Layout { n, ci, h, w: wd, k, oh, ow, g };
    let (rows, cols) = (l.rows(), l.cols());
    let col = im2col(x.data(), &l);
    let gmat = to_channel_major(grad_out.data(), n, co, l.plane());
    let mut out = vec![T::zero(); co * rows];
    // out = gmat · colᵀ
    T::gemm(
        co, cols, rows, T::one(), &gmat, cols as isize, 1, &col, 1, cols as isize, T::zero(),
        &mut out, rows as isize, 1,
    );
    Ok(Tensor::from_parts(vec![co, ci, k, k], out))
}

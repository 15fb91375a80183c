//! im2col/col2im convolution kernels.
//!
//! `conv2d` takes an `(O, C, kH, kW)` kernel. `conv_transpose2d` takes a
//! `(C_in, C_out, kH, kW)` kernel and is the exact adjoint of `conv2d` with the
//! same stride and padding, so
//!
//! ```text
//! conv2d:            out = floor((H + 2p - k) / s) + 1
//! conv_transpose2d:  out = (H - 1) * s - 2p + k
//! ```
//!
//! With `k = 4, s = 2, p = 1` the two halve and double spatial size exactly,
//! which is the encoder/decoder pairing used by the networks.

use super::{Float, Result, Tensor, TensorError};
use crate::par;

pub fn conv2d_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

pub fn conv_transpose2d_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    if stride == 0 || input == 0 {
        return None;
    }
    ((input - 1) * stride + kernel).checked_sub(2 * pad).filter(|&n| n > 0)
}

/// Geometry of a forward convolution from a `(c, h, w)` image to `(oh, ow)`.
#[derive(Debug, Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn image(&self) -> usize {
        self.c * self.h * self.w
    }
}

fn im2col<T: Float>(x: &[T], g: &Geom, cols: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(cols: &[T], g: &Geom, dx: &mut [T]) {
    let p = g.cols();
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn dim_err(op: &'static str, msg: String) -> TensorError {
    TensorError::Dim { op, msg }
}

fn expect_rank(op: &'static str, t: &[usize], rank: usize, what: &str) -> Result<()> {
    if t.len() != rank {
        return Err(dim_err(
            op,
            format!("{what} must have rank {rank}, got shape {t:?}"),
        ));
    }
    Ok(())
}

/// Validates conv2d operands and returns `(n, o, geometry)`.
fn conv_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<(usize, usize, Geom)> {
    const OP: &str = "conv2d";
    expect_rank(OP, x, 4, "input")?;
    expect_rank(OP, w, 4, "kernel")?;
    if stride == 0 {
        return Err(dim_err(OP, "stride must be at least 1".into()));
    }
    if x[1] != w[1] {
        return Err(dim_err(
            OP,
            format!("input has {} channels but kernel expects {}", x[1], w[1]),
        ));
    }
    let oh = conv2d_output_size(x[2], w[2], stride, pad);
    let ow = conv2d_output_size(x[3], w[3], stride, pad);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(dim_err(
            OP,
            format!("kernel {}x{} larger than padded input {}x{}", w[2], w[3], x[2] + 2 * pad, x[3] + 2 * pad),
        ));
    };
    Ok((
        x[0],
        w[0],
        Geom {
            c: x[1],
            h: x[2],
            w: x[3],
            kh: w[2],
            kw: w[3],
            stride,
            pad,
            oh,
            ow,
        },
    ))
}

/// Validates transposed-conv operands. The returned geometry describes the
/// *forward* convolution from the output image back to the input grid.
fn conv_t_geom(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<(usize, usize, Geom)> {
    const OP: &str = "conv_transpose2d";
    expect_rank(OP, x, 4, "input")?;
    expect_rank(OP, w, 4, "kernel")?;
    if stride == 0 {
        return Err(dim_err(OP, "stride must be at least 1".into()));
    }
    if x[1] != w[0] {
        return Err(dim_err(
            OP,
            format!("input has {} channels but kernel expects {}", x[1], w[0]),
        ));
    }
    let oh = conv_transpose2d_output_size(x[2], w[2], stride, pad);
    let ow = conv_transpose2d_output_size(x[3], w[3], stride, pad);
    let (Some(oh), Some(ow)) = (oh, ow) else {
        return Err(dim_err(OP, format!("padding {pad} too large for input {x:?}")));
    };
    Ok((
        x[0],
        w[1],
        Geom {
            c: w[1],
            h: oh,
            w: ow,
            kh: w[2],
            kw: w[3],
            stride,
            pad,
            oh: x[2],
            ow: x[3],
        },
    ))
}

pub(crate) fn conv2d_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, o, g) = conv_geom(x.shape(), w.shape(), stride, pad)?;
    let (rows, p) = (g.rows(), g.cols());
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![T::zero(); n * o * p];
    par::for_each_chunk(&mut out, o * p, |i, dst| {
        let mut cols = vec![T::zero(); rows * p];
        im2col(&xd[i * g.image()..(i + 1) * g.image()], &g, &mut cols);
        T::gemm(o, rows, p, wd, false, &cols, false, dst, false);
    });
    Tensor::new(&[n, o, g.oh, g.ow], out)
}

/// Returns `(dx, dw)`; either side may be skipped.
pub(crate) fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, o, g) = conv_geom(x.shape(), w.shape(), stride, pad)?;
    let (rows, p) = (g.rows(), g.cols());
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let parts = par::map(n, |i| {
        let dyi = &dyd[i * o * p..(i + 1) * o * p];
        let dx = need_dx.then(|| {
            let mut dcols = vec![T::zero(); rows * p];
            T::gemm(rows, o, p, wd, true, dyi, false, &mut dcols, false);
            let mut dx = vec![T::zero(); g.image()];
            col2im(&dcols, &g, &mut dx);
            dx
        });
        let dw = need_dw.then(|| {
            let mut cols = vec![T::zero(); rows * p];
            im2col(&xd[i * g.image()..(i + 1) * g.image()], &g, &mut cols);
            let mut dw = vec![T::zero(); o * rows];
            T::gemm(o, p, rows, dyi, false, &cols, true, &mut dw, false);
            dw
        });
        (dx, dw)
    });
    let mut dx_all = need_dx.then(|| Vec::with_capacity(x.numel()));
    let mut dw_all = need_dw.then(|| vec![T::zero(); w.numel()]);
    for (dx, dw) in parts {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
            all.iter_mut().zip(&dw).for_each(|(a, &b)| *a = *a + b);
        }
    }
    Ok((
        dx_all.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        dw_all.map(|d| Tensor::new(w.shape(), d)).transpose()?,
    ))
}

pub(crate) fn conv_t2d_forward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, o, g) = conv_t_geom(x.shape(), w.shape(), stride, pad)?;
    let (rows, p) = (g.rows(), g.cols());
    let cin = x.shape()[1];
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![T::zero(); n * g.image()];
    par::for_each_chunk(&mut out, g.image(), |i, dst| {
        let mut cols = vec![T::zero(); rows * p];
        T::gemm(rows, cin, p, wd, true, &xd[i * cin * p..(i + 1) * cin * p], false, &mut cols, false);
        col2im(&cols, &g, dst);
    });
    Tensor::new(&[n, o, g.h, g.w], out)
}

pub(crate) fn conv_t2d_backward<T: Float>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let (n, _, g) = conv_t_geom(x.shape(), w.shape(), stride, pad)?;
    let (rows, p) = (g.rows(), g.cols());
    let cin = x.shape()[1];
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let parts = par::map(n, |i| {
        let mut dcols = vec![T::zero(); rows * p];
        im2col(&dyd[i * g.image()..(i + 1) * g.image()], &g, &mut dcols);
        let dx = need_dx.then(|| {
            let mut dx = vec![T::zero(); cin * p];
            T::gemm(cin, rows, p, wd, false, &dcols, false, &mut dx, false);
            dx
        });
        let dw = need_dw.then(|| {
            let mut dw = vec![T::zero(); cin * rows];
            T::gemm(cin, p, rows, &xd[i * cin * p..(i + 1) * cin * p], false, &dcols, true, &mut dw, false);
            dw
        });
        (dx, dw)
    });
    let mut dx_all = need_dx.then(|| Vec::with_capacity(x.numel()));
    let mut dw_all = need_dw.then(|| vec![T::zero(); w.numel()]);
    for (dx, dw) in parts {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
            all.iter_mut().zip(&dw).for_each(|(a, &b)| *a = *a + b);
        }
    }
    Ok((
        dx_all.map(|d| Tensor::new(x.shape(), d)).transpose()?,
        dw_all.map(|d| Tensor::new(w.shape(), d)).transpose()?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct six-loop convolution.
    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, s: usize, p: usize) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let oh = (xs[2] + 2 * p - ws[2]) / s + 1;
        let ow = (xs[3] + 2 * p - ws[3]) / s + 1;
        let mut out = Tensor::zeros(&[xs[0], ws[0], oh, ow]);
        for n in 0..xs[0] {
            for o in 0..ws[0] {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..xs[1] {
                            for i in 0..ws[2] {
                                for j in 0..ws[3] {
                                    let iy = (y * s + i) as isize - p as isize;
                                    let ix = (xo * s + j) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < xs[2] && (ix as usize) < xs[3] {
                                        acc += x.data()[((n * xs[1] + c) * xs[2] + iy as usize) * xs[3] + ix as usize]
                                            * w.data()[((o * ws[1] + c) * ws[2] + i) * ws[3] + j];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((n * ws[0] + o) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(shape: &[usize], scale: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i * 37 % 23) as f64 - 11.0) * scale)
    }

    #[test]
    fn matches_naive_convolution() {
        for &(s, p, k) in &[(1, 0, 3), (1, 1, 3), (2, 1, 4), (2, 0, 3), (3, 2, 5)] {
            let x = ramp(&[2, 3, 9, 8], 0.1);
            let w = ramp(&[4, 3, k, k], 0.05);
            let fast = conv2d_forward(&x, &w, s, p).unwrap();
            let slow = naive_conv(&x, &w, s, p);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "s={s} p={p} k={k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x, w), y> == <x, conv_t(y, w')> where w' is w viewed as (C_in, C_out) = (O, C).
        let x = ramp(&[1, 3, 8, 8], 0.1);
        let w = ramp(&[5, 3, 4, 4], 0.03);
        let cx = conv2d_forward(&x, &w, 2, 1).unwrap();
        let y = ramp(cx.shape(), 0.07);
        let ty = conv_t2d_forward(&y, &w, 2, 1).unwrap();
        assert_eq!(ty.shape(), x.shape());
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn output_size_formulas() {
        assert_eq!(conv2d_output_size(64, 4, 2, 1), Some(32));
        assert_eq!(conv2d_output_size(8, 3, 1, 0), Some(6));
        assert_eq!(conv2d_output_size(2, 5, 1, 0), None);
        assert_eq!(conv_transpose2d_output_size(4, 4, 2, 1), Some(8));
        assert_eq!(conv_transpose2d_output_size(1, 1, 1, 1), None);
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let x = Tensor::<f64>::zeros(&[1, 2, 5, 5]);
        let w = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        let err = conv2d_forward(&x, &w, 1, 0).unwrap_err();
        assert!(err.to_string().contains("2 channels"), "{err}");
    }
}

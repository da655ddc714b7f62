//! 2-D cross-correlation (no kernel flip) lowered to GEMM via im2col.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

use super::{join, Init, Module, ParamKind};
use crate::error::{Error, Result};
use crate::tensor::{gemm, lit, MatLayout, Scalar, Tensor};

static CORRUPT_BACKWARD: AtomicBool = AtomicBool::new(false);

/// Fault injection for the gradient self-test: when set, the weight
/// gradient of every convolution is scaled by 1.5.
#[doc(hidden)]
pub fn set_corrupt_backward(on: bool) {
    CORRUPT_BACKWARD.store(on, Ordering::SeqCst);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col<T: Scalar>(g: &Geometry, x: &[T], col: &mut [T]) {
    let (k, hw) = (g.kernel, g.out_len());
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((c * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        dst.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
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

fn col2im<T: Scalar>(g: &Geometry, col: &[T], dx: &mut [T]) {
    let (k, hw) = (g.kernel, g.out_len());
    for c in 0..g.channels {
        let plane = &mut dx[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((c * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += row[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x`: `N x C x H x W`, `weight`: `C' x C x k x k`, `bias`: `C'`.
///
/// Output extents are `floor((H + 2p - k) / stride) + 1`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), weight.shape());
    if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::shape(format!("conv2d expects NCHW input and square OIkk weight, got {xs:?} and {ws:?}")));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (out_c, k) = (ws[0], ws[2]);
    if ws[1] != c {
        return Err(Error::shape(format!("conv2d weight expects {} input channels, input has {c}", ws[1])));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::shape(format!("conv2d kernel {k} larger than padded input {h}x{w} (pad {padding})")));
    }
    if let Some(b) = bias {
        if b.shape() != [out_c] {
            return Err(Error::shape(format!("conv2d bias shape {:?}, expected [{out_c}]", b.shape())));
        }
    }
    let g = Geometry {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        padding,
        out_h: (h + 2 * padding - k) / stride + 1,
        out_w: (w + 2 * padding - k) / stride + 1,
    };
    let (rows, hw, in_len) = (g.col_rows(), g.out_len(), c * h * w);
    let (xd, wd) = (x.data(), weight.data());
    let bias_data = bias.map(|b| b.to_vec());

    let mut out = vec![T::zero(); n * out_c * hw];
    out.par_chunks_mut(out_c * hw).enumerate().for_each(|(i, dst)| {
        let xi = &xd[i * in_len..(i + 1) * in_len];
        let mut scratch;
        let col: &[T] = if g.is_pointwise() {
            xi
        } else {
            scratch = vec![T::zero(); rows * hw];
            im2col(&g, xi, &mut scratch);
            &scratch
        };
        gemm(out_c, rows, hw, wd, MatLayout::Normal, col, MatLayout::Normal, dst, false);
        if let Some(b) = &bias_data {
            for (o, plane) in dst.chunks_mut(hw).enumerate() {
                plane.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    });

    let (input, kernel) = (x.clone(), weight.clone());
    let need = (x.needs_grad(), weight.needs_grad(), bias.is_some_and(|b| b.needs_grad()));
    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(out, vec![n, out_c, g.out_h, g.out_w], parents, move |grad| {
        let (xd, wd) = (input.data(), kernel.data());
        let dx = need.0.then(|| {
            let mut dx = vec![T::zero(); n * in_len];
            dx.par_chunks_mut(in_len).enumerate().for_each(|(i, dxi)| {
                let gi = &grad[i * out_c * hw..(i + 1) * out_c * hw];
                if g.is_pointwise() {
                    gemm(rows, out_c, hw, wd, MatLayout::Transposed, gi, MatLayout::Normal, dxi, false);
                } else {
                    let mut dcol = vec![T::zero(); rows * hw];
                    gemm(rows, out_c, hw, wd, MatLayout::Transposed, gi, MatLayout::Normal, &mut dcol, false);
                    col2im(&g, &dcol, dxi);
                }
            });
            dx
        });
        let dw = need.1.then(|| {
            // Per-sample partials summed in sample order keep the result
            // independent of the thread count.
            let partials: Vec<Vec<T>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let xi = &xd[i * in_len..(i + 1) * in_len];
                    let gi = &grad[i * out_c * hw..(i + 1) * out_c * hw];
                    let mut part = vec![T::zero(); out_c * rows];
                    if g.is_pointwise() {
                        gemm(out_c, hw, rows, gi, MatLayout::Normal, xi, MatLayout::Transposed, &mut part, false);
                    } else {
                        let mut col = vec![T::zero(); rows * hw];
                        im2col(&g, xi, &mut col);
                        gemm(out_c, hw, rows, gi, MatLayout::Normal, &col, MatLayout::Transposed, &mut part, false);
                    }
                    part
                })
                .collect();
            let mut dw = vec![T::zero(); out_c * rows];
            for part in partials {
                dw.iter_mut().zip(part).for_each(|(a, b)| *a += b);
            }
            if CORRUPT_BACKWARD.load(Ordering::Relaxed) {
                dw.iter_mut().for_each(|v| *v *= lit::<T>(1.5));
            }
            dw
        });
        let mut grads = vec![dx, dw];
        if has_bias {
            grads.push(need.2.then(|| {
                let mut db = vec![T::zero(); out_c];
                for i in 0..n {
                    for (o, acc) in db.iter_mut().enumerate() {
                        *acc += grad[(i * out_c + o) * hw..(i * out_c + o + 1) * hw].iter().copied().sum::<T>();
                    }
                }
                db
            }));
        }
        grads
    }))
}

/// Convolution layer parameters.
pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    /// Fan-in scaled uniform initialization, bound `sqrt(1 / fan_in)`.
    pub fn new(
        init: &mut Init,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Conv2d {
            weight: init.uniform(&[out_ch, in_ch, kernel, kernel], fan_in),
            bias: bias.then(|| init.uniform(&[out_ch], fan_in)),
            stride,
            padding,
        }
    }

    /// Same-size convolution: stride 1 and padding `(k - 1) / 2`.
    pub fn same(init: &mut Init, in_ch: usize, out_ch: usize, kernel: usize, bias: bool) -> Self {
        Self::new(init, in_ch, out_ch, kernel, 1, (kernel - 1) / 2, bias)
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.padding)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(&join(prefix, "weight"), ParamKind::Trainable, &mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(&join(prefix, "bias"), ParamKind::Trainable, b);
        }
    }
}

use crate::error::{Error, Result};
use crate::tensor::{lit, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResizeMode {
    Nearest,
    Bilinear,
}

impl std::str::FromStr for ResizeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(ResizeMode::Nearest),
            "bilinear" => Ok(ResizeMode::Bilinear),
            other => Err(Error::Config(format!("unknown resize mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for ResizeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ResizeMode::Nearest => "nearest",
            ResizeMode::Bilinear => "bilinear",
        })
    }
}

/// Source taps for one output coordinate: `(lo, hi, weight of hi)`.
pub(crate) type Tap = (usize, usize, f64);

/// Per-axis sampling table. Bilinear uses half-pixel centres
/// (`src = (dst + 0.5) * in / out - 0.5`, clamped at 0), nearest takes
/// `floor(dst * in / out)`.
pub(crate) fn axis_taps(input: usize, output: usize, mode: ResizeMode) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| match mode {
            ResizeMode::Nearest => {
                let i = ((d as f64 * scale).floor() as usize).min(input - 1);
                (i, i, 0.0)
            }
            ResizeMode::Bilinear => {
                let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
                let lo = (src.floor() as usize).min(input - 1);
                let hi = (lo + 1).min(input - 1);
                (lo, hi, src - lo as f64)
            }
        })
        .collect()
}

/// Resizes each `H x W` plane of an `N x C x H x W` tensor to
/// `out_h x out_w`.
pub fn resize<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize, mode: ResizeMode) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 4 || out_h == 0 || out_w == 0 {
        return Err(Error::shape(format!("resize of {s:?} to {out_h}x{out_w}")));
    }
    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
    let ty = axis_taps(h, out_h, mode);
    let tx = axis_taps(w, out_w, mode);
    let xd = x.data();
    let mut out = vec![T::zero(); planes * out_h * out_w];
    for p in 0..planes {
        let src = &xd[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * out_h * out_w..(p + 1) * out_h * out_w];
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            let (a, b) = (lit::<T>(1.0 - wy), lit::<T>(wy));
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let (c, d) = (lit::<T>(1.0 - wx), lit::<T>(wx));
                dst[oy * out_w + ox] = a * (c * src[y0 * w + x0] + d * src[y0 * w + x1])
                    + b * (c * src[y1 * w + x0] + d * src[y1 * w + x1]);
            }
        }
    }
    Ok(Tensor::from_op(
        out,
        vec![s[0], s[1], out_h, out_w],
        vec![x.clone()],
        move |g| {
            let mut dx = vec![T::zero(); planes * h * w];
            for p in 0..planes {
                let gp = &g[p * out_h * out_w..(p + 1) * out_h * out_w];
                let dp = &mut dx[p * h * w..(p + 1) * h * w];
                for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                    let (a, b) = (lit::<T>(1.0 - wy), lit::<T>(wy));
                    for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                        let (c, d) = (lit::<T>(1.0 - wx), lit::<T>(wx));
                        let gv = gp[oy * out_w + ox];
                        dp[y0 * w + x0] += a * c * gv;
                        dp[y0 * w + x1] += a * d * gv;
                        dp[y1 * w + x0] += b * c * gv;
                        dp[y1 * w + x1] += b * d * gv;
                    }
                }
            }
            vec![Some(dx)]
        },
    ))
}

/// Integer-factor spatial upsampling.
pub fn upsample<T: Scalar>(x: &Tensor<T>, factor: usize, mode: ResizeMode) -> Result<Tensor<T>> {
    if x.rank() != 4 || factor == 0 {
        return Err(Error::shape(format!("upsample x{factor} of {:?}", x.shape())));
    }
    resize(x, x.shape()[2] * factor, x.shape()[3] * factor, mode)
}

//! Multi-modal interaction: multi-head attention where each modality's
//! queries score the other modality's keys, and the resulting mask weights
//! the modality's own values. Residual connections keep the inputs, and the
//! two refined maps are summed.

use crate::error::{Error, Result};
use crate::nn::{join, linear, softmax, Init, Module, ParamKind};
use crate::tensor::{lit, Scalar, Tensor};

/// `N x c x h x w` to `N x (h w) x c`; token `i w + j` is pixel `(i, j)`.
pub fn tokens_from_map<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let s = f.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("tokens_from_map expects rank 4, got {s:?}")));
    }
    f.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])
}

/// Inverse of [`tokens_from_map`].
pub fn map_from_tokens<T: Scalar>(t: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = t.shape();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::shape(format!("map_from_tokens of {s:?} to {h}x{w}")));
    }
    t.permute(&[0, 2, 1])?.reshape(&[s[0], s[2], h, w])
}

/// `softmax(q k^T / sqrt(d_k))` over the key axis, for `N x heads x T x d_k`
/// queries and keys.
pub fn cross_mask<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let (sq, sk) = (q.shape(), k.shape());
    if sq.len() != 4 || sk.len() != 4 || sq[0] != sk[0] || sq[1] != sk[1] || sq[3] != sk[3] {
        return Err(Error::shape(format!("cross_mask of {sq:?} and {sk:?}")));
    }
    let scale = lit::<T>(1.0 / (sq[3] as f64).sqrt());
    let logits = q.matmul(&k.transpose_last()?)?.mul_scalar(scale);
    softmax(&logits, 3)
}

/// Per-modality projections. Weights are `c x c`, applied as `x W`.
pub struct MimBranch<T: Scalar> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Option<Tensor<T>>,
}

impl<T: Scalar> MimBranch<T> {
    fn new(init: &mut Init, c: usize, out_proj: bool) -> Self {
        MimBranch {
            wq: init.uniform(&[c, c], c),
            wk: init.uniform(&[c, c], c),
            wv: init.uniform(&[c, c], c),
            wo: out_proj.then(|| init.uniform(&[c, c], c)),
        }
    }
}

impl<T: Scalar> Module<T> for MimBranch<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        f(&join(prefix, "wq"), ParamKind::Trainable, &mut self.wq);
        f(&join(prefix, "wk"), ParamKind::Trainable, &mut self.wk);
        f(&join(prefix, "wv"), ParamKind::Trainable, &mut self.wv);
        if let Some(wo) = self.wo.as_mut() {
            f(&join(prefix, "wo"), ParamKind::Trainable, wo);
        }
    }
}

pub struct Mim<T: Scalar> {
    pub rgb: MimBranch<T>,
    pub dep: MimBranch<T>,
    pub heads: usize,
}

/// Outputs of [`Mim::forward`], all `N x c x h x w`.
pub struct MimOutputs<T: Scalar> {
    pub rgb: Tensor<T>,
    pub dep: Tensor<T>,
    pub fused: Tensor<T>,
}

impl<T: Scalar> Mim<T> {
    pub fn new(init: &mut Init, channels: usize, heads: usize, out_proj: bool) -> Result<Self> {
        if heads == 0 || channels % heads != 0 {
            return Err(Error::Config(format!(
                "{channels} channels cannot be split into {heads} attention heads"
            )));
        }
        Ok(Mim {
            rgb: MimBranch::new(init, channels, out_proj),
            dep: MimBranch::new(init, channels, out_proj),
            heads,
        })
    }

    pub fn channels(&self) -> usize {
        self.rgb.wq.shape()[0]
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }

    fn split_heads(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        x.reshape(&[s[0], s[1], self.heads, self.head_dim()])?.permute(&[0, 2, 1, 3])
    }

    fn merge_heads(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        x.permute(&[0, 2, 1, 3])?.reshape(&[s[0], s[2], self.channels()])
    }

    /// Attention masks `(W_rgb, W_dep)`, each `N x heads x T x T`.
    pub fn masks(&self, f_rgb: &Tensor<T>, f_dep: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let (tr, td) = (tokens_from_map(f_rgb)?, tokens_from_map(f_dep)?);
        let q_r = self.split_heads(&linear(&tr, &self.rgb.wq, None)?)?;
        let k_r = self.split_heads(&linear(&tr, &self.rgb.wk, None)?)?;
        let q_d = self.split_heads(&linear(&td, &self.dep.wq, None)?)?;
        let k_d = self.split_heads(&linear(&td, &self.dep.wk, None)?)?;
        Ok((cross_mask(&q_r, &k_d)?, cross_mask(&q_d, &k_r)?))
    }

    pub fn forward(&self, f_rgb: &Tensor<T>, f_dep: &Tensor<T>) -> Result<MimOutputs<T>> {
        let s = f_rgb.shape();
        if s != f_dep.shape() || s.len() != 4 || s[1] != self.channels() {
            return Err(Error::shape(format!(
                "MIM over {} channels got {s:?} and {:?}",
                self.channels(),
                f_dep.shape()
            )));
        }
        let (h, w) = (s[2], s[3]);
        let (w_rgb, w_dep) = self.masks(f_rgb, f_dep)?;
        let weighted = |mask: &Tensor<T>, x: &Tensor<T>, b: &MimBranch<T>| -> Result<Tensor<T>> {
            let v = self.split_heads(&linear(&tokens_from_map(x)?, &b.wv, None)?)?;
            let mut out = self.merge_heads(&mask.matmul(&v)?)?;
            if let Some(wo) = &b.wo {
                out = linear(&out, wo, None)?;
            }
            map_from_tokens(&out, h, w)
        };
        let rgb = weighted(&w_rgb, f_rgb, &self.rgb)?.add(f_rgb)?;
        let dep = weighted(&w_dep, f_dep, &self.dep)?.add(f_dep)?;
        let fused = rgb.add(&dep)?;
        Ok(MimOutputs { rgb, dep, fused })
    }
}

impl<T: Scalar> Module<T> for Mim<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.rgb.visit(&join(prefix, "rgb"), f);
        self.dep.visit(&join(prefix, "dep"), f);
    }
}

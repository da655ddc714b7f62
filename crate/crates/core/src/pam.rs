//! Pooling attention: a per-channel gate from a two-step pooling
//! (adaptive average to a small grid, then global max), a 1x1 conv and a
//! sigmoid, applied as `f + f * v`.

use crate::error::{Error, Result};
use crate::nn::{adaptive_avg_pool2d, join, max_pool_global, Conv2d, Init, Module, ParamKind};
use crate::tensor::{Scalar, Tensor};

pub struct Pam<T: Scalar> {
    pub conv: Conv2d<T>,
    pub pooled: (usize, usize),
}

impl<T: Scalar> Pam<T> {
    pub fn new(init: &mut Init, channels: usize, pooled: (usize, usize)) -> Self {
        Pam {
            conv: Conv2d::new(init, channels, channels, 1, 1, 0, true),
            pooled,
        }
    }

    pub fn channels(&self) -> usize {
        self.conv.in_channels()
    }

    /// Returns the gated features and the gate `v` of shape `N x c x 1 x 1`.
    pub fn forward(&self, f: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = f.shape();
        if s.len() != 4 || s[1] != self.channels() {
            return Err(Error::shape(format!(
                "PAM over {} channels got {s:?}",
                self.channels()
            )));
        }
        let (ph, pw) = self.pooled;
        if s[2] < ph || s[3] < pw {
            return Err(Error::shape(format!(
                "PAM input {}x{} is smaller than the pooled grid {ph}x{pw}",
                s[2], s[3]
            )));
        }
        let a = adaptive_avg_pool2d(f, ph, pw)?;
        let a_max = max_pool_global(&a)?;
        let v = self.conv.forward(&a_max)?.sigmoid();
        let gated = f.add(&f.mul(&v)?)?;
        Ok((gated, v))
    }
}

impl<T: Scalar> Module<T> for Pam<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
    }
}

/// The two modality gates of one encoder level. With shared parameters
/// there is a single [`Pam`] and both branches use it.
pub struct PamPair<T: Scalar> {
    pub rgb: Pam<T>,
    pub dep: Option<Pam<T>>,
}

impl<T: Scalar> PamPair<T> {
    pub fn new(init: &mut Init, channels: usize, pooled: (usize, usize), shared: bool) -> Self {
        let rgb = Pam::new(init, channels, pooled);
        let dep = (!shared).then(|| Pam::new(init, channels, pooled));
        PamPair { rgb, dep }
    }

    pub fn is_shared(&self) -> bool {
        self.dep.is_none()
    }

    pub fn dep_params(&self) -> &Pam<T> {
        self.dep.as_ref().unwrap_or(&self.rgb)
    }

    /// Sum of the two gated modalities.
    pub fn fuse(&self, f_rgb: &Tensor<T>, f_dep: &Tensor<T>) -> Result<Tensor<T>> {
        if f_rgb.shape() != f_dep.shape() {
            return Err(Error::shape(format!(
                "PAM fusion of {:?} and {:?}",
                f_rgb.shape(),
                f_dep.shape()
            )));
        }
        let (r, _) = self.rgb.forward(f_rgb)?;
        let (d, _) = self.dep_params().forward(f_dep)?;
        r.add(&d)
    }
}

impl<T: Scalar> Module<T> for PamPair<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        match self.dep.as_mut() {
            Some(dep) => {
                self.rgb.visit(&join(prefix, "rgb"), f);
                dep.visit(&join(prefix, "dep"), f);
            }
            None => self.rgb.visit(&join(prefix, "shared"), f),
        }
    }
}

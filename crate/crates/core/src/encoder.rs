//! Per-modality feature extractor: a three-conv stem followed by four
//! residual stages. Stage `n` has `C0 * 2^(n-1)` channels; the stem halves
//! the input and stages 2 to 4 halve again, so the stage outputs sit at
//! 1/2, 1/4, 1/8 and 1/16 of the input.

use crate::error::{Error, Result};
use crate::nn::{join, BatchNorm2d, Conv2d, Init, Module, ParamKind};
use crate::tensor::{Scalar, Tensor};

/// Input extents must be a multiple of this.
pub const SPATIAL_MULTIPLE: usize = 16;

/// 3x3 conv (no bias), batch norm, relu.
pub struct ConvBnRelu<T: Scalar> {
    pub conv: Conv2d<T>,
    pub bn: BatchNorm2d<T>,
}

impl<T: Scalar> ConvBnRelu<T> {
    pub fn new(init: &mut Init, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        ConvBnRelu {
            conv: Conv2d::new(init, in_ch, out_ch, 3, stride, 1, false),
            bn: BatchNorm2d::new(out_ch),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        Ok(self.bn.forward(&self.conv.forward(x)?, training)?.relu())
    }
}

impl<T: Scalar> Module<T> for ConvBnRelu<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }
}

/// `bn2(conv2(relu(bn1(conv1(x))))) + skip(x)`, where `skip` is the
/// identity or, when the shape changes, a strided 1x1 projection.
pub struct ResidualBlock<T: Scalar> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub proj: Option<Conv2d<T>>,
}

impl<T: Scalar> ResidualBlock<T> {
    pub fn new(init: &mut Init, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        ResidualBlock {
            conv1: Conv2d::new(init, in_ch, out_ch, 3, stride, 1, false),
            bn1: BatchNorm2d::new(out_ch),
            conv2: Conv2d::same(init, out_ch, out_ch, 3, false),
            bn2: BatchNorm2d::new(out_ch),
            proj: (stride != 1 || in_ch != out_ch).then(|| Conv2d::new(init, in_ch, out_ch, 1, stride, 0, true)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        let h = self.bn1.forward(&self.conv1.forward(x)?, training)?.relu();
        let h = self.bn2.forward(&self.conv2.forward(&h)?, training)?;
        match &self.proj {
            Some(p) => h.add(&p.forward(x)?),
            None => h.add(x),
        }
    }
}

impl<T: Scalar> Module<T> for ResidualBlock<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        if let Some(p) = self.proj.as_mut() {
            p.visit(&join(prefix, "proj"), f);
        }
    }
}

pub struct Encoder<T: Scalar> {
    pub stem: [ConvBnRelu<T>; 3],
    pub stages: Vec<Vec<ResidualBlock<T>>>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(init: &mut Init, in_ch: usize, base: usize, depths: [usize; 4]) -> Self {
        let stem = [
            ConvBnRelu::new(init, in_ch, base, 2),
            ConvBnRelu::new(init, base, base, 1),
            ConvBnRelu::new(init, base, base, 1),
        ];
        let mut stages = Vec::with_capacity(4);
        let mut ch = base;
        for (n, &depth) in depths.iter().enumerate() {
            let (out, stride) = if n == 0 { (base, 1) } else { (ch * 2, 2) };
            let blocks = (0..depth)
                .map(|b| {
                    if b == 0 {
                        ResidualBlock::new(init, ch, out, stride)
                    } else {
                        ResidualBlock::new(init, out, out, 1)
                    }
                })
                .collect();
            stages.push(blocks);
            ch = out;
        }
        Encoder { stem, stages }
    }

    pub fn in_channels(&self) -> usize {
        self.stem[0].conv.in_channels()
    }

    /// Channel count of stage `n` (1-based) output.
    pub fn stage_channels(&self, n: usize) -> usize {
        self.stages[n - 1].last().map_or(self.stem[2].conv.out_channels(), |b| b.conv2.out_channels())
    }

    pub fn stem_forward(&self, img: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        let s = img.shape();
        if s.len() != 4 || s[1] != self.in_channels() {
            return Err(Error::shape(format!(
                "encoder expects N x {} x H x W input, got {s:?}",
                self.in_channels()
            )));
        }
        if s[2] % SPATIAL_MULTIPLE != 0 || s[3] % SPATIAL_MULTIPLE != 0 {
            return Err(Error::shape(format!(
                "input extents {}x{} are not multiples of {SPATIAL_MULTIPLE}",
                s[2], s[3]
            )));
        }
        let mut x = img.clone();
        for layer in &self.stem {
            x = layer.forward(&x, training)?;
        }
        Ok(x)
    }

    pub fn stage_forward(&self, n: usize, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        let mut x = x.clone();
        for block in &self.stages[n - 1] {
            x = block.forward(&x, training)?;
        }
        Ok(x)
    }

    /// Stage outputs `F^1 .. F^4`.
    pub fn forward(&self, img: &Tensor<T>, training: bool) -> Result<[Tensor<T>; 4]> {
        let f0 = self.stem_forward(img, training)?;
        let f1 = self.stage_forward(1, &f0, training)?;
        let f2 = self.stage_forward(2, &f1, training)?;
        let f3 = self.stage_forward(3, &f2, training)?;
        let f4 = self.stage_forward(4, &f3, training)?;
        Ok([f1, f2, f3, f4])
    }
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        for (i, layer) in self.stem.iter_mut().enumerate() {
            layer.visit(&join(prefix, &format!("stem{i}")), f);
        }
        for (n, stage) in self.stages.iter_mut().enumerate() {
            for (b, block) in stage.iter_mut().enumerate() {
                block.visit(&join(prefix, &format!("stage{}.{b}", n + 1)), f);
            }
        }
    }
}

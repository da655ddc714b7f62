//! The full two-branch segmentation network.
//!
//! Encoder stages 1 to 3 of the two modalities are fused by PAM, stage 4
//! by MIM. The decoder starts from the stage-4 fusion; each of its four
//! blocks runs two 3x3 conv + BN + relu layers (halving channels), emits
//! logits through a 1x1 head, and except for the last block doubles the
//! resolution and adds the fused skip of the matching encoder level. The
//! logits therefore sit at 1/16, 1/8, 1/4 and 1/2 of the input.

use crate::config::MipaConfig;
use crate::encoder::{ConvBnRelu, Encoder, SPATIAL_MULTIPLE};
use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::mim::Mim;
use crate::nn::{join, upsample, Conv2d, Init, Module, ParamKind};
use crate::pam::PamPair;
use crate::tensor::{Scalar, Tensor};

pub struct DecoderBlock<T: Scalar> {
    pub conv1: ConvBnRelu<T>,
    pub conv2: ConvBnRelu<T>,
    pub head: Conv2d<T>,
}

impl<T: Scalar> Module<T> for DecoderBlock<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.head.visit(&join(prefix, "head"), f);
    }
}

pub struct ForwardOutputs<T: Scalar> {
    /// Coarsest first; each map doubles the extents of the previous one.
    pub logits: [Tensor<T>; 4],
    /// Fused encoder features of levels 1 to 3.
    pub fused_skips: [Tensor<T>; 3],
    /// Fused stage-4 features that start the decoder.
    pub f_con4: Tensor<T>,
}

pub struct MipaNet<T: Scalar> {
    pub cfg: MipaConfig,
    pub rgb_encoder: Encoder<T>,
    pub dep_encoder: Encoder<T>,
    /// PAM pairs for levels 1 to 3; `None` where the level is fused
    /// otherwise.
    pub pams: [Option<PamPair<T>>; 3],
    /// MIM for levels 3 and 4.
    pub mim3: Option<Mim<T>>,
    pub mim4: Option<Mim<T>>,
    pub decoder: Vec<DecoderBlock<T>>,
}

impl<T: Scalar> MipaNet<T> {
    pub fn new(cfg: &MipaConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(seed);
        let c0 = cfg.base_channels;
        let rgb_encoder = Encoder::new(&mut init, 3, c0, cfg.stage_depths);
        let dep_encoder = Encoder::new(&mut init, 1, c0, cfg.stage_depths);
        let pams = [1, 2, 3].map(|n| {
            (cfg.use_pam && !cfg.mim_at(n))
                .then(|| PamPair::new(&mut init, cfg.stage_channels(n), cfg.pooled_hw, cfg.pam_shared))
        });
        let mut mim = |n: usize| -> Result<Option<Mim<T>>> {
            if cfg.mim_at(n) {
                Ok(Some(Mim::new(&mut init, cfg.stage_channels(n), cfg.heads, cfg.mim_out_proj)?))
            } else {
                Ok(None)
            }
        };
        let mim3 = mim(3)?;
        let mim4 = mim(4)?;
        let mut ch = cfg.stage_channels(4);
        let decoder = (0..4)
            .map(|_| {
                let out = ch / 2;
                let block = DecoderBlock {
                    conv1: ConvBnRelu::new(&mut init, ch, out, 1),
                    conv2: ConvBnRelu::new(&mut init, out, out, 1),
                    head: Conv2d::new(&mut init, out, cfg.num_classes, 1, 1, 0, true),
                };
                ch = out;
                block
            })
            .collect();
        Ok(MipaNet {
            cfg: cfg.clone(),
            rgb_encoder,
            dep_encoder,
            pams,
            mim3,
            mim4,
            decoder,
        })
    }

    fn check_inputs(&self, rgb: &Tensor<T>, depth: &Tensor<T>) -> Result<()> {
        let (r, d) = (rgb.shape(), depth.shape());
        if r.len() != 4 || d.len() != 4 || r[1] != 3 || d[1] != 1 || r[0] != d[0] || r[2..] != d[2..] {
            return Err(Error::shape(format!(
                "expected N x 3 x H x W colour and N x 1 x H x W depth, got {r:?} and {d:?}"
            )));
        }
        if r[2] % SPATIAL_MULTIPLE != 0 || r[3] % SPATIAL_MULTIPLE != 0 {
            return Err(Error::shape(format!(
                "input extents {}x{} are not multiples of {SPATIAL_MULTIPLE}",
                r[2], r[3]
            )));
        }
        Ok(())
    }

    fn fuse(&self, n: usize, f_rgb: &Tensor<T>, f_dep: &Tensor<T>) -> Result<Tensor<T>> {
        let mim = match n {
            3 => self.mim3.as_ref(),
            4 => self.mim4.as_ref(),
            _ => None,
        };
        if let Some(m) = mim {
            return Ok(m.forward(f_rgb, f_dep)?.fused);
        }
        match self.pams.get(n - 1).and_then(Option::as_ref) {
            Some(pair) => pair.fuse(f_rgb, f_dep),
            None => f_rgb.add(f_dep),
        }
    }

    pub fn forward(&self, rgb: &Tensor<T>, depth: &Tensor<T>, training: bool) -> Result<ForwardOutputs<T>> {
        self.check_inputs(rgb, depth)?;
        let depth = if self.cfg.rgb_only { Tensor::zeros(depth.shape()) } else { depth.clone() };
        let fr = self.rgb_encoder.forward(rgb, training)?;
        let fd = self.dep_encoder.forward(&depth, training)?;
        let skips = [
            self.fuse(1, &fr[0], &fd[0])?,
            self.fuse(2, &fr[1], &fd[1])?,
            self.fuse(3, &fr[2], &fd[2])?,
        ];
        let f_con4 = self.fuse(4, &fr[3], &fd[3])?;
        let mut x = f_con4.clone();
        let mut logits = Vec::with_capacity(4);
        for (k, block) in self.decoder.iter().enumerate() {
            x = block.conv2.forward(&block.conv1.forward(&x, training)?, training)?;
            logits.push(block.head.forward(&x)?);
            if k < 3 {
                x = upsample(&x, 2, self.cfg.decoder_resize)?.add(&skips[2 - k])?;
            }
        }
        Ok(ForwardOutputs {
            logits: logits.try_into().map_err(|_| Error::shape("decoder depth"))?,
            fused_skips: skips,
            f_con4,
        })
    }

    /// Evaluation-mode labels at input resolution: per-pixel argmax of the
    /// finest logits (lowest class on ties), enlarged by nearest resize.
    pub fn predict(&self, rgb: &Tensor<T>, depth: &Tensor<T>) -> Result<Vec<LabelMap>> {
        let out = self.forward(rgb, depth, false)?;
        Ok(argmax_labels(&out.logits[3])?.into_iter().map(|m| m.upsample(2)).collect())
    }

    pub fn named_trainable(&mut self) -> Vec<(String, Tensor<T>)> {
        self.named_tensors()
            .into_iter()
            .filter(|(_, k, _)| *k == ParamKind::Trainable)
            .map(|(n, _, t)| (n, t))
            .collect()
    }
}

impl<T: Scalar> Module<T> for MipaNet<T> {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Tensor<T>)) {
        self.rgb_encoder.visit(&join(prefix, "rgb_encoder"), f);
        self.dep_encoder.visit(&join(prefix, "dep_encoder"), f);
        for (n, pam) in self.pams.iter_mut().enumerate() {
            if let Some(p) = pam {
                p.visit(&join(prefix, &format!("pam{}", n + 1)), f);
            }
        }
        if let Some(m) = self.mim3.as_mut() {
            m.visit(&join(prefix, "mim3"), f);
        }
        if let Some(m) = self.mim4.as_mut() {
            m.visit(&join(prefix, "mim4"), f);
        }
        for (k, block) in self.decoder.iter_mut().enumerate() {
            block.visit(&join(prefix, &format!("decoder{}", k + 1)), f);
        }
    }
}

/// Per-pixel argmax over the class axis of `N x K x h x w` logits; ties go
/// to the lower class index.
pub fn argmax_labels<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<LabelMap>> {
    let s = logits.shape();
    if s.len() != 4 || s[1] == 0 || s[1] > 255 {
        return Err(Error::shape(format!("argmax over logits {s:?}")));
    }
    let (k, hw) = (s[1], s[2] * s[3]);
    let d = logits.data();
    Ok((0..s[0])
        .map(|n| {
            let data = (0..hw)
                .map(|p| {
                    let mut best = 0;
                    for c in 1..k {
                        if d[(n * k + c) * hw + p] > d[(n * k + best) * hw + p] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            LabelMap { height: s[2], width: s[3], data }
        })
        .collect())
}

//! Architecture hyperparameters and their `key = value` text form.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ResizeMode;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MipaConfig {
    pub num_classes: usize,
    pub base_channels: usize,
    pub stage_depths: [usize; 4],
    /// One PAM parameter set for both modalities at each level.
    pub pam_shared: bool,
    /// Encoder stages fused by MIM; any of {3, 4}.
    pub mim_layers: BTreeSet<usize>,
    pub heads: usize,
    pub decoder_resize: ResizeMode,
    pub pooled_hw: (usize, usize),
    /// When false, levels 1 to 3 are fused by plain addition.
    pub use_pam: bool,
    /// When false, MIM levels are fused by plain addition.
    pub use_mim: bool,
    pub mim_out_proj: bool,
    /// Feed an all-zero depth map regardless of the data.
    pub rgb_only: bool,
}

impl Default for MipaConfig {
    fn default() -> Self {
        MipaConfig {
            num_classes: 4,
            base_channels: 16,
            stage_depths: [2, 2, 2, 2],
            pam_shared: false,
            mim_layers: BTreeSet::from([4]),
            heads: 8,
            decoder_resize: ResizeMode::Bilinear,
            pooled_hw: (2, 2),
            use_pam: true,
            use_mim: true,
            mim_out_proj: false,
            rgb_only: false,
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a non-negative integer, got {v:?}")))
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse_usize(key, p)).collect()
}

impl MipaConfig {
    /// Stage `n` (1-based) channel count.
    pub fn stage_channels(&self, n: usize) -> usize {
        self.base_channels << (n - 1)
    }

    /// Whether encoder stage `n` is fused by MIM.
    pub fn mim_at(&self, n: usize) -> bool {
        self.use_mim && self.mim_layers.contains(&n)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.num_classes > 255 {
            return bad(format!("num_classes must be in 1..=255, got {}", self.num_classes));
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return bad(format!("base_channels must be even and >= 2, got {}", self.base_channels));
        }
        if self.base_channels / 2 < self.num_classes {
            return bad(format!(
                "decoder narrows to base_channels / 2 = {} channels, fewer than {} classes",
                self.base_channels / 2,
                self.num_classes
            ));
        }
        if self.stage_depths.contains(&0) {
            return bad(format!("stage_depths must be positive, got {:?}", self.stage_depths));
        }
        if self.mim_layers.is_empty() || self.mim_layers.iter().any(|l| !matches!(l, 3 | 4)) {
            return bad(format!("mim_layers must be a non-empty subset of {{3, 4}}, got {:?}", self.mim_layers));
        }
        if self.heads == 0 {
            return bad("heads must be positive".into());
        }
        for &l in &self.mim_layers {
            let c = self.stage_channels(l);
            if self.use_mim && c % self.heads != 0 {
                return bad(format!("{} heads do not divide the {c} channels of stage {l}", self.heads));
            }
        }
        if self.pooled_hw.0 == 0 || self.pooled_hw.1 == 0 {
            return bad(format!("pooled_hw must be positive, got {:?}", self.pooled_hw));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let list = |v: &mut dyn Iterator<Item = usize>| v.map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let _ = writeln!(s, "base_channels = {}", self.base_channels);
        let _ = writeln!(s, "stage_depths = {}", list(&mut self.stage_depths.iter().copied()));
        let _ = writeln!(s, "pam_shared = {}", self.pam_shared);
        let _ = writeln!(s, "mim_layers = {}", list(&mut self.mim_layers.iter().copied()));
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "decoder_resize = {}", self.decoder_resize);
        let _ = writeln!(s, "pooled_hw = {},{}", self.pooled_hw.0, self.pooled_hw.1);
        let _ = writeln!(s, "use_pam = {}", self.use_pam);
        let _ = writeln!(s, "use_mim = {}", self.use_mim);
        let _ = writeln!(s, "mim_out_proj = {}", self.mim_out_proj);
        let _ = writeln!(s, "rgb_only = {}", self.rgb_only);
        s
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "num_classes" => self.num_classes = parse_usize(key, v)?,
            "base_channels" => self.base_channels = parse_usize(key, v)?,
            "stage_depths" => {
                let d = parse_list(key, v)?;
                self.stage_depths = d
                    .try_into()
                    .map_err(|d: Vec<usize>| Error::Config(format!("stage_depths needs 4 entries, got {}", d.len())))?;
            }
            "pam_shared" => self.pam_shared = parse_bool(key, v)?,
            "mim_layers" => self.mim_layers = parse_list(key, v)?.into_iter().collect(),
            "heads" => self.heads = parse_usize(key, v)?,
            "decoder_resize" => self.decoder_resize = v.parse()?,
            "pooled_hw" => match parse_list(key, v)?.as_slice() {
                &[h, w] => self.pooled_hw = (h, w),
                _ => return Err(Error::Config(format!("pooled_hw needs two entries, got {v:?}"))),
            },
            "use_pam" => self.use_pam = parse_bool(key, v)?,
            "use_mim" => self.use_mim = parse_bool(key, v)?,
            "mim_out_proj" => self.mim_out_proj = parse_bool(key, v)?,
            "rgb_only" => self.rgb_only = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a document over the defaults, skipping keys for which
    /// `skip` returns true (used for run-level settings sharing the file).
    pub fn from_text_with(text: &str, mut skip: impl FnMut(&str, &str) -> Result<bool>) -> Result<Self> {
        let mut cfg = MipaConfig::default();
        for (key, value) in key_values(text)? {
            if !skip(&key, &value)? {
                cfg.set(&key, &value)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_text_with(text, |_, _| Ok(false))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Splits `key = value` lines; blank lines and `#` comments are skipped.
pub fn key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

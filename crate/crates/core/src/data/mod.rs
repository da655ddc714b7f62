//! Samples on disk: `<id>_rgb.ppm` (8-bit P6), `<id>_depth.pgm` (16-bit P5)
//! and `<id>_labels.pgm` (8-bit P5), listed in `manifest.txt` whose first
//! line is `classes=<K>`, optionally followed by `split=<train|val>`.

mod augment;
pub mod pnm;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::tensor::Tensor;

pub use augment::{augment, augment_with, SCALE_RANGE};
pub use pnm::Image;
pub use synth::{synth_generate, synth_sample, Split, DEPTH_NOISE, FAR_DEPTH, NEAR_DEPTH, SYNTH_CLASSES};

pub const MANIFEST: &str = "manifest.txt";

/// One colour image, its depth map and its labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub height: usize,
    pub width: usize,
    /// `3 x H x W` planes in `[0, 1]`.
    pub rgb: Vec<f32>,
    /// `H x W` in `[0, 1]`.
    pub depth: Vec<f32>,
    pub labels: LabelMap,
}

impl SampleRecord {
    pub fn new(height: usize, width: usize, rgb: Vec<f32>, depth: Vec<f32>, labels: LabelMap) -> Result<Self> {
        let hw = height * width;
        if rgb.len() != 3 * hw || depth.len() != hw || labels.height != height || labels.width != width {
            return Err(Error::shape(format!(
                "sample planes disagree: {height}x{width} with {} colour, {} depth values and {}x{} labels",
                rgb.len(),
                depth.len(),
                labels.height,
                labels.width
            )));
        }
        if rgb.iter().chain(&depth).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sample values".into()));
        }
        Ok(SampleRecord { height, width, rgb, depth, labels })
    }

    fn paths(root: &Path, id: &str) -> [PathBuf; 3] {
        [
            root.join(format!("{id}_rgb.ppm")),
            root.join(format!("{id}_depth.pgm")),
            root.join(format!("{id}_labels.pgm")),
        ]
    }

    pub fn save(&self, root: &Path, id: &str) -> Result<()> {
        let [rgb_p, dep_p, lab_p] = Self::paths(root, id);
        let hw = self.height * self.width;
        let q = |v: f32, max: f32| (v.clamp(0.0, 1.0) * max).round() as u16;
        let rgb = (0..hw).flat_map(|p| (0..3).map(move |c| (c, p))).map(|(c, p)| q(self.rgb[c * hw + p], 255.0)).collect();
        Image::new(self.width, self.height, 3, 255, rgb)?.save(&rgb_p)?;
        let dep = self.depth.iter().map(|&v| q(v, 65535.0)).collect();
        Image::new(self.width, self.height, 1, 65535, dep)?.save(&dep_p)?;
        let lab = self.labels.data.iter().map(|&v| v as u16).collect();
        Image::new(self.width, self.height, 1, 255, lab)?.save(&lab_p)
    }
}

/// Reads one sample; colour is scaled by `1/255` and depth by `1/65535`.
pub fn load_sample(root: &Path, id: &str) -> Result<SampleRecord> {
    let [rgb_p, dep_p, lab_p] = SampleRecord::paths(root, id);
    let (rgb, dep, lab) = (Image::load(&rgb_p)?, Image::load(&dep_p)?, Image::load(&lab_p)?);
    let expect = |img: &Image, p: &Path, c: usize, max: u16| -> Result<()> {
        if img.channels != c || img.maxval != max {
            return Err(Error::Format {
                kind: "netpbm",
                path: p.to_path_buf(),
                reason: format!("expected {c} channel(s) with maxval {max}, found {} with {}", img.channels, img.maxval),
            });
        }
        if (img.width, img.height) != (rgb.width, rgb.height) {
            return Err(Error::Format {
                kind: "netpbm",
                path: p.to_path_buf(),
                reason: format!("{}x{} does not match the colour image {}x{}", img.width, img.height, rgb.width, rgb.height),
            });
        }
        Ok(())
    };
    expect(&rgb, &rgb_p, 3, 255)?;
    expect(&dep, &dep_p, 1, 65535)?;
    expect(&lab, &lab_p, 1, 255)?;
    let (h, w) = (rgb.height, rgb.width);
    let hw = h * w;
    let mut planes = vec![0.0f32; 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            planes[c * hw + p] = rgb.data[p * 3 + c] as f32 / 255.0;
        }
    }
    let depth = dep.data.iter().map(|&v| v as f32 / 65535.0).collect();
    let labels = LabelMap::new(h, w, lab.data.iter().map(|&v| v as u8).collect())?;
    SampleRecord::new(h, w, planes, depth, labels)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub ids: Vec<String>,
    pub num_classes: usize,
    pub split: Split,
}

impl DatasetManifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("classes={}\nsplit={}\n", self.num_classes, self.split);
        for id in &self.ids {
            s.push_str(id);
            s.push('\n');
        }
        s
    }

    pub fn save(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let bad = |reason: String| Error::Format { kind: "manifest", path: path.clone(), reason };
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let first = lines.next().ok_or_else(|| bad("empty manifest".into()))?;
        let num_classes = first
            .strip_prefix("classes=")
            .and_then(|k| k.trim().parse().ok())
            .filter(|&k: &usize| (1..=255).contains(&k))
            .ok_or_else(|| bad(format!("first line must be classes=<K>, got {first:?}")))?;
        let mut lines = lines.peekable();
        let mut split = Split::Train;
        if let Some(v) = lines.peek().and_then(|l| l.strip_prefix("split=")) {
            split = v.trim().parse().map_err(|e: Error| bad(e.to_string()))?;
            lines.next();
        }
        let ids: Vec<String> = lines.map(str::to_string).collect();
        if ids.is_empty() {
            return Err(bad("no sample ids".into()));
        }
        Ok(DatasetManifest { root: root.to_path_buf(), ids, num_classes, split })
    }

    /// Loads every sample, checking labels against the class count.
    pub fn load_all(&self) -> Result<Vec<SampleRecord>> {
        self.ids
            .iter()
            .map(|id| {
                let s = load_sample(&self.root, id)?;
                s.labels.check_classes(self.num_classes)?;
                Ok(s)
            })
            .collect()
    }
}

/// Stacks samples of equal extents into `N x 3 x H x W` colour and
/// `N x 1 x H x W` depth tensors plus the label maps.
pub fn collate(samples: &[&SampleRecord]) -> Result<(Tensor<f32>, Tensor<f32>, Vec<LabelMap>)> {
    let first = samples.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let (h, w) = (first.height, first.width);
    if samples.iter().any(|s| (s.height, s.width) != (h, w)) {
        return Err(Error::shape("batch samples differ in extents"));
    }
    let n = samples.len();
    let rgb: Vec<f32> = samples.iter().flat_map(|s| s.rgb.iter().copied()).collect();
    let depth: Vec<f32> = samples.iter().flat_map(|s| s.depth.iter().copied()).collect();
    Ok((
        Tensor::from_vec(rgb, &[n, 3, h, w])?,
        Tensor::from_vec(depth, &[n, 1, h, w])?,
        samples.iter().map(|s| s.labels.clone()).collect(),
    ))
}

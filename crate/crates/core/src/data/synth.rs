//! Synthetic scenes where two classes share a colour distribution and are
//! told apart only by depth.
//!
//! Classes: 0 background, 1 near box, 2 far box, 3 striped disk.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetManifest, SampleRecord};
use crate::encoder::SPATIAL_MULTIPLE;
use crate::error::{Error, Result};
use crate::labels::LabelMap;

pub const SYNTH_CLASSES: usize = 4;
pub const NEAR_DEPTH: (f32, f32) = (0.1, 0.3);
pub const FAR_DEPTH: (f32, f32) = (0.7, 0.9);
pub const DEPTH_NOISE: f32 = 0.02;
const MIN_VISIBLE: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Split {
    #[default]
    Train,
    Val,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1 << 40,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Rect {
    y: usize,
    x: usize,
    h: usize,
    w: usize,
}

impl Rect {
    fn contains(&self, y: usize, x: usize) -> bool {
        (self.y..self.y + self.h).contains(&y) && (self.x..self.x + self.w).contains(&x)
    }
}

#[derive(Debug, Clone, Copy)]
struct Disk {
    cy: f64,
    cx: f64,
    r: f64,
}

impl Disk {
    fn contains(&self, y: usize, x: usize) -> bool {
        let (dy, dx) = (y as f64 + 0.5 - self.cy, x as f64 + 0.5 - self.cx);
        dy * dy + dx * dx <= self.r * self.r
    }
}

fn random_rect(rng: &mut ChaCha8Rng, size: usize) -> Rect {
    let (lo, hi) = (size / 8, 3 * size / 8);
    let h = rng.random_range(lo..=hi);
    let w = rng.random_range(lo..=hi);
    Rect { y: rng.random_range(0..=size - h), x: rng.random_range(0..=size - w), h, w }
}

fn random_disk(rng: &mut ChaCha8Rng, size: usize) -> Disk {
    let s = size as f64;
    let r = rng.random_range(s / 10.0..=s / 6.0);
    Disk { cy: rng.random_range(r..=s - r), cx: rng.random_range(r..=s - r), r }
}

/// Saturated colour with uniform hue; the same law for both box classes.
fn box_colour(rng: &mut ChaCha8Rng) -> [f32; 3] {
    let hue = rng.random_range(0.0f32..6.0);
    let sat = rng.random_range(0.6f32..=1.0);
    let val = rng.random_range(0.6f32..=1.0);
    let f = hue.fract();
    let (p, q, t) = (val * (1.0 - sat), val * (1.0 - sat * f), val * (1.0 - sat * (1.0 - f)));
    match hue as u32 {
        0 => [val, t, p],
        1 => [q, val, p],
        2 => [p, val, t],
        3 => [p, q, val],
        4 => [t, p, val],
        _ => [val, p, q],
    }
}

/// One scene from its own random stream, so samples are independent of the
/// set size.
pub fn synth_sample(seed: u64, split: Split, index: u64, size: usize) -> SampleRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream() + index);
    let noise = Normal::new(0.0f32, DEPTH_NOISE).expect("positive sigma");
    let hw = size * size;

    // far box, then disk, then near box; re-place until every shape keeps
    // enough of its area
    let (mut far, mut disk, mut near);
    let mut attempts = 0;
    loop {
        far = random_rect(&mut rng, size);
        disk = random_disk(&mut rng, size);
        near = random_rect(&mut rng, size);
        let mut far_vis = 0usize;
        let mut disk_all = 0usize;
        let mut disk_vis = 0usize;
        for y in 0..size {
            for x in 0..size {
                let on_near = near.contains(y, x);
                let on_disk = disk.contains(y, x);
                far_vis += (far.contains(y, x) && !on_disk && !on_near) as usize;
                disk_all += on_disk as usize;
                disk_vis += (on_disk && !on_near) as usize;
            }
        }
        attempts += 1;
        let ok = far_vis as f64 >= MIN_VISIBLE * (far.h * far.w) as f64 && disk_vis as f64 >= MIN_VISIBLE * disk_all as f64;
        if ok || attempts >= 64 {
            break;
        }
    }

    let grey = rng.random_range(0.3f32..=0.7);
    let bg_depth = rng.random_range(0.45f32..=0.55);
    let tilt = rng.random_range(-0.05f32..=0.05);
    let near_c = box_colour(&mut rng);
    let far_c = box_colour(&mut rng);
    let near_d = rng.random_range(NEAR_DEPTH.0..=NEAR_DEPTH.1);
    let far_d = rng.random_range(FAR_DEPTH.0..=FAR_DEPTH.1);
    let disk_d = rng.random_range(0.3f32..=0.5);
    let period = rng.random_range(3..=5usize);

    let mut rgb = vec![0.0f32; 3 * hw];
    let mut depth = vec![0.0f32; hw];
    let mut labels = vec![0u8; hw];
    for y in 0..size {
        for x in 0..size {
            let p = y * size + x;
            let ramp = tilt * (2.0 * y as f32 / (size - 1).max(1) as f32 - 1.0);
            let (mut c, mut d, mut l) = ([grey; 3], bg_depth + ramp, 0u8);
            if far.contains(y, x) {
                (c, d, l) = (far_c, far_d, 2);
            }
            if disk.contains(y, x) {
                let light = ((y + x) / period) % 2 == 0;
                (c, d, l) = (if light { [0.95; 3] } else { [0.05; 3] }, disk_d, 3);
            }
            if near.contains(y, x) {
                (c, d, l) = (near_c, near_d, 1);
            }
            for (k, v) in c.iter().enumerate() {
                rgb[k * hw + p] = (v + rng.random_range(-0.03f32..=0.03)).clamp(0.0, 1.0);
            }
            depth[p] = (d + noise.sample(&mut rng)).clamp(0.0, 1.0);
            labels[p] = l;
        }
    }
    SampleRecord::new(size, size, rgb, depth, LabelMap::new(size, size, labels).expect("extent")).expect("finite")
}

/// Writes `count` scenes of `size x size` pixels plus `manifest.txt`.
pub fn synth_generate(seed: u64, count: usize, size: usize, split: Split, out_dir: &Path) -> Result<DatasetManifest> {
    if size == 0 || size % SPATIAL_MULTIPLE != 0 {
        return Err(Error::InvalidArgument(format!("synthetic size {size} must be a positive multiple of {SPATIAL_MULTIPLE}")));
    }
    if count == 0 {
        return Err(Error::InvalidArgument("synthetic count must be positive".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut ids = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("{split}_{i:05}");
        synth_sample(seed, split, i as u64, size).save(out_dir, &id)?;
        ids.push(id);
    }
    let m = DatasetManifest { root: out_dir.to_path_buf(), ids, num_classes: SYNTH_CLASSES, split };
    m.save()?;
    Ok(m)
}

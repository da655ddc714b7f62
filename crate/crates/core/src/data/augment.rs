use rand::Rng;

use super::SampleRecord;
use crate::labels::{LabelMap, IGNORE};
use crate::nn::{axis_taps, ResizeMode};

pub const SCALE_RANGE: (f64, f64) = (0.75, 1.25);

/// Random mirror (p = 0.5) and rescale in [`SCALE_RANGE`], cropped or padded
/// back to the original extents.
pub fn augment<R: Rng + ?Sized>(s: &SampleRecord, rng: &mut R) -> SampleRecord {
    let mirror = rng.random_bool(0.5);
    let scale = rng.random_range(SCALE_RANGE.0..=SCALE_RANGE.1);
    augment_with(s, mirror, scale)
}

/// Deterministic core of [`augment`]. Colour and depth are resampled
/// bilinearly, labels by nearest neighbour. Padding is 0 for the image
/// planes and IGNORE for the labels.
pub fn augment_with(s: &SampleRecord, mirror: bool, scale: f64) -> SampleRecord {
    let (h, w) = (s.height, s.width);
    let (sh, sw) = (((h as f64 * scale).round() as usize).max(1), ((w as f64 * scale).round() as usize).max(1));
    let (ty_b, tx_b) = (axis_taps(h, sh, ResizeMode::Bilinear), axis_taps(w, sw, ResizeMode::Bilinear));
    let (ty_n, tx_n) = (axis_taps(h, sh, ResizeMode::Nearest), axis_taps(w, sw, ResizeMode::Nearest));

    // placement of the scaled image inside the output: crop when larger,
    // centre with padding when smaller
    let place = |src: usize, dst: usize, i: usize| -> Option<usize> {
        let j = i as isize + (src as isize - dst as isize) / 2;
        (0..src as isize).contains(&j).then_some(j as usize)
    };
    let col = |x: usize| if mirror { w - 1 - x } else { x };

    let plane = |p: &[f32]| -> Vec<f32> {
        let mut out = vec![0.0f32; h * w];
        for y in 0..h {
            let Some(sy) = place(sh, h, y) else { continue };
            let (y0, y1, fy) = ty_b[sy];
            for x in 0..w {
                let Some(sx) = place(sw, w, x) else { continue };
                let (x0, x1, fx) = tx_b[sx];
                let at = |r: usize, c: usize| p[r * w + col(c)] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[y * w + x] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
        out
    };
    let hw = h * w;
    let rgb: Vec<f32> = (0..3).flat_map(|c| plane(&s.rgb[c * hw..(c + 1) * hw])).collect();
    let depth = plane(&s.depth);

    let mut labels = vec![IGNORE; hw];
    for y in 0..h {
        let Some(sy) = place(sh, h, y) else { continue };
        for x in 0..w {
            let Some(sx) = place(sw, w, x) else { continue };
            labels[y * w + x] = s.labels.get(ty_n[sy].0, col(tx_n[sx].0));
        }
    }
    SampleRecord {
        height: h,
        width: w,
        rgb,
        depth,
        labels: LabelMap::new(h, w, labels).expect("extents preserved"),
    }
}

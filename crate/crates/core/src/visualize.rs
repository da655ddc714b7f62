//! Colour rendering of label maps.

use crate::data::Image;
use crate::labels::{LabelMap, IGNORE};

/// Class `c` of `k` gets hue `c * 360 / k` at full saturation and value;
/// IGNORE and out-of-range labels are black.
pub fn palette_colour(class: u8, k: usize) -> [u8; 3] {
    if class == IGNORE || class as usize >= k {
        return [0, 0, 0];
    }
    let h = class as f64 * 6.0 / k as f64;
    let f = h.fract();
    let up = (f * 255.0).round() as u8;
    let down = ((1.0 - f) * 255.0).round() as u8;
    match h as u32 {
        0 => [255, up, 0],
        1 => [down, 255, 0],
        2 => [0, 255, up],
        3 => [0, down, 255],
        4 => [up, 0, 255],
        _ => [255, 0, down],
    }
}

pub fn colorize(labels: &LabelMap, k: usize) -> Image {
    let data = labels
        .data
        .iter()
        .flat_map(|&c| palette_colour(c, k))
        .map(u16::from)
        .collect();
    Image::new(labels.width, labels.height, 3, 255, data).expect("extents match")
}

//! Per-pixel class maps.

use crate::error::{Error, Result};

/// Pixels with this label are excluded from the loss and the metrics.
pub const IGNORE: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Label(format!(
                "{height}x{width} label map needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap { height, width, data })
    }

    pub fn filled(height: usize, width: usize, v: u8) -> Self {
        LabelMap { height, width, data: vec![v; height * width] }
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Errors if any non-IGNORE label is `>= classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.data.iter().find(|&&v| v != IGNORE && v as usize >= classes) {
            Some(v) => Err(Error::Label(format!("label {v} out of range for {classes} classes"))),
            None => Ok(()),
        }
    }

    /// Nearest-neighbour reduction keeping the top-left pixel of every
    /// `factor x factor` cell.
    pub fn downsample(&self, factor: usize) -> Result<LabelMap> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::Label(format!(
                "{}x{} labels cannot be reduced by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| self.get(y * factor, x * factor))
            .collect();
        Ok(LabelMap { height: h, width: w, data })
    }

    /// Nearest-neighbour enlargement by an integer factor.
    pub fn upsample(&self, factor: usize) -> LabelMap {
        let (h, w) = (self.height * factor, self.width * factor);
        let data = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .map(|(y, x)| self.get(y / factor, x / factor))
            .collect();
        LabelMap { height: h, width: w, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn factor_one_and_constant_maps() {
        let m = LabelMap::new(2, 2, vec![0, 1, 2, IGNORE]).unwrap();
        assert_eq!(m.downsample(1).unwrap(), m);
        assert_eq!(LabelMap::filled(4, 8, 3).downsample(4).unwrap(), LabelMap::filled(1, 2, 3));
    }

    #[test]
    fn checkerboard_keeps_even_corners() {
        let data = (0..16).map(|i| ((i / 4 + i % 4) % 2) as u8).collect();
        let m = LabelMap::new(4, 4, data).unwrap();
        assert_eq!(m.downsample(2).unwrap().data, vec![0, 0, 0, 0]);
        let shifted = LabelMap::new(4, 4, (0..16).map(|i| (i % 4) as u8).collect()).unwrap();
        assert_eq!(shifted.downsample(2).unwrap().data, vec![0, 2, 0, 2]);
    }

    #[test]
    fn indivisible_and_out_of_range() {
        assert!(LabelMap::filled(3, 4, 0).downsample(2).is_err());
        assert!(LabelMap::new(2, 2, vec![0; 3]).is_err());
        let m = LabelMap::new(1, 3, vec![0, 4, IGNORE]).unwrap();
        assert!(m.check_classes(4).is_err());
        assert!(m.check_classes(5).is_ok());
    }

    proptest! {
        #[test]
        fn downsampling_composes(data in prop::collection::vec(any::<u8>(), 8 * 8), a in 1usize..3, b in 1usize..3) {
            let a = 1 << (a - 1);
            let b = 1 << (b - 1);
            let m = LabelMap::new(8, 8, data).unwrap();
            prop_assert_eq!(m.downsample(a).unwrap().downsample(b).unwrap(), m.downsample(a * b).unwrap());
        }

        #[test]
        fn upsample_then_downsample_is_identity(data in prop::collection::vec(any::<u8>(), 12), f in 1usize..4) {
            let m = LabelMap::new(3, 4, data).unwrap();
            prop_assert_eq!(m.upsample(f).downsample(f).unwrap(), m);
        }
    }
}

//! Binary Netpbm images: P5 (grey) and P6 (RGB), 8 or 16 bits per sample.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub maxval: u16,
    /// Interleaved samples, row-major.
    pub data: Vec<u16>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, maxval: u16, data: Vec<u16>) -> Result<Self> {
        if !matches!(channels, 1 | 3) || maxval == 0 || data.len() != width * height * channels {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height}x{channels} image with maxval {maxval} and {} samples",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > maxval) {
            return Err(Error::InvalidArgument(format!("sample {v} exceeds maxval {maxval}")));
        }
        Ok(Image { width, height, channels, maxval, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n{}\n", self.width, self.height, self.maxval).into_bytes();
        if self.maxval < 256 {
            out.extend(self.data.iter().map(|&v| v as u8));
        } else {
            out.extend(self.data.iter().flat_map(|v| v.to_be_bytes()));
        }
        out
    }

    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format { kind: "netpbm", path: origin.to_path_buf(), reason };
        let mut pos = 0;
        let mut token = || -> Result<String> {
            loop {
                while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                    pos += 1;
                }
                if pos < bytes.len() && bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                    continue;
                }
                break;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header".into()));
            }
            Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
        };
        let channels = match token()?.as_str() {
            "P5" => 1,
            "P6" => 3,
            m => return Err(bad(format!("unsupported magic {m:?}"))),
        };
        let mut number = |what: &str| -> Result<usize> {
            let t = token()?;
            t.parse().map_err(|_| bad(format!("bad {what} {t:?}")))
        };
        let width = number("width")?;
        let height = number("height")?;
        let maxval = number("maxval")?;
        if width == 0 || height == 0 || maxval == 0 || maxval > 65535 {
            return Err(bad(format!("invalid header {width}x{height} maxval {maxval}")));
        }
        // exactly one whitespace byte separates the header from the raster
        let body = &bytes[(pos + 1).min(bytes.len())..];
        let n = width * height * channels;
        let data: Vec<u16> = if maxval < 256 {
            if body.len() != n {
                return Err(bad(format!("expected {n} raster bytes, found {}", body.len())));
            }
            body.iter().map(|&b| b as u16).collect()
        } else {
            if body.len() != 2 * n {
                return Err(bad(format!("expected {} raster bytes, found {}", 2 * n, body.len())));
            }
            body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
        };
        Image::new(width, height, channels, maxval as u16, data).map_err(|e| bad(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

//! Binary PGM/PPM ingestion and bilinear resampling.

use std::path::Path;

use cskn::FeatureMap;

use crate::error::{CliError, Result};

/// A decoded 8-bit netpbm raster, interleaved, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub maxval: u16,
    pub samples: Vec<u8>,
}

#[derive(Debug)]
struct DecodeError {
    offset: usize,
    message: String,
}

fn fail<T>(offset: usize, message: impl Into<String>) -> std::result::Result<T, DecodeError> {
    Err(DecodeError {
        offset,
        message: message.into(),
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, DecodeError> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return if self.pos >= self.bytes.len() {
                fail(self.pos, format!("truncated header, expected {what}"))
            } else {
                fail(self.pos, format!("expected {what}"))
            };
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map_or_else(|| fail(start, format!("{what} out of range")), Ok)
    }
}

fn decode_bytes(bytes: &[u8]) -> std::result::Result<RawImage, DecodeError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some(_) => return fail(0, "unsupported format: expected binary PGM (P5) or PPM (P6)"),
        None => return fail(0, "truncated file"),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return fail(cur.pos, "image has zero size");
    }
    if maxval == 0 || maxval > 255 {
        return fail(cur.pos, format!("maxval {maxval} is not an 8-bit depth"));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        Some(_) => return fail(cur.pos, "expected whitespace after maxval"),
        None => return fail(cur.pos, "truncated header"),
    }
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or(DecodeError {
            offset: cur.pos,
            message: "image dimensions overflow".into(),
        })?;
    let data = &bytes[cur.pos..];
    if data.len() < len {
        return fail(
            bytes.len(),
            format!("truncated pixel data: {} of {len} bytes", data.len()),
        );
    }
    if let Some(i) = data[..len].iter().position(|&v| usize::from(v) > maxval) {
        return fail(cur.pos + i, format!("sample exceeds maxval {maxval}"));
    }
    Ok(RawImage {
        width,
        height,
        channels,
        maxval: maxval as u16,
        samples: data[..len].to_vec(),
    })
}

/// Parses an in-memory P5/P6 file; `path` only labels errors.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<RawImage> {
    decode_bytes(bytes).map_err(|e| CliError::Decode {
        path: path.to_path_buf(),
        offset: e.offset,
        message: e.message,
    })
}

impl RawImage {
    /// Intensities scaled to `[0, 1]` with `channels` output channels: RGB is
    /// reduced to luma for one channel, gray is replicated for three.
    pub fn to_feature_map(&self, channels: usize) -> Result<FeatureMap> {
        let max = f64::from(self.maxval);
        let px = self.width * self.height;
        let values: Vec<f64> = match (self.channels, channels) {
            (1, 1) | (3, 3) => self.samples.iter().map(|&v| f64::from(v) / max).collect(),
            (3, 1) => self
                .samples
                .chunks_exact(3)
                .map(|p| (0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])) / max)
                .collect(),
            (1, 3) => self
                .samples
                .iter()
                .flat_map(|&v| [f64::from(v) / max; 3])
                .collect(),
            (_, c) => return Err(CliError::Usage(format!("models with {c} input channels are not supported"))),
        };
        debug_assert_eq!(values.len(), px * channels);
        Ok(FeatureMap::new(self.width, self.height, channels, values)?)
    }
}

/// Bilinear resampling to `out_w × out_h` with pixel-center alignment;
/// equal sizes are an exact copy.
pub fn resize_bilinear(map: &FeatureMap, out_w: usize, out_h: usize) -> Result<FeatureMap> {
    let (w, h, c) = (map.width(), map.height(), map.channels());
    if out_w == 0 || out_h == 0 {
        return Err(CliError::Usage("resize target must be positive".into()));
    }
    if (w, h) == (out_w, out_h) {
        return Ok(map.clone());
    }
    let axis = |dst: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|x| axis(x, w, out_w)).collect();
    let mut values = Vec::with_capacity(out_w * out_h * c);
    for y in 0..out_h {
        let (r0, r1, fy) = axis(y, h, out_h);
        for &(c0, c1, fx) in &cols {
            let (p00, p01, p10, p11) = (map.at(r0, c0), map.at(r0, c1), map.at(r1, c0), map.at(r1, c1));
            for k in 0..c {
                let top = p00[k] + fx * (p01[k] - p00[k]);
                let bottom = p10[k] + fx * (p11[k] - p10[k]);
                values.push(top + fy * (bottom - top));
            }
        }
    }
    Ok(FeatureMap::new(out_w, out_h, c, values)?)
}

/// Reads a PGM/PPM file as an `m × m` map with `channels` channels.
pub fn load_image(path: &Path, target_size: usize, channels: usize) -> Result<FeatureMap> {
    let bytes = std::fs::read(path).map_err(CliError::io(path))?;
    let raw = decode_pnm(&bytes, path)?;
    resize_bilinear(&raw.to_feature_map(channels)?, target_size, target_size)
}

/// Writes a one- or three-channel map with values in `[0, 1]` as P5/P6.
pub fn save_pnm(path: &Path, map: &FeatureMap) -> Result<()> {
    let magic = match map.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(CliError::Usage(format!("cannot write a {c}-channel image"))),
    };
    let mut bytes = format!("{magic}\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    bytes.extend(map.values().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, bytes).map_err(CliError::io(path))
}

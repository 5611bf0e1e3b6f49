//! Feature maps, contrast-normalized sub-patches and the gradient encoding.
//!
//! A [`FeatureMap`] is a row-major grid of per-location feature vectors. It
//! holds raw images, gradient encodings and layer outputs alike.

use crate::error::{Error, Result};

/// A 2-D grid of per-location real feature vectors, stored row-major with
/// channels fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    width: usize,
    height: usize,
    channels: usize,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "feature map dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if values.len() != width * height * channels {
            return Err(Error::invalid(format!(
                "feature map of {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite value at index {pos}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize, channels: usize) -> Result<Self> {
        Self::new(width, height, channels, vec![0.0; width * height * channels])
    }

    /// Builds a single-channel map from `f(row, col)`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                values.push(f(r, c));
            }
        }
        Self::new(width, height, 1, values)
    }

    // Callers inside the crate guarantee the invariants.
    pub(crate) fn from_raw_unchecked(
        width: usize,
        height: usize,
        channels: usize,
        values: Vec<f64>,
    ) -> Self {
        debug_assert_eq!(values.len(), width * height * channels);
        Self {
            width,
            height,
            channels,
            values,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// The channel vector at `(row, col)`.
    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let start = (row * self.width + col) * self.channels;
        &self.values[start..start + self.channels]
    }

    /// Returns a copy with every value multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Result<Self> {
        Self::new(
            self.width,
            self.height,
            self.channels,
            self.values.iter().map(|v| v * k).collect(),
        )
    }
}

/// A window of a feature map together with its norm and contrast-normalized
/// direction.
#[derive(Debug, Clone, PartialEq)]
pub struct SubPatch {
    /// `(row, col)` of the window on the valid sub-patch grid.
    pub center: (usize, usize),
    pub raw: Vec<f64>,
    pub norm: f64,
    /// Unit-norm version of `raw`, or all zeros when `norm == 0`.
    pub normalized: Vec<f64>,
}

impl SubPatch {
    pub fn from_raw(center: (usize, usize), raw: Vec<f64>) -> Self {
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let normalized = if norm > 0.0 {
            raw.iter().map(|v| v / norm).collect()
        } else {
            vec![0.0; raw.len()]
        };
        Self {
            center,
            raw,
            norm,
            normalized,
        }
    }

    pub fn dim(&self) -> usize {
        self.raw.len()
    }
}

/// Sub-patches laid out on the grid of valid window positions, raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct SubPatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patches: Vec<SubPatch>,
}

impl SubPatchGrid {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Dimensionality of each sub-patch vector.
    pub fn dim(&self) -> usize {
        self.patches.first().map_or(0, SubPatch::dim)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SubPatch> {
        self.patches.iter()
    }
}

/// Extracts every fully contained `patch_size × patch_size` window of `map`.
///
/// The raw vector of a window is laid out row by row, channels fastest.
pub fn extract_subpatches(map: &FeatureMap, patch_size: usize) -> Result<SubPatchGrid> {
    if patch_size == 0 {
        return Err(Error::invalid("patch size must be positive"));
    }
    if patch_size > map.width || patch_size > map.height {
        return Err(Error::invalid(format!(
            "patch size {patch_size} exceeds map dimensions {}x{}",
            map.width, map.height
        )));
    }
    let rows = map.height - patch_size + 1;
    let cols = map.width - patch_size + 1;
    let c = map.channels;
    let mut patches = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for col in 0..cols {
            let mut raw = Vec::with_capacity(patch_size * patch_size * c);
            for dr in 0..patch_size {
                let start = ((r + dr) * map.width + col) * c;
                raw.extend_from_slice(&map.values[start..start + patch_size * c]);
            }
            patches.push(SubPatch::from_raw((r, col), raw));
        }
    }
    Ok(SubPatchGrid {
        rows,
        cols,
        patches,
    })
}

/// Per-pixel gradient magnitude and unit direction of a single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEncoding {
    pub width: usize,
    pub height: usize,
    pub magnitude: Vec<f64>,
    /// `[cos θ, sin θ]`, or `[0, 0]` where the magnitude is zero.
    pub direction: Vec<[f64; 2]>,
}

impl GradientEncoding {
    /// Two-channel map holding `magnitude · direction` per pixel.
    pub fn to_feature_map(&self) -> FeatureMap {
        let values = self
            .magnitude
            .iter()
            .zip(&self.direction)
            .flat_map(|(m, d)| [m * d[0], m * d[1]])
            .collect();
        FeatureMap::from_raw_unchecked(self.width, self.height, 2, values)
    }
}

/// Forward first differences on the interior grid; the last row and column
/// are dropped, so a `W × H` image yields a `(W-1) × (H-1)` encoding.
pub fn build_gradient_map(image: &FeatureMap) -> Result<GradientEncoding> {
    if image.channels != 1 {
        return Err(Error::invalid(format!(
            "gradient map needs a single-channel image, got {} channels",
            image.channels
        )));
    }
    if image.width < 2 || image.height < 2 {
        return Err(Error::invalid(format!(
            "gradient map needs at least 2x2 pixels, got {}x{}",
            image.width, image.height
        )));
    }
    let (w, h) = (image.width - 1, image.height - 1);
    let px = |r: usize, c: usize| image.values[r * image.width + c];
    let mut magnitude = Vec::with_capacity(w * h);
    let mut direction = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let gx = px(r, c + 1) - px(r, c);
            let gy = px(r + 1, c) - px(r, c);
            let m = (gx * gx + gy * gy).sqrt();
            magnitude.push(m);
            direction.push(if m > 0.0 { [gx / m, gy / m] } else { [0.0, 0.0] });
        }
    }
    Ok(GradientEncoding {
        width: w,
        height: h,
        magnitude,
        direction,
    })
}

/// One 1×1 sub-patch per pixel of the gradient encoding.
pub fn gradient_subpatches(g: &GradientEncoding) -> SubPatchGrid {
    let patches = g
        .magnitude
        .iter()
        .zip(&g.direction)
        .enumerate()
        .map(|(i, (&m, d))| SubPatch {
            center: (i / g.width, i % g.width),
            raw: vec![m * d[0], m * d[1]],
            norm: m,
            normalized: d.to_vec(),
        })
        .collect();
    SubPatchGrid {
        rows: g.height,
        cols: g.width,
        patches,
    }
}

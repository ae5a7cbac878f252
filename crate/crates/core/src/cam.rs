//! Class activation maps and semantic information maps.
//!
//! A CAM is the classifier-weighted sum of the last feature maps, upsampled to
//! the input resolution. Normalising it to a non-negative unit-mass map gives
//! the semantic map whose masked mass becomes a mixed label's weight.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixkit::PixelMask;

/// Maps whose shifted mass falls below this are replaced by the uniform map.
pub const DEGENERATE_MASS: f64 = 1e-12;

/// `c` feature maps of size `height × width`, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureStack {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::invalid("feature stack dimensions must be positive"));
        }
        if data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "feature stack has {} values, expected {}",
                data.len(),
                channels * height * width
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature stack contains non-finite values"));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn map(&self, l: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[l * n..(l + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Per-class weight rows of the classification head, bias excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights {
    num_classes: usize,
    dim: usize,
    rows: Vec<f64>,
}

impl ClassifierWeights {
    pub fn new(num_classes: usize, dim: usize, rows: Vec<f64>) -> Result<Self> {
        if rows.len() != num_classes * dim {
            return Err(Error::invalid(format!(
                "classifier weights have {} values, expected {num_classes}×{dim}",
                rows.len()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("classifier weights contain non-finite values"));
        }
        Ok(Self { num_classes, dim, rows })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, class_id: usize) -> &[f64] {
        &self.rows[class_id * self.dim..(class_id + 1) * self.dim]
    }
}

/// A raw (unnormalised) real-valued map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl RawMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(Error::invalid("raw map shape does not match its values"));
        }
        Ok(Self { height, width, values })
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }
}

/// Non-negative map summing to one over the image plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SemanticMap {
    /// Validates non-negativity and unit mass (within `1e-6`).
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(Error::invalid("semantic map shape does not match its values"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("semantic map values must be finite and non-negative"));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("semantic map sums to {total}, expected 1")));
        }
        Ok(Self { height, width, values })
    }

    pub fn uniform(height: usize, width: usize) -> Self {
        let n = height * width;
        Self {
            height,
            width,
            values: vec![1.0 / n as f64; n],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }
}

/// Corner-aligned bilinear upsampling of a single `h × w` map.
///
/// Output pixel `(i, j)` samples source coordinate
/// `(i·(h−1)/(H−1), j·(w−1)/(W−1))`. Interpolation is written in lerp form so
/// constant fields are reproduced exactly.
pub fn bilinear_upsample(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let scale = |n_in: usize, n_out: usize| {
        if n_out > 1 {
            (n_in - 1) as f64 / (n_out - 1) as f64
        } else {
            0.0
        }
    };
    let (sy, sx) = (scale(h, out_h), scale(w, out_w));
    let mut out = Vec::with_capacity(out_h * out_w);
    for i in 0..out_h {
        let fy = i as f64 * sy;
        let y0 = (fy.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for j in 0..out_w {
            let fx = j as f64 * sx;
            let x0 = (fx.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let (a, b) = (src[y0 * w + x0], src[y0 * w + x1]);
            let (c, d) = (src[y1 * w + x0], src[y1 * w + x1]);
            let top = a + tx * (b - a);
            let bottom = c + tx * (d - c);
            out.push(top + ty * (bottom - top));
        }
    }
    out
}

/// Class activation map for `class_id`, upsampled to `out_height × out_width`.
///
/// The result may contain negative values.
pub fn compute_cam(
    features: &FeatureStack,
    weights: &ClassifierWeights,
    class_id: usize,
    out_height: usize,
    out_width: usize,
) -> Result<RawMap> {
    if weights.dim() != features.channels() {
        return Err(Error::invalid(format!(
            "classifier dimension {} does not match {} feature maps",
            weights.dim(),
            features.channels()
        )));
    }
    if class_id >= weights.num_classes() {
        return Err(Error::invalid(format!(
            "class {class_id} out of range for {} classes",
            weights.num_classes()
        )));
    }
    if out_height < features.height() || out_width < features.width() {
        return Err(Error::invalid("CAM output must be at least the feature resolution"));
    }
    let n = features.height() * features.width();
    let mut combined = vec![0.0; n];
    for (l, &w) in weights.row(class_id).iter().enumerate() {
        for (acc, &f) in combined.iter_mut().zip(features.map(l)) {
            *acc += w * f;
        }
    }
    let values = bilinear_upsample(&combined, features.height(), features.width(), out_height, out_width);
    RawMap::new(out_height, out_width, values)
}

/// Shifts a raw map to be non-negative and rescales it to unit mass.
///
/// Maps with a negative minimum are shifted by `−min`. If the shifted mass is
/// at most [`DEGENERATE_MASS`] the uniform map is returned.
pub fn normalize_to_semantic_map(raw: &RawMap) -> Result<SemanticMap> {
    if raw.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("CAM contains non-finite values"));
    }
    let min = raw.values.iter().copied().fold(f64::INFINITY, f64::min);
    let shift = if min < 0.0 { -min } else { 0.0 };
    let shifted: Vec<f64> = raw.values.iter().map(|v| (v + shift).max(0.0)).collect();
    let total: f64 = shifted.iter().sum();
    if !(total > DEGENERATE_MASS) || !total.is_finite() {
        return Ok(SemanticMap::uniform(raw.height, raw.width));
    }
    let values = shifted.into_iter().map(|v| v / total).collect();
    Ok(SemanticMap {
        height: raw.height,
        width: raw.width,
        values,
    })
}

/// Mass of `s` under the pixel mask, clamped to `[0, 1]`.
pub fn semantic_proportion(mask: &PixelMask, s: &SemanticMap) -> Result<f64> {
    if mask.height() != s.height() || mask.width() != s.width() {
        return Err(Error::invalid(format!(
            "mask is {}×{} but semantic map is {}×{}",
            mask.height(),
            mask.width(),
            s.height(),
            s.width()
        )));
    }
    let total: f64 = mask
        .cells()
        .iter()
        .zip(s.values())
        .filter(|(m, _)| **m)
        .map(|(_, v)| v)
        .sum();
    Ok(total.clamp(0.0, 1.0))
}

/// Jet colormap: 0 → dark blue, 0.5 → green, 1 → dark red.
pub fn jet(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let ch = |offset: f64| (1.5 - (4.0 * t - offset).abs()).clamp(0.0, 1.0);
    let to_u8 = |v: f64| (v * 255.0).round() as u8;
    [to_u8(ch(3.0)), to_u8(ch(2.0)), to_u8(ch(1.0))]
}

/// Renders a semantic map as a jet heatmap, scaled so its maximum is red.
pub fn render_heatmap(s: &SemanticMap) -> image::RgbImage {
    let max = s.values().iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    image::RgbImage::from_fn(s.width() as u32, s.height() as u32, |x, y| {
        image::Rgb(jet(s.at(y as usize, x as usize) * scale))
    })
}

//! Mixing kernels: patch masks, pixel blending, label combination and the
//! four mixers (`seppmix`, `patchmix`, `mixup`, `cutmix`).
//!
//! Every mixer is a pure function of its inputs and the [`SeededRng`] it is
//! handed. The `*_with_*` variants take the random draw (mask, box, lambda)
//! explicitly so the kernels can be checked against brute-force oracles.

use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::cam::{semantic_proportion, SemanticMap};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::SeededRng;

/// Tolerance on the total mass of a label distribution.
pub const LABEL_MASS_EPS: f64 = 1e-6;

/// Default Beta concentration for `mixup` and `cutmix`.
pub const DEFAULT_BETA_ALPHA: f64 = 1.0;

/// Non-negative weights over base classes.
///
/// Hand-built distributions have mass at most 1. Mixed labels from
/// [`combine_labels`] are the exception: `rho_a·y_a + rho_b·y_b` is kept
/// unnormalised, so its mass is `rho_a + rho_b ∈ [0, 2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    weights: Vec<f64>,
}

impl LabelDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::invalid("label distribution needs at least one class"));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("label weights must be finite and non-negative"));
        }
        let mass: f64 = weights.iter().sum();
        if mass > 1.0 + LABEL_MASS_EPS {
            return Err(Error::invalid(format!("label mass {mass} exceeds 1")));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    pub fn mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Index of the largest weight, lowest index on ties.
    pub fn dominant_class(&self) -> usize {
        let mut best = 0;
        for (k, w) in self.weights.iter().enumerate() {
            if *w > self.weights[best] {
                best = k;
            }
        }
        best
    }
}

/// One-hot label for `class_id`.
pub fn one_hot(class_id: usize, num_classes: usize) -> Result<LabelDistribution> {
    if class_id >= num_classes {
        return Err(Error::invalid(format!(
            "class {class_id} out of range for {num_classes} classes"
        )));
    }
    let mut weights = vec![0.0; num_classes];
    weights[class_id] = 1.0;
    Ok(LabelDistribution { weights })
}

/// `rho_a·y_a + rho_b·y_b`, without renormalisation.
pub fn combine_labels(
    y_a: &LabelDistribution,
    y_b: &LabelDistribution,
    rho_a: f64,
    rho_b: f64,
) -> Result<LabelDistribution> {
    for rho in [rho_a, rho_b] {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::invalid(format!("label weight {rho} outside [0, 1]")));
        }
    }
    if y_a.num_classes() != y_b.num_classes() {
        return Err(Error::invalid("label distributions cover different class counts"));
    }
    let weights = y_a
        .weights
        .iter()
        .zip(&y_b.weights)
        .map(|(a, b)| rho_a * a + rho_b * b)
        .collect();
    Ok(LabelDistribution { weights })
}

/// `grid_n × grid_n` binary grid; `true` cells take their pixels from `x_a`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGridMask {
    grid_n: usize,
    cells: Vec<bool>,
}

impl PatchGridMask {
    pub fn from_cells(grid_n: usize, cells: Vec<bool>) -> Result<Self> {
        if grid_n == 0 {
            return Err(Error::invalid("grid size must be at least 1"));
        }
        if cells.len() != grid_n * grid_n {
            return Err(Error::invalid(format!(
                "{} cells given for a {grid_n}×{grid_n} grid",
                cells.len()
            )));
        }
        Ok(Self { grid_n, cells })
    }

    pub fn filled(grid_n: usize, value: bool) -> Result<Self> {
        Self::from_cells(grid_n, vec![value; grid_n * grid_n])
    }

    pub fn grid_n(&self) -> usize {
        self.grid_n
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn cell(&self, row: usize, col: usize) -> bool {
        self.cells[row * self.grid_n + col]
    }

    pub fn count_ones(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            grid_n: self.grid_n,
            cells: self.cells.iter().map(|c| !c).collect(),
        }
    }

    /// Rows of 0/1 integers, as written to preview files.
    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.cells
            .chunks(self.grid_n)
            .map(|row| row.iter().map(|c| u8::from(*c)).collect())
            .collect()
    }
}

/// Per-pixel binary mask; `true` selects `x_a`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(Error::invalid("pixel mask shape does not match its cells"));
        }
        Ok(Self { height, width, cells })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn at(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.width + j]
    }

    pub fn count_ones(&self) -> usize {
        self.cells.iter().filter(|c| **c).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            cells: self.cells.iter().map(|c| !c).collect(),
        }
    }
}

/// Draws each of the `grid_n²` cells independently with probability 1/2.
pub fn sample_patch_mask(grid_n: usize, rng: &mut SeededRng) -> Result<PatchGridMask> {
    if grid_n == 0 {
        return Err(Error::invalid("grid size must be at least 1"));
    }
    let cells = (0..grid_n * grid_n).map(|_| rng.coin()).collect();
    PatchGridMask::from_cells(grid_n, cells)
}

/// Expands a patch grid to pixels: pixel `(i, j)` reads cell
/// `(⌊i·n/height⌋, ⌊j·n/width⌋)`.
pub fn upsample_mask(mask: &PatchGridMask, height: usize, width: usize) -> Result<PixelMask> {
    let n = mask.grid_n();
    if height < n || width < n {
        return Err(Error::invalid(format!(
            "{height}×{width} image is smaller than the {n}×{n} patch grid"
        )));
    }
    let mut cells = Vec::with_capacity(height * width);
    for i in 0..height {
        let row = i * n / height;
        for j in 0..width {
            cells.push(mask.cell(row, j * n / width));
        }
    }
    PixelMask::new(height, width, cells)
}

/// `mask ⊙ x_a + (1 − mask) ⊙ x_b`, channel by channel.
pub fn mix_images(x_a: &Image, x_b: &Image, mask: &PixelMask) -> Result<Image> {
    if !x_a.same_shape(x_b) || mask.height() != x_a.height() || mask.width() != x_a.width() {
        return Err(Error::invalid(format!(
            "cannot mix {}×{} with {}×{} under a {}×{} mask",
            x_a.height(),
            x_a.width(),
            x_b.height(),
            x_b.width(),
            mask.height(),
            mask.width()
        )));
    }
    let plane = mask.cells().len();
    let data = x_a
        .data()
        .iter()
        .zip(x_b.data())
        .enumerate()
        .map(|(k, (a, b))| if mask.cells()[k % plane] { *a } else { *b })
        .collect();
    Ok(Image::from_raw(x_a.height(), x_a.width(), data))
}

/// Which mixer produced a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixerKind {
    None,
    Mixup,
    Cutmix,
    Patchmix,
    Seppmix,
}

impl MixerKind {
    pub const ALL: [MixerKind; 5] = [
        MixerKind::None,
        MixerKind::Mixup,
        MixerKind::Cutmix,
        MixerKind::Patchmix,
        MixerKind::Seppmix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MixerKind::None => "none",
            MixerKind::Mixup => "mixup",
            MixerKind::Cutmix => "cutmix",
            MixerKind::Patchmix => "patchmix",
            MixerKind::Seppmix => "seppmix",
        }
    }
}

impl std::str::FromStr for MixerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MixerKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mixer `{s}`")))
    }
}

impl std::fmt::Display for MixerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Axis-aligned box `[top, bottom) × [left, right)` pasted from `x_b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CutBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl CutBox {
    pub fn empty() -> Self {
        Self { top: 0, left: 0, bottom: 0, right: 0 }
    }

    pub fn area(&self) -> usize {
        self.bottom.saturating_sub(self.top) * self.right.saturating_sub(self.left)
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i >= self.top && i < self.bottom && j >= self.left && j < self.right
    }
}

/// A labelled image taking part in a mix.
#[derive(Debug, Clone, Copy)]
pub struct Source<'a> {
    pub image: &'a Image,
    pub class_id: usize,
    pub instance: u64,
}

impl<'a> Source<'a> {
    pub fn new(image: &'a Image, class_id: usize, instance: u64) -> Self {
        Self { image, class_id, instance }
    }
}

/// How a mixed sample was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_a: u64,
    pub source_b: u64,
    pub class_a: usize,
    pub class_b: usize,
    pub mask: Option<PatchGridMask>,
    pub cut_box: Option<CutBox>,
    pub rho_a: f64,
    pub rho_b: f64,
    pub mixer: MixerKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedSample {
    pub image: Image,
    pub label: LabelDistribution,
    pub provenance: Provenance,
}

impl MixedSample {
    /// An unmixed sample with a one-hot label.
    pub fn plain(src: Source<'_>, num_classes: usize) -> Result<Self> {
        Ok(Self {
            image: src.image.clone(),
            label: one_hot(src.class_id, num_classes)?,
            provenance: Provenance {
                source_a: src.instance,
                source_b: src.instance,
                class_a: src.class_id,
                class_b: src.class_id,
                mask: None,
                cut_box: None,
                rho_a: 1.0,
                rho_b: 0.0,
                mixer: MixerKind::None,
            },
        })
    }
}

fn check_pair(a: &Source<'_>, b: &Source<'_>) -> Result<()> {
    if !a.image.same_shape(b.image) {
        return Err(Error::invalid(format!(
            "source images differ in shape: {}×{} vs {}×{}",
            a.image.height(),
            a.image.width(),
            b.image.height(),
            b.image.width()
        )));
    }
    Ok(())
}

fn finish(
    image: Image,
    a: &Source<'_>,
    b: &Source<'_>,
    num_classes: usize,
    rho_a: f64,
    rho_b: f64,
    mixer: MixerKind,
    mask: Option<PatchGridMask>,
    cut_box: Option<CutBox>,
) -> Result<MixedSample> {
    let label = combine_labels(
        &one_hot(a.class_id, num_classes)?,
        &one_hot(b.class_id, num_classes)?,
        rho_a,
        rho_b,
    )?;
    Ok(MixedSample {
        image,
        label,
        provenance: Provenance {
            source_a: a.instance,
            source_b: b.instance,
            class_a: a.class_id,
            class_b: b.class_id,
            mask,
            cut_box,
            rho_a,
            rho_b,
            mixer,
        },
    })
}

/// Semantic patch mixing with an explicit mask.
///
/// `rho_a` is the mass of `s_a` on pixels kept from `x_a`; `rho_b` the mass of
/// `s_b` on pixels taken from `x_b`.
pub fn seppmix_with_mask(
    a: Source<'_>,
    b: Source<'_>,
    s_a: &SemanticMap,
    s_b: &SemanticMap,
    mask: PatchGridMask,
    num_classes: usize,
) -> Result<MixedSample> {
    check_pair(&a, &b)?;
    let (h, w) = (a.image.height(), a.image.width());
    for s in [s_a, s_b] {
        if s.height() != h || s.width() != w {
            return Err(Error::invalid("semantic map does not match image dimensions"));
        }
    }
    let pixels = upsample_mask(&mask, h, w)?;
    let image = mix_images(a.image, b.image, &pixels)?;
    let rho_a = semantic_proportion(&pixels, s_a)?;
    let rho_b = semantic_proportion(&pixels.complement(), s_b)?;
    finish(image, &a, &b, num_classes, rho_a, rho_b, MixerKind::Seppmix, Some(mask), None)
}

/// Draws a patch mask and mixes with semantic-proportion labels.
pub fn seppmix(
    a: Source<'_>,
    b: Source<'_>,
    s_a: &SemanticMap,
    s_b: &SemanticMap,
    grid_n: usize,
    num_classes: usize,
    rng: &mut SeededRng,
) -> Result<MixedSample> {
    let mask = sample_patch_mask(grid_n, rng)?;
    seppmix_with_mask(a, b, s_a, s_b, mask, num_classes)
}

/// Patch mixing with area-proportional labels and an explicit mask.
pub fn patchmix_with_mask(
    a: Source<'_>,
    b: Source<'_>,
    mask: PatchGridMask,
    num_classes: usize,
) -> Result<MixedSample> {
    check_pair(&a, &b)?;
    let (h, w) = (a.image.height(), a.image.width());
    let pixels = upsample_mask(&mask, h, w)?;
    let image = mix_images(a.image, b.image, &pixels)?;
    let rho_a = pixels.count_ones() as f64 / (h * w) as f64;
    finish(image, &a, &b, num_classes, rho_a, 1.0 - rho_a, MixerKind::Patchmix, Some(mask), None)
}

pub fn patchmix(
    a: Source<'_>,
    b: Source<'_>,
    grid_n: usize,
    num_classes: usize,
    rng: &mut SeededRng,
) -> Result<MixedSample> {
    let mask = sample_patch_mask(grid_n, rng)?;
    patchmix_with_mask(a, b, mask, num_classes)
}

/// Convex combination `lambda·x_a + (1 − lambda)·x_b` with matching labels.
pub fn mixup(a: Source<'_>, b: Source<'_>, lambda: f64, num_classes: usize) -> Result<MixedSample> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("mixup lambda {lambda} outside [0, 1]")));
    }
    check_pair(&a, &b)?;
    let data = a
        .image
        .data()
        .iter()
        .zip(b.image.data())
        .map(|(xa, xb)| (lambda * xa + (1.0 - lambda) * xb).clamp(0.0, 1.0))
        .collect();
    let image = Image::from_raw(a.image.height(), a.image.width(), data);
    finish(image, &a, &b, num_classes, lambda, 1.0 - lambda, MixerKind::Mixup, None, None)
}

/// `lambda ~ Beta(alpha, alpha)`.
pub fn sample_beta_lambda(alpha: f64, rng: &mut SeededRng) -> Result<f64> {
    let beta = Beta::new(alpha, alpha).map_err(|e| Error::invalid(format!("Beta({alpha}): {e}")))?;
    Ok(beta.sample(rng))
}

/// Draws the CutMix box: side fractions `√(1 − lambda)`, uniform centre,
/// clipped to the image.
pub fn sample_cut_box(height: usize, width: usize, alpha: f64, rng: &mut SeededRng) -> Result<CutBox> {
    let lambda = sample_beta_lambda(alpha, rng)?;
    let ratio = (1.0 - lambda).sqrt();
    let cut_h = (height as f64 * ratio).floor() as i64;
    let cut_w = (width as f64 * ratio).floor() as i64;
    let cy = rng.below(height) as i64;
    let cx = rng.below(width) as i64;
    let clip = |v: i64, hi: usize| v.clamp(0, hi as i64) as usize;
    Ok(CutBox {
        top: clip(cy - cut_h / 2, height),
        bottom: clip(cy + cut_h / 2, height),
        left: clip(cx - cut_w / 2, width),
        right: clip(cx + cut_w / 2, width),
    })
}

/// Pastes `cut_box` from `x_b` into `x_a`; labels follow the post-clip area.
pub fn cutmix_with_box(a: Source<'_>, b: Source<'_>, cut_box: CutBox, num_classes: usize) -> Result<MixedSample> {
    check_pair(&a, &b)?;
    let (h, w) = (a.image.height(), a.image.width());
    if cut_box.bottom > h || cut_box.right > w {
        return Err(Error::invalid("cut box exceeds image bounds"));
    }
    let cells = (0..h * w).map(|k| !cut_box.contains(k / w, k % w)).collect();
    let pixels = PixelMask::new(h, w, cells)?;
    let image = mix_images(a.image, b.image, &pixels)?;
    let rho_a = 1.0 - cut_box.area() as f64 / (h * w) as f64;
    finish(image, &a, &b, num_classes, rho_a, 1.0 - rho_a, MixerKind::Cutmix, None, Some(cut_box))
}

pub fn cutmix(a: Source<'_>, b: Source<'_>, num_classes: usize, rng: &mut SeededRng) -> Result<MixedSample> {
    check_pair(&a, &b)?;
    let cut_box = sample_cut_box(a.image.height(), a.image.width(), DEFAULT_BETA_ALPHA, rng)?;
    cutmix_with_box(a, b, cut_box, num_classes)
}

//! Datasets: image-folder ingestion with a split manifest, a synthetic
//! generator for desk-scale runs, and the base/novel class split.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use ::image::imageops::FilterType;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetRole {
    Base,
    Novel,
    Unsplit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// Index into [`LabeledDataset::classes`].
    pub class_id: usize,
    /// Stable identifier, unique within the dataset it was loaded from.
    pub instance: u64,
    /// Relative file path for folder datasets.
    pub source: Option<String>,
}

/// Images grouped under an ordered class list.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub role: DatasetRole,
    classes: Vec<String>,
    samples: Vec<Sample>,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, role: DatasetRole, classes: Vec<String>, samples: Vec<Sample>) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.class_id >= classes.len()) {
            return Err(Error::invalid(format!("sample {} has class {} out of range", s.instance, s.class_id)));
        }
        let mut ids = HashSet::with_capacity(samples.len());
        if let Some(dup) = samples.iter().find(|s| !ids.insert(s.instance)) {
            return Err(Error::invalid(format!("duplicate instance id {}", dup.instance)));
        }
        Ok(Self {
            name: name.into(),
            role,
            classes,
            samples,
        })
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices per class, in dataset order.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes.len()];
        for (i, s) in self.samples.iter().enumerate() {
            out[s.class_id].push(i);
        }
        out
    }

    /// Common `(height, width)` of all images.
    pub fn image_size(&self) -> Result<(usize, usize)> {
        let first = self.samples.first().ok_or_else(|| Error::invalid("dataset is empty"))?;
        let size = (first.image.height(), first.image.width());
        if self.samples.iter().any(|s| (s.image.height(), s.image.width()) != size) {
            return Err(Error::invalid("dataset images differ in size"));
        }
        Ok(size)
    }
}

/// Class lists of the train/val/test splits of an image-folder dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub name: String,
    pub image_size: usize,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 {
            return Err(Error::Ingestion("manifest image_size must be positive".into()));
        }
        let splits = [("train", &self.train), ("val", &self.val), ("test", &self.test)];
        for (name, list) in splits {
            if list.is_empty() {
                return Err(Error::Ingestion(format!("manifest split `{name}` is empty")));
            }
            let unique: HashSet<_> = list.iter().collect();
            if unique.len() != list.len() {
                return Err(Error::Ingestion(format!("manifest split `{name}` repeats a class")));
            }
        }
        for (i, (na, a)) in splits.iter().enumerate() {
            for (nb, b) in &splits[i + 1..] {
                if let Some(c) = a.iter().find(|c| b.contains(c)) {
                    return Err(Error::Ingestion(format!("class `{c}` appears in both `{na}` and `{nb}`")));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Ingestion(format!("unknown split `{other}`"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Ingestion(format!("cannot read manifest {}: {e}", path.display())))?;
        let manifest: SplitManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Ingestion(format!("invalid manifest {}: {e}", path.display())))?;
        manifest.validate()?;
        Ok(manifest)
    }
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

/// Loads `root/<class>/<image>` for every class of `split`.
///
/// Images are converted to RGB, resized (bilinear) to the manifest size and
/// scaled to `[0, 1]`. Classes follow manifest order, files sort by name.
pub fn load_image_folder(root: &Path, manifest: &SplitManifest, split: &str) -> Result<LabeledDataset> {
    manifest.validate()?;
    let classes = manifest.split(split)?.to_vec();
    let size = manifest.image_size as u32;
    let mut samples = Vec::new();
    for (class_id, class) in classes.iter().enumerate() {
        let dir = root.join(class);
        if !dir.is_dir() {
            return Err(Error::Ingestion(format!("class directory `{class}` not found under {}", root.display())));
        }
        let mut files: Vec<_> = fs::read_dir(&dir)
            .map_err(|e| Error::Ingestion(format!("cannot list {}: {e}", dir.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && is_image_file(p))
            .collect();
        files.sort();
        for path in files {
            let decoded = ::image::open(&path)
                .map_err(|e| Error::Ingestion(format!("cannot decode {}: {e}", path.display())))?
                .to_rgb8();
            let rgb = if decoded.dimensions() == (size, size) {
                decoded
            } else {
                ::image::imageops::resize(&decoded, size, size, FilterType::Triangle)
            };
            let rel = path.strip_prefix(root).unwrap_or(&path).to_string_lossy().into_owned();
            samples.push(Sample {
                image: Image::from_rgb8(&rgb),
                class_id,
                instance: samples.len() as u64,
                source: Some(rel),
            });
        }
    }
    let role = match split {
        "train" => DatasetRole::Base,
        "test" => DatasetRole::Novel,
        _ => DatasetRole::Unsplit,
    };
    LabeledDataset::new(format!("{}:{split}", manifest.name), role, classes, samples)
}

/// Writes a dataset as `root/<class>/<nnnn>.png` files.
pub fn save_image_folder(dataset: &LabeledDataset, root: &Path) -> Result<()> {
    let by_class = dataset.indices_by_class();
    for (class_id, idx) in by_class.iter().enumerate() {
        let dir = root.join(&dataset.classes()[class_id]);
        fs::create_dir_all(&dir)?;
        for (k, &i) in idx.iter().enumerate() {
            let path = dir.join(format!("{k:04}.png"));
            dataset.samples()[i]
                .image
                .to_rgb8()
                .save(&path)
                .map_err(|e| Error::Ingestion(format!("cannot write {}: {e}", path.display())))?;
        }
    }
    Ok(())
}

const BLOB_POSITIONS: [(f64, f64); 9] = [
    (0.25, 0.25),
    (0.25, 0.5),
    (0.25, 0.75),
    (0.5, 0.25),
    (0.5, 0.5),
    (0.5, 0.75),
    (0.75, 0.25),
    (0.75, 0.5),
    (0.75, 0.75),
];

const BLOB_COLORS: [[f64; 3]; 8] = [
    [0.90, 0.15, 0.15],
    [0.15, 0.80, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.85, 0.10],
    [0.85, 0.20, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10],
    [0.55, 0.30, 0.10],
];

const TEXTURE_FREQUENCIES: [f64; 4] = [1.0, 2.0, 3.5, 5.0];

/// The attribute triple that defines a synthetic class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticClass {
    pub position: (f64, f64),
    pub color: [f64; 3],
    pub frequency: f64,
}

/// Maximum number of distinct synthetic classes.
pub const MAX_SYNTHETIC_CLASSES: usize = BLOB_POSITIONS.len() * BLOB_COLORS.len() * TEXTURE_FREQUENCIES.len();

/// Distinct class definitions drawn without replacement from all triples.
pub fn synthetic_classes(num_classes: usize, rng: &mut SeededRng) -> Result<Vec<SyntheticClass>> {
    if num_classes > MAX_SYNTHETIC_CLASSES {
        return Err(Error::invalid(format!("at most {MAX_SYNTHETIC_CLASSES} synthetic classes")));
    }
    let mut all: Vec<SyntheticClass> = Vec::with_capacity(MAX_SYNTHETIC_CLASSES);
    for &position in &BLOB_POSITIONS {
        for &color in &BLOB_COLORS {
            for &frequency in &TEXTURE_FREQUENCIES {
                all.push(SyntheticClass { position, color, frequency });
            }
        }
    }
    crate::nettrain::shuffle(&mut all, rng);
    all.truncate(num_classes);
    Ok(all)
}

/// Renders one image: a soft coloured disc on a sinusoidal grey texture, with
/// jittered position, size and phase plus Gaussian pixel noise.
pub fn render_synthetic(class: &SyntheticClass, size: usize, rng: &mut SeededRng) -> Image {
    let s = size as f64;
    let jitter = |rng: &mut SeededRng, amp: f64| (rng.unit() * 2.0 - 1.0) * amp;
    let cy = class.position.0 * s + jitter(rng, s * 0.08);
    let cx = class.position.1 * s + jitter(rng, s * 0.08);
    let radius = s * 0.17 * (1.0 + jitter(rng, 0.15));
    let phase = rng.unit() * std::f64::consts::TAU;
    let tint: Vec<f64> = class.color.iter().map(|c| c + jitter(rng, 0.05)).collect();
    let noise = Normal::new(0.0, 0.04).expect("valid std");
    let mut eps = vec![0.0; 3 * size * size];
    eps.iter_mut().for_each(|e| *e = noise.sample(rng));
    Image::from_fn(size, size, |c, i, j| {
        let (y, x) = (i as f64 + 0.5, j as f64 + 0.5);
        let wave = (std::f64::consts::TAU * class.frequency * (x + 0.5 * y) / s + phase).sin();
        let background = 0.4 + 0.15 * wave;
        let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
        let cover = ((radius - d) / 1.5 + 0.5).clamp(0.0, 1.0);
        let v = cover * tint[c] + (1.0 - cover) * background;
        v + eps[(c * size + i) * size + j]
    })
}

/// Deterministic synthetic dataset of `num_classes × per_class` images.
pub fn make_synthetic(num_classes: usize, per_class: usize, image_size: usize, seed: u64) -> Result<LabeledDataset> {
    if num_classes < 2 || per_class < 2 {
        return Err(Error::invalid("synthetic datasets need at least 2 classes and 2 images per class"));
    }
    if image_size < 4 {
        return Err(Error::invalid("synthetic image size must be at least 4"));
    }
    let mut rng = SeededRng::new(seed);
    let defs = synthetic_classes(num_classes, &mut rng)?;
    let classes = (0..num_classes).map(|c| format!("class_{c:03}")).collect();
    let mut samples = Vec::with_capacity(num_classes * per_class);
    for (class_id, def) in defs.iter().enumerate() {
        for k in 0..per_class {
            samples.push(Sample {
                image: render_synthetic(def, image_size, &mut rng),
                class_id,
                instance: (class_id * per_class + k) as u64,
                source: None,
            });
        }
    }
    LabeledDataset::new(format!("synthetic-{seed}"), DatasetRole::Unsplit, classes, samples)
}

/// Partitions classes: the first `round(n·base_fraction)` become the base set.
pub fn split_base_novel(dataset: &LabeledDataset, base_fraction: f64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(0.0..=1.0).contains(&base_fraction) {
        return Err(Error::invalid("base_fraction must be in [0, 1]"));
    }
    let n = dataset.num_classes();
    let n_base = (n as f64 * base_fraction).round() as usize;
    if n_base < 2 || n - n_base < 2 {
        return Err(Error::invalid(format!(
            "splitting {n} classes at {base_fraction} leaves fewer than 2 classes on one side"
        )));
    }
    let part = |range: std::ops::Range<usize>, role: DatasetRole, tag: &str| {
        let offset = range.start;
        let classes = dataset.classes()[range.clone()].to_vec();
        let samples = dataset
            .samples()
            .iter()
            .filter(|s| range.contains(&s.class_id))
            .map(|s| Sample {
                class_id: s.class_id - offset,
                ..s.clone()
            })
            .collect();
        LabeledDataset::new(format!("{}:{tag}", dataset.name), role, classes, samples)
    };
    Ok((
        part(0..n_base, DatasetRole::Base, "base")?,
        part(n_base..n, DatasetRole::Novel, "novel")?,
    ))
}

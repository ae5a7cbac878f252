//! Losses, bootstrap pretraining and the mixed training loop.
//!
//! A training step shuffles the base set, pairs every batch item with a
//! partner drawn by in-batch permutation, mixes the pair with the configured
//! mixer, expands each mixed image into its rotations and descends
//! `alpha·L_m + beta·L_r` by momentum SGD.
//!
//! `L_m` averages the soft-label cross-entropy over a sample's rotations (or
//! sums it, see [`LmReduction`]); `L_r` averages the 4-way rotation
//! cross-entropy over rotations. Both are averaged over batch items.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cam::{compute_cam, normalize_to_semantic_map, SemanticMap};
use crate::datakit::LabeledDataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mixkit::{
    mixup, patchmix, sample_beta_lambda, seppmix, LabelDistribution, MixedSample, MixerKind, Source,
};
use crate::nn::{Architecture, Model, ROTATION_CLASSES};
use crate::rng::SeededRng;
use crate::rotation::{rotate, RotationAngle};

/// Views per parallel work unit. Fixed so gradient sums do not depend on the
/// number of worker threads.
const VIEWS_PER_CHUNK: usize = 8;

/// Coefficients of `alpha·L_m + beta·L_r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 0.5 }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha.is_finite() && beta.is_finite() && alpha >= 0.0 && beta >= 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and ≥ 0, got α={alpha} β={beta}")));
        }
        Ok(Self { alpha, beta })
    }
}

/// Where the semantic maps for `seppmix` come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamRefresh {
    /// The model being trained, re-read every batch.
    Batch,
    /// A snapshot of the model taken at the start of each epoch.
    Epoch,
    /// The pretrained model, never updated.
    Frozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationMode {
    /// Every sample is seen at 0°, 90°, 180° and 270°.
    All,
    /// One random rotation per sample and step.
    Sampled,
    /// Upright only, no rotation loss.
    Off,
}

/// Reduction of the classification loss over a sample's rotations.
///
/// `Sum` quadruples the classification gradient when all four rotations are
/// used; with the small layer-normalised network at lr 0.05 that collapses
/// training within an epoch, so `Mean` is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmReduction {
    Sum,
    Mean,
}

/// Optimiser, schedule and mixing settings for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epochs (0-based) at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub batch_size: usize,
    pub grid_n: usize,
    pub seed: u64,
    pub cam_refresh: CamRefresh,
    pub rotations: RotationMode,
    pub mixer: MixerKind,
    pub alpha: f64,
    pub beta: f64,
    pub pretrain_epochs: usize,
    /// Probability that a batch is mixed at all.
    pub mix_probability: f64,
    /// Beta concentration for mixup and cutmix.
    pub mix_alpha: f64,
    /// How `L_m` combines a sample's rotations (default mean).
    pub lm_rotation_reduction: LmReduction,
    pub freeze_head: bool,
    /// Dropout on the embedding during training.
    pub dropout: f64,
    pub hflip: bool,
    pub channels: Vec<usize>,
    /// Start mixed training from the pretrained weights when they are given.
    pub init_from_pretrained: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 65,
            milestones: vec![30, 45, 60],
            lr_decay: 0.1,
            batch_size: 64,
            grid_n: 2,
            seed: 0,
            cam_refresh: CamRefresh::Batch,
            rotations: RotationMode::All,
            mixer: MixerKind::Seppmix,
            alpha: 1.0,
            beta: 0.5,
            pretrain_epochs: 5,
            mix_probability: 1.0,
            mix_alpha: 1.0,
            lm_rotation_reduction: LmReduction::Mean,
            freeze_head: false,
            dropout: 0.0,
            hflip: true,
            channels: vec![16, 32, 64, 64],
            init_from_pretrained: true,
        }
    }
}

impl TrainConfig {
    /// Default settings over `epochs` epochs, with the 30/45/60-of-65
    /// milestones rescaled proportionally.
    pub fn desk_scale(epochs: usize) -> Self {
        let mut milestones: Vec<usize> = [30.0, 45.0, 60.0]
            .iter()
            .map(|m: &f64| (m / 65.0 * epochs as f64).round() as usize)
            .filter(|m| *m > 0 && *m < epochs)
            .collect();
        milestones.dedup();
        Self {
            epochs,
            milestones,
            ..Self::default()
        }
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.alpha, self.beta)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be ≥ 0".into());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must be in (0, 1]".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("milestones {:?} must be strictly increasing", self.milestones));
        }
        if self.milestones.iter().any(|m| *m >= self.epochs) {
            return bad(format!("milestones {:?} must be below epochs = {}", self.milestones, self.epochs));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.grid_n == 0 {
            return bad("grid_n must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.mix_probability) {
            return bad("mix_probability must be in [0, 1]".into());
        }
        if !(self.mix_alpha.is_finite() && self.mix_alpha > 0.0) {
            return bad("mix_alpha must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)".into());
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channels must be a non-empty list of positive counts".into());
        }
        self.loss_weights()?;
        Ok(())
    }

    /// Learning rate in effect during 0-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.milestones.iter().filter(|m| **m <= epoch).count();
        self.lr * self.lr_decay.powi(decays as i32)
    }

    /// The configuration used by the CAM bootstrap stage: no mixing, no
    /// rotations, `pretrain_epochs` epochs.
    pub fn pretrain_stage(&self) -> Self {
        Self {
            epochs: self.pretrain_epochs,
            milestones: self.milestones.iter().copied().filter(|m| *m < self.pretrain_epochs).collect(),
            mixer: MixerKind::None,
            rotations: RotationMode::Off,
            alpha: 1.0,
            freeze_head: false,
            ..self.clone()
        }
    }

    fn rotation_set(&self) -> &'static [RotationAngle] {
        match self.rotations {
            RotationMode::All => &RotationAngle::ALL,
            RotationMode::Sampled | RotationMode::Off => &RotationAngle::ALL[..1],
        }
    }
}

/// Numerically stable `log softmax`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// `Σ_k target_k · (−log softmax(logits)_k)`.
pub fn soft_cross_entropy(logits: &[f64], target: &LabelDistribution) -> Result<f64> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numerical("non-finite logits".into()));
    }
    if logits.len() != target.num_classes() {
        return Err(Error::invalid(format!(
            "{} logits for a {}-class target",
            logits.len(),
            target.num_classes()
        )));
    }
    Ok(log_softmax(logits)
        .iter()
        .zip(target.weights())
        .map(|(lp, t)| -t * lp)
        .sum())
}

/// Soft cross-entropy and its gradient `mass·softmax − target`.
fn soft_ce_grad(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let lp = log_softmax(logits);
    let mass: f64 = target.iter().sum();
    let loss = lp.iter().zip(target).map(|(l, t)| -t * l).sum();
    let grad = lp.iter().zip(target).map(|(l, t)| mass * l.exp() - t).collect();
    (loss, grad)
}

fn hard_ce_grad(logits: &[f64], class: usize) -> (f64, Vec<f64>) {
    let lp = log_softmax(logits);
    let loss = -lp[class];
    let grad = lp
        .iter()
        .enumerate()
        .map(|(k, l)| l.exp() - if k == class { 1.0 } else { 0.0 })
        .collect();
    (loss, grad)
}

/// `alpha·l_m + beta·l_r`.
pub fn total_loss(l_m: f64, l_r: f64, w: LossWeights) -> f64 {
    w.alpha * l_m + w.beta * l_r
}

/// Classification loss of mixed samples seen at `rotations`, averaged over
/// samples and summed (or averaged) over rotations.
pub fn mixed_classification_loss(
    model: &Model,
    batch: &[MixedSample],
    rotations: &[RotationAngle],
    reduction: LmReduction,
) -> Result<f64> {
    if batch.is_empty() || rotations.is_empty() {
        return Err(Error::invalid("mixed classification loss needs a non-empty batch"));
    }
    let mut total = 0.0;
    for sample in batch {
        for &r in rotations {
            let logits = model.class_logits(&rotate(&sample.image, r))?;
            total += soft_cross_entropy(&logits, &sample.label)?;
        }
    }
    let per_rotation = match reduction {
        LmReduction::Sum => 1.0,
        LmReduction::Mean => 1.0 / rotations.len() as f64,
    };
    Ok(total * per_rotation / batch.len() as f64)
}

/// Rotation-prediction loss averaged over rotations and samples.
pub fn rotation_loss(model: &Model, batch: &[MixedSample], rotations: &[RotationAngle]) -> Result<f64> {
    if batch.is_empty() || rotations.is_empty() {
        return Err(Error::invalid("rotation loss needs a non-empty batch"));
    }
    let mut total = 0.0;
    for sample in batch {
        for &r in rotations {
            let emb = model.forward_image(&rotate(&sample.image, r))?.embedding;
            let logits = model.rot_head.forward(&emb);
            if logits.iter().any(|z| !z.is_finite()) {
                return Err(Error::Numerical("non-finite rotation logits".into()));
            }
            total += -log_softmax(&logits)[r.target_id()];
        }
    }
    Ok(total / (rotations.len() * batch.len()) as f64)
}

/// One rotated view of a training sample.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub image: Image,
    pub label: LabelDistribution,
    pub rotation: RotationAngle,
    /// Dropout multipliers on the embedding, if dropout is active.
    pub dropout_mask: Option<Vec<f64>>,
}

/// Loss terms of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub l_m: f64,
    pub l_r: f64,
    pub l_base: f64,
    /// Upright views whose arg-max matches the dominant label class.
    pub correct: usize,
    pub upright: usize,
}

/// How the per-view losses are reduced into `L_m` and `L_r`.
#[derive(Debug, Clone, Copy)]
pub struct BatchReduction {
    pub items: usize,
    pub rotations_per_item: usize,
    pub lm: LmReduction,
    pub rotation_loss: bool,
    pub weights: LossWeights,
}

#[derive(Default)]
struct Partial {
    l_m: f64,
    l_r: f64,
    correct: usize,
    upright: usize,
}

/// Loss and parameter gradient of a batch of views.
///
/// Views are processed in fixed-size chunks in parallel and the partial sums
/// are combined in order, so the result is identical for any thread count.
pub fn batch_loss_and_grad(model: &Model, views: &[TrainView], red: BatchReduction) -> Result<(LossParts, Model)> {
    if views.is_empty() || red.items == 0 {
        return Err(Error::invalid("empty training batch"));
    }
    let lm_scale = match red.lm {
        LmReduction::Sum => 1.0,
        LmReduction::Mean => 1.0 / red.rotations_per_item as f64,
    } / red.items as f64;
    let lr_scale = 1.0 / (red.rotations_per_item * red.items) as f64;
    let cm = red.weights.alpha * lm_scale;
    let cr = red.weights.beta * lr_scale;

    let partials: Vec<Result<(Model, Partial)>> = views
        .par_chunks(VIEWS_PER_CHUNK)
        .map(|chunk| {
            let mut grads = model.zeros_like();
            let mut part = Partial::default();
            for view in chunk {
                let trace = model.forward_image(&view.image)?;
                let emb: Vec<f64> = match &view.dropout_mask {
                    Some(m) => trace.embedding.iter().zip(m).map(|(e, k)| e * k).collect(),
                    None => trace.embedding.clone(),
                };
                let logits = model.head.forward(&emb);
                if logits.iter().any(|z| !z.is_finite()) {
                    return Err(Error::Numerical("non-finite class logits".into()));
                }
                let (ce, mut d_logits) = soft_ce_grad(&logits, view.label.weights());
                part.l_m += lm_scale * ce;
                d_logits.iter_mut().for_each(|d| *d *= cm);
                let mut d_emb = model.head.backward(&emb, &d_logits, &mut grads.head);
                if view.rotation == RotationAngle::R0 {
                    part.upright += 1;
                    if argmax(&logits) == view.label.dominant_class() {
                        part.correct += 1;
                    }
                }
                if red.rotation_loss {
                    let rot_logits = model.rot_head.forward(&emb);
                    let (rce, mut d_rot) = hard_ce_grad(&rot_logits, view.rotation.target_id());
                    part.l_r += lr_scale * rce;
                    d_rot.iter_mut().for_each(|d| *d *= cr);
                    let d_emb_r = model.rot_head.backward(&emb, &d_rot, &mut grads.rot_head);
                    d_emb.iter_mut().zip(d_emb_r).for_each(|(a, b)| *a += b);
                }
                if let Some(m) = &view.dropout_mask {
                    d_emb.iter_mut().zip(m).for_each(|(d, k)| *d *= k);
                }
                model.net.backward(&trace, &d_emb, &mut grads.net);
            }
            Ok((grads, part))
        })
        .collect();

    let mut grads = model.zeros_like();
    let mut parts = LossParts::default();
    for p in partials {
        let (g, part) = p?;
        grads.add_assign(&g);
        parts.l_m += part.l_m;
        parts.l_r += part.l_r;
        parts.correct += part.correct;
        parts.upright += part.upright;
    }
    parts.l_base = total_loss(parts.l_m, parts.l_r, red.weights);
    if !parts.l_base.is_finite() {
        return Err(Error::Numerical(format!("loss became {}", parts.l_base)));
    }
    Ok((parts, grads))
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = k;
        }
    }
    best
}

/// Momentum SGD with coupled weight decay: `v ← μv + g + λp`, `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Model,
}

impl Sgd {
    pub fn new(model: &Model, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: model.zeros_like(),
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Model, lr: f64, freeze_head: bool) {
        let skip_from = if freeze_head {
            // head.weight and head.bias sit just before the rotation head.
            Some(model.tensors().len() - 4)
        } else {
            None
        };
        let grad_tensors = grads.tensors();
        for (t, (param, vel)) in model
            .tensors_mut()
            .into_iter()
            .zip(self.velocity.tensors_mut())
            .enumerate()
        {
            if skip_from.is_some_and(|s| t == s || t == s + 1) {
                continue;
            }
            let g = grad_tensors[t].1;
            for k in 0..param.len() {
                vel[k] = self.momentum * vel[k] + g[k] + self.weight_decay * param[k];
                param[k] -= lr * vel[k];
            }
        }
    }
}

/// Per-epoch training metrics, written as one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_m")]
    pub l_m: f64,
    #[serde(rename = "L_r")]
    pub l_r: f64,
    #[serde(rename = "L_base")]
    pub l_base: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    /// Loss of the untrained model on the first batch, before any update.
    pub initial_loss: f64,
}

/// Semantic map of `image` for its ground-truth `class_id` under `model`.
pub fn semantic_map_for(model: &Model, image: &Image, class_id: usize) -> Result<SemanticMap> {
    let (features, _) = model.features(image)?;
    let raw = compute_cam(&features, &model.head.classifier_weights(), class_id, image.height(), image.width())?;
    normalize_to_semantic_map(&raw)
}

fn check_dataset(dataset: &LabeledDataset, config: &TrainConfig) -> Result<(usize, usize)> {
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let (h, w) = dataset.image_size()?;
    if config.rotations != RotationMode::Off && h != w {
        return Err(Error::Config(format!("rotation training needs square images, got {h}×{w}")));
    }
    if config.mixer != MixerKind::None && (h < config.grid_n || w < config.grid_n) {
        return Err(Error::Config("images are smaller than the patch grid".into()));
    }
    Ok((h, w))
}

/// Plain supervised training used to bootstrap the CAMs.
pub fn pretrain_for_cams(dataset: &LabeledDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let stage = config.pretrain_stage();
    if stage.epochs == 0 {
        return Err(Error::Config("pretrain_epochs must be at least 1".into()));
    }
    run_training(dataset, &stage, None, &mut |_| {})
}

/// Mixed training with the rotation auxiliary loss.
///
/// `pretrained` is the CAM source (required for `seppmix`) and, when
/// `init_from_pretrained` is set, the starting point.
pub fn train(dataset: &LabeledDataset, config: &TrainConfig, pretrained: Option<&Model>) -> Result<TrainOutcome> {
    train_with_observer(dataset, config, pretrained, &mut |_| {})
}

pub fn train_with_observer(
    dataset: &LabeledDataset,
    config: &TrainConfig,
    pretrained: Option<&Model>,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    if config.mixer == MixerKind::Seppmix && pretrained.is_none() {
        return Err(Error::Config("mixer seppmix needs a pretrained model as CAM source".into()));
    }
    run_training(dataset, config, pretrained, on_epoch)
}

fn run_training(
    dataset: &LabeledDataset,
    config: &TrainConfig,
    pretrained: Option<&Model>,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(dataset, config)?;
    let num_classes = dataset.num_classes();
    let arch = Architecture {
        in_channels: crate::image::CHANNELS,
        channels: config.channels.clone(),
        num_classes,
    };
    let weights = config.loss_weights()?;
    let mut rng = SeededRng::new(config.seed);
    let fresh = Model::init(&arch, &mut rng.fork())?;
    if let Some(p) = pretrained {
        if p.arch != arch {
            return Err(Error::Config(format!(
                "pretrained architecture {:?} does not match {:?}",
                p.arch, arch
            )));
        }
    }
    let mut model = match pretrained {
        Some(p) if config.init_from_pretrained => p.clone(),
        _ => fresh,
    };
    let mut sgd = Sgd::new(&model, config.momentum, config.weight_decay);
    let rotation_loss_on = config.rotations != RotationMode::Off;
    let rotations_per_item = match config.rotations {
        RotationMode::All => 4,
        _ => 1,
    };
    let mut metrics = Vec::with_capacity(config.epochs);
    let mut initial_loss = f64::NAN;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let snapshot = match config.cam_refresh {
            CamRefresh::Epoch if config.mixer == MixerKind::Seppmix => Some(model.clone()),
            _ => None,
        };
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        shuffle(&mut order, &mut rng);
        let (mut sum_m, mut sum_r, mut sum_b) = (0.0, 0.0, 0.0);
        let (mut correct, mut upright, mut seen) = (0usize, 0usize, 0usize);

        for batch_idx in order.chunks(config.batch_size) {
            let cam_model = match config.cam_refresh {
                CamRefresh::Batch => &model,
                CamRefresh::Epoch => snapshot.as_ref().unwrap_or(&model),
                CamRefresh::Frozen => pretrained.unwrap_or(&model),
            };
            let mixed = prepare_batch(dataset, batch_idx, config, cam_model, num_classes, &mut rng)?;
            let views = expand_views(&mixed, config, arch.embedding_dim(), &mut rng);
            let red = BatchReduction {
                items: mixed.len(),
                rotations_per_item,
                lm: config.lm_rotation_reduction,
                rotation_loss: rotation_loss_on,
                weights,
            };
            let (parts, grads) = batch_loss_and_grad(&model, &views, red)?;
            if initial_loss.is_nan() {
                initial_loss = parts.l_base;
            }
            sgd.step(&mut model, &grads, lr, config.freeze_head);
            if model.tensors().iter().any(|(_, t)| t.iter().any(|v| !v.is_finite())) {
                return Err(Error::Numerical(format!("non-finite parameters after a step in epoch {epoch}")));
            }
            let n = mixed.len() as f64;
            sum_m += parts.l_m * n;
            sum_r += parts.l_r * n;
            sum_b += parts.l_base * n;
            correct += parts.correct;
            upright += parts.upright;
            seen += mixed.len();
        }
        let m = EpochMetrics {
            epoch,
            lr,
            l_m: sum_m / seen as f64,
            l_r: sum_r / seen as f64,
            l_base: sum_b / seen as f64,
            train_accuracy: correct as f64 / upright.max(1) as f64,
        };
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(TrainOutcome {
        model,
        metrics,
        initial_loss,
    })
}

/// Fisher–Yates shuffle driven by the seeded stream.
pub fn shuffle<T>(items: &mut [T], rng: &mut SeededRng) {
    for i in (1..items.len()).rev() {
        let j = rng.below(i + 1);
        items.swap(i, j);
    }
}

/// Augments, pairs and mixes one batch.
fn prepare_batch(
    dataset: &LabeledDataset,
    batch_idx: &[usize],
    config: &TrainConfig,
    cam_model: &Model,
    num_classes: usize,
    rng: &mut SeededRng,
) -> Result<Vec<MixedSample>> {
    let samples = dataset.samples();
    let images: Vec<Image> = batch_idx
        .iter()
        .map(|&i| {
            let img = &samples[i].image;
            if config.hflip && rng.coin() {
                img.flip_horizontal()
            } else {
                img.clone()
            }
        })
        .collect();
    let source = |k: usize| Source::new(&images[k], samples[batch_idx[k]].class_id, samples[batch_idx[k]].instance);

    let mix = config.mixer != MixerKind::None && rng.unit() < config.mix_probability;
    if !mix {
        return (0..images.len()).map(|k| MixedSample::plain(source(k), num_classes)).collect();
    }
    let mut partner: Vec<usize> = (0..images.len()).collect();
    shuffle(&mut partner, rng);

    let maps: Vec<SemanticMap> = if config.mixer == MixerKind::Seppmix {
        (0..images.len())
            .into_par_iter()
            .map(|k| semantic_map_for(cam_model, &images[k], samples[batch_idx[k]].class_id))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    (0..images.len())
        .map(|k| {
            let (a, b) = (source(k), source(partner[k]));
            match config.mixer {
                MixerKind::None => MixedSample::plain(a, num_classes),
                MixerKind::Mixup => {
                    let lambda = sample_beta_lambda(config.mix_alpha, rng)?;
                    mixup(a, b, lambda, num_classes)
                }
                MixerKind::Cutmix => {
                    let cut = crate::mixkit::sample_cut_box(a.image.height(), a.image.width(), config.mix_alpha, rng)?;
                    crate::mixkit::cutmix_with_box(a, b, cut, num_classes)
                }
                MixerKind::Patchmix => patchmix(a, b, config.grid_n, num_classes, rng),
                MixerKind::Seppmix => seppmix(a, b, &maps[k], &maps[partner[k]], config.grid_n, num_classes, rng),
            }
        })
        .collect()
}

/// Rotated views of the mixed batch, with dropout masks when enabled.
fn expand_views(mixed: &[MixedSample], config: &TrainConfig, dim: usize, rng: &mut SeededRng) -> Vec<TrainView> {
    let mut views = Vec::with_capacity(mixed.len() * 4);
    for sample in mixed {
        let rotations: Vec<RotationAngle> = match config.rotations {
            RotationMode::Sampled => vec![RotationAngle::ALL[rng.below(ROTATION_CLASSES)]],
            _ => config.rotation_set().to_vec(),
        };
        for r in rotations {
            let dropout_mask = (config.dropout > 0.0).then(|| {
                let keep = 1.0 / (1.0 - config.dropout);
                (0..dim)
                    .map(|_| if rng.unit() < config.dropout { 0.0 } else { keep })
                    .collect()
            });
            views.push(TrainView {
                image: rotate(&sample.image, r),
                label: sample.label.clone(),
                rotation: r,
                dropout_mask,
            });
        }
    }
    views
}

/// Builds the views for every rotation of every sample, without dropout.
pub fn views_for(batch: &[MixedSample], rotations: &[RotationAngle]) -> Vec<TrainView> {
    batch
        .iter()
        .flat_map(|s| {
            rotations.iter().map(move |&r| TrainView {
                image: rotate(&s.image, r),
                label: s.label.clone(),
                rotation: r,
                dropout_mask: None,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixkit::{combine_labels, one_hot};

    // Independent log-sum-exp oracle.
    fn ce_oracle(logits: &[f64], target: &[f64]) -> f64 {
        let m = logits.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        target.iter().zip(logits).map(|(t, z)| t * (lse - z)).sum()
    }

    #[test]
    fn uniform_logits_give_mass_times_log_c() {
        for c in [2usize, 3, 7] {
            let target = combine_labels(&one_hot(0, c).unwrap(), &one_hot(1, c).unwrap(), 0.3, 0.45).unwrap();
            let loss = soft_cross_entropy(&vec![0.25; c], &target).unwrap();
            assert!((loss - 0.75 * (c as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn saturated_logits_give_tiny_loss() {
        let loss = soft_cross_entropy(&[50.0, 0.0, 0.0], &one_hot(0, 3).unwrap()).unwrap();
        assert!(loss < 1e-6);
    }

    #[test]
    fn three_class_value_matches_oracle() {
        let target = LabelDistribution::new(vec![0.75, 0.25, 0.0]).unwrap();
        let logits = [1.0, 0.5, -0.5];
        let loss = soft_cross_entropy(&logits, &target).unwrap();
        assert!((loss - ce_oracle(&logits, &[0.75, 0.25, 0.0])).abs() < 1e-9);
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        assert!(matches!(
            soft_cross_entropy(&[f64::NAN, 0.0], &one_hot(0, 2).unwrap()),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(2.0, 1.0, w), 2.5);
        assert_eq!(total_loss(3.7, 9.1, LossWeights::new(1.0, 0.0).unwrap()), 3.7);
        assert_eq!(total_loss(0.0, 0.0, LossWeights::new(4.0, 2.0).unwrap()), 0.0);
        assert!(LossWeights::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn lr_schedule_follows_milestones() {
        let cfg = TrainConfig::default();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        assert!(close(cfg.lr_at(0), 0.05));
        assert!(close(cfg.lr_at(29), 0.05));
        assert!(close(cfg.lr_at(30), 0.005));
        assert!(close(cfg.lr_at(44), 0.005));
        assert!(close(cfg.lr_at(45), 0.0005));
        assert!(close(cfg.lr_at(59), 0.0005));
        assert!(close(cfg.lr_at(60), 0.00005));
        assert!(close(cfg.lr_at(64), 0.00005));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { milestones: vec![5, 3], ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { epochs: 10, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::desk_scale(10).validate().is_ok());
        assert_eq!(TrainConfig::desk_scale(10).milestones, vec![5, 7, 9]);
        assert!(TrainConfig::desk_scale(1).milestones.is_empty());
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<TrainConfig>(r#"{"lr": 0.1, "learning_rate": 0.2}"#);
        assert!(err.is_err());
        let ok: TrainConfig = serde_json::from_str(r#"{"lr": 0.1, "mixer": "cutmix"}"#).unwrap();
        assert_eq!(ok.mixer, MixerKind::Cutmix);
        assert_eq!(ok.batch_size, 64);
    }

    #[test]
    fn sgd_matches_hand_update() {
        let arch = Architecture { in_channels: 3, channels: vec![1], num_classes: 2 };
        let mut model = Model::zeros(&arch);
        model.head.bias = vec![1.0, -1.0];
        let mut grads = model.zeros_like();
        grads.head.bias = vec![0.5, 0.5];
        let mut sgd = Sgd::new(&model, 0.9, 0.1);
        sgd.step(&mut model, &grads, 0.1, false);
        // v = 0.5 + 0.1·1 = 0.6, p = 1 − 0.06
        assert!((model.head.bias[0] - 0.94).abs() < 1e-15);
        sgd.step(&mut model, &grads, 0.1, false);
        let v2 = 0.9 * 0.6 + 0.5 + 0.1 * 0.94;
        assert!((model.head.bias[0] - (0.94 - 0.1 * v2)).abs() < 1e-15);

        let before = model.head.bias.clone();
        sgd.step(&mut model, &grads, 0.1, true);
        assert_eq!(model.head.bias, before);
    }
}

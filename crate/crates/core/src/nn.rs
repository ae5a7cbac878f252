//! Convolutional backbone, linear heads and their hand-written gradients.
//!
//! Each block is `conv3×3 (pad 1, no bias) → layer norm → ReLU → 2×2 max-pool`.
//! Layer norm normalises over the whole `C × H × W` activation of one image
//! and applies a per-channel affine, so an image's forward and backward pass
//! never depend on the rest of the batch. The embedding is the global average
//! of the last block's feature maps.
//!
//! Everything is `f64` so the analytic gradients can be checked against
//! central differences.

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::cam::{ClassifierWeights, FeatureStack};
use crate::error::{Error, Result};
use crate::image::{Image, CHANNELS};
use crate::rng::SeededRng;

/// Number of rotation classes predicted by the rotation head.
pub const ROTATION_CLASSES: usize = 4;

const NORM_EPS: f64 = 1e-5;

/// Shape of a [`Model`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    pub num_classes: usize,
}

impl Architecture {
    /// The 4-block 16-32-64-64 reference backbone.
    pub fn desk_scale(num_classes: usize) -> Self {
        Self {
            in_channels: CHANNELS,
            channels: vec![16, 32, 64, 64],
            num_classes,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        *self.channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::Config("architecture needs non-empty, positive channel counts".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("architecture needs at least one class".into()));
        }
        Ok(())
    }

    /// Spatial size of the last feature stack for an `h × w` input.
    pub fn feature_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (mut h, mut w) = (h, w);
        for _ in &self.channels {
            if h < 2 || w < 2 {
                return Err(Error::invalid("input too small for the number of pooling stages"));
            }
            h /= 2;
            w /= 2;
        }
        Ok((h, w))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `out × in × 3 × 3`.
    pub weight: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl ConvBlock {
    fn kernel_len(&self) -> usize {
        self.in_channels * 9
    }

    fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            weight: vec![0.0; out_channels * in_channels * 9],
            gamma: vec![0.0; out_channels],
            beta: vec![0.0; out_channels],
        }
    }
}

/// Intermediate values of one block kept for the backward pass.
#[derive(Debug, Clone)]
struct BlockCache {
    height: usize,
    width: usize,
    cols: Vec<f64>,
    xhat: Vec<f64>,
    active: Vec<bool>,
    inv_std: f64,
    argmax: Vec<usize>,
}

/// The convolutional embedding network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingNetwork {
    pub blocks: Vec<ConvBlock>,
}

/// Activations of one forward pass, sufficient to backpropagate.
#[derive(Debug, Clone)]
pub struct BackboneTrace {
    caches: Vec<BlockCache>,
    feat_channels: usize,
    feat_height: usize,
    feat_width: usize,
    features: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl BackboneTrace {
    pub fn feature_stack(&self) -> FeatureStack {
        FeatureStack::new(self.feat_channels, self.feat_height, self.feat_width, self.features.clone())
            .expect("finite features")
    }
}

fn im2col(input: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut cols = vec![0.0; channels * 9 * hw];
    for c in 0..channels {
        let plane = &input[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[(c * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            dst[x] = src[sx as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], channels: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; channels * hw];
    for c in 0..channels {
        let plane = &mut out[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[(c * 9 + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let sy = sy as usize;
                    for x in 0..w {
                        let sx = x as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            plane[sy * w + sx as usize] += row[y * w + x];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `c[m×n] = beta·c + a[m×k]·b[k×n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` is an exclusive borrow laid out row-major with stride `n`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl EmbeddingNetwork {
    pub fn embedding_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.out_channels)
    }

    /// Runs the network on a channel-major `h × w` input, keeping caches.
    pub fn forward(&self, input: &[f64], h: usize, w: usize) -> Result<BackboneTrace> {
        let in_c = self.blocks.first().map_or(0, |b| b.in_channels);
        if input.len() != in_c * h * w {
            return Err(Error::invalid(format!(
                "input has {} values, expected {in_c}×{h}×{w}",
                input.len()
            )));
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut x = input.to_vec();
        let (mut h, mut w) = (h, w);
        for block in &self.blocks {
            if h < 2 || w < 2 {
                return Err(Error::invalid("input too small for the number of pooling stages"));
            }
            let hw = h * w;
            let cols = im2col(&x, block.in_channels, h, w);
            let mut z = vec![0.0; block.out_channels * hw];
            gemm(
                block.out_channels,
                block.kernel_len(),
                hw,
                &block.weight,
                (block.kernel_len(), 1),
                &cols,
                (hw, 1),
                0.0,
                &mut z,
            );
            let n = z.len() as f64;
            let mean = z.iter().sum::<f64>() / n;
            let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv_std = 1.0 / (var + NORM_EPS).sqrt();
            let xhat: Vec<f64> = z.iter().map(|v| (v - mean) * inv_std).collect();
            let mut act = vec![0.0; xhat.len()];
            let mut active = vec![false; xhat.len()];
            for c in 0..block.out_channels {
                let (g, b) = (block.gamma[c], block.beta[c]);
                for p in c * hw..(c + 1) * hw {
                    let y = g * xhat[p] + b;
                    if y > 0.0 {
                        act[p] = y;
                        active[p] = true;
                    }
                }
            }
            let (oh, ow) = (h / 2, w / 2);
            let mut pooled = vec![0.0; block.out_channels * oh * ow];
            let mut argmax = vec![0usize; pooled.len()];
            for c in 0..block.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let base = c * hw + 2 * oy * w + 2 * ox;
                        let mut best = base;
                        for cand in [base + 1, base + w, base + w + 1] {
                            if act[cand] > act[best] {
                                best = cand;
                            }
                        }
                        let o = (c * oh + oy) * ow + ox;
                        pooled[o] = act[best];
                        argmax[o] = best;
                    }
                }
            }
            caches.push(BlockCache {
                height: h,
                width: w,
                cols,
                xhat,
                active,
                inv_std,
                argmax,
            });
            x = pooled;
            h = oh;
            w = ow;
        }
        let c = self.embedding_dim();
        let plane = h * w;
        let embedding = (0..c)
            .map(|l| x[l * plane..(l + 1) * plane].iter().sum::<f64>() / plane as f64)
            .collect::<Vec<_>>();
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite embedding".into()));
        }
        Ok(BackboneTrace {
            caches,
            feat_channels: c,
            feat_height: h,
            feat_width: w,
            features: x,
            embedding,
        })
    }

    /// Accumulates parameter gradients for `d_embedding` into `grads`.
    pub fn backward(&self, trace: &BackboneTrace, d_embedding: &[f64], grads: &mut EmbeddingNetwork) {
        let plane = trace.feat_height * trace.feat_width;
        let mut d_out: Vec<f64> = d_embedding
            .iter()
            .flat_map(|d| std::iter::repeat_n(d / plane as f64, plane))
            .collect();
        for (idx, block) in self.blocks.iter().enumerate().rev() {
            let cache = &trace.caches[idx];
            let grad = &mut grads.blocks[idx];
            let hw = cache.height * cache.width;
            let mut dy = vec![0.0; block.out_channels * hw];
            for (o, &src) in cache.argmax.iter().enumerate() {
                if cache.active[src] {
                    dy[src] += d_out[o];
                }
            }
            let n = dy.len() as f64;
            let mut dxhat = vec![0.0; dy.len()];
            for c in 0..block.out_channels {
                let g = block.gamma[c];
                let (mut dg, mut db) = (0.0, 0.0);
                for p in c * hw..(c + 1) * hw {
                    dg += dy[p] * cache.xhat[p];
                    db += dy[p];
                    dxhat[p] = dy[p] * g;
                }
                grad.gamma[c] += dg;
                grad.beta[c] += db;
            }
            let sum1: f64 = dxhat.iter().sum();
            let sum2: f64 = dxhat.iter().zip(&cache.xhat).map(|(a, b)| a * b).sum();
            let dz: Vec<f64> = dxhat
                .iter()
                .zip(&cache.xhat)
                .map(|(d, xh)| cache.inv_std * (d - sum1 / n - xh * sum2 / n))
                .collect();
            let k = block.kernel_len();
            gemm(block.out_channels, hw, k, &dz, (hw, 1), &cache.cols, (1, hw), 1.0, &mut grad.weight);
            if idx > 0 {
                let mut dcols = vec![0.0; k * hw];
                gemm(k, block.out_channels, hw, &block.weight, (1, k), &dz, (hw, 1), 0.0, &mut dcols);
                d_out = col2im(&dcols, block.in_channels, cache.height, cache.width);
            }
        }
    }
}

/// Fully connected layer `logits = W·x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearHead {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `out_dim × in_dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// The base-class classifier whose rows feed the CAMs.
pub type ClassificationHead = LinearHead;
/// The 4-way rotation classifier.
pub type RotationHead = LinearHead;

impl LinearHead {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates gradients into `grads` and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], d_logits: &[f64], grads: &mut LinearHead) -> Vec<f64> {
        let mut dx = vec![0.0; self.in_dim];
        for (o, &d) in d_logits.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grads.bias[o] += d;
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grads.weight[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += d * x[i];
                dx[i] += d * row[i];
            }
        }
        dx
    }

    pub fn classifier_weights(&self) -> ClassifierWeights {
        ClassifierWeights::new(self.out_dim, self.in_dim, self.weight.clone()).expect("finite head weights")
    }
}

/// Backbone plus classification and rotation heads.
///
/// The same type doubles as a gradient accumulator (see [`Model::zeros_like`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub arch: Architecture,
    pub net: EmbeddingNetwork,
    pub head: ClassificationHead,
    pub rot_head: RotationHead,
}

impl Model {
    /// He-normal conv weights, unit gain, zero shifts, uniform head weights.
    pub fn init(arch: &Architecture, rng: &mut SeededRng) -> Result<Self> {
        arch.validate()?;
        let mut model = Self::zeros(arch);
        for block in &mut model.net.blocks {
            let std = (2.0 / block.kernel_len() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            block.weight.iter_mut().for_each(|w| *w = normal.sample(rng));
            block.gamma.iter_mut().for_each(|g| *g = 1.0);
        }
        let d = arch.embedding_dim();
        let bound = 1.0 / (d as f64).sqrt();
        let uniform = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        model.head.weight.iter_mut().for_each(|w| *w = uniform.sample(rng));
        model.rot_head.weight.iter_mut().for_each(|w| *w = uniform.sample(rng));
        Ok(model)
    }

    /// All parameters zero.
    pub fn zeros(arch: &Architecture) -> Self {
        let mut blocks = Vec::with_capacity(arch.channels.len());
        let mut in_c = arch.in_channels;
        for &out_c in &arch.channels {
            blocks.push(ConvBlock::zeros(in_c, out_c));
            in_c = out_c;
        }
        let d = arch.embedding_dim();
        Self {
            arch: arch.clone(),
            net: EmbeddingNetwork { blocks },
            head: LinearHead::zeros(d, arch.num_classes),
            rot_head: LinearHead::zeros(d, ROTATION_CLASSES),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.arch)
    }

    /// Named parameter tensors in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (b, block) in self.net.blocks.iter().enumerate() {
            out.push((format!("block{b}.conv.weight"), &block.weight));
            out.push((format!("block{b}.norm.gamma"), &block.gamma));
            out.push((format!("block{b}.norm.beta"), &block.beta));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out.push(("rot_head.weight".into(), &self.rot_head.weight));
        out.push(("rot_head.bias".into(), &self.rot_head.bias));
        out
    }

    /// Mutable parameter tensors, same order as [`Model::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for block in &mut self.net.blocks {
            out.push(&mut block.weight);
            out.push(&mut block.gamma);
            out.push(&mut block.beta);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out.push(&mut self.rot_head.weight);
        out.push(&mut self.rot_head.bias);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Model) {
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn forward_image(&self, image: &Image) -> Result<BackboneTrace> {
        self.net.forward(image.data(), image.height(), image.width())
    }

    /// Feature stack and pooled embedding in inference mode.
    pub fn features(&self, image: &Image) -> Result<(FeatureStack, Vec<f64>)> {
        let trace = self.forward_image(image)?;
        let fs = trace.feature_stack();
        Ok((fs, trace.embedding))
    }

    pub fn class_logits(&self, image: &Image) -> Result<Vec<f64>> {
        Ok(self.head.forward(&self.forward_image(image)?.embedding))
    }
}

//! Independent brute-force oracles shared by the integration tests.
//!
//! Each oracle is written from the definitions, pixel by pixel, without
//! calling the library's kernels.

#![allow(dead_code)]

use seppmix::cam::SemanticMap;
use seppmix::mixkit::{CutBox, MixedSample};
use seppmix::nettrain::{
    batch_loss_and_grad, mixed_classification_loss, rotation_loss, total_loss, views_for, BatchReduction,
    LmReduction, LossWeights,
};
use seppmix::nn::Model;
use seppmix::rotation::RotationAngle;
use seppmix::{Image, SeededRng};

pub fn random_image(h: usize, w: usize, rng: &mut SeededRng) -> Image {
    Image::from_fn(h, w, |_, _, _| rng.unit())
}

pub fn random_cells(n: usize, rng: &mut SeededRng) -> Vec<bool> {
    (0..n).map(|_| rng.coin()).collect()
}

/// Random non-negative unit-mass map.
pub fn random_semantic_map(h: usize, w: usize, rng: &mut SeededRng) -> SemanticMap {
    let raw: Vec<f64> = (0..h * w).map(|_| rng.unit() + 1e-3).collect();
    let total: f64 = raw.iter().sum();
    SemanticMap::new(h, w, raw.iter().map(|v| v / total).collect()).unwrap()
}

/// Pixel `(i, j)` belongs to cell `(r, c)` iff `r·H ≤ i·n < (r+1)·H` (and the
/// same for columns).
pub fn oracle_upsample(cells: &[bool], n: usize, h: usize, w: usize) -> Vec<bool> {
    let mut out = vec![false; h * w];
    for r in 0..n {
        for c in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let in_row = r * h <= i * n && i * n < (r + 1) * h;
                    let in_col = c * w <= j * n && j * n < (c + 1) * w;
                    if in_row && in_col {
                        out[i * w + j] = cells[r * n + c];
                    }
                }
            }
        }
    }
    out
}

pub fn oracle_mix(a: &Image, b: &Image, mask: &[bool]) -> Vec<f64> {
    let (h, w) = (a.height(), a.width());
    let mut out = Vec::new();
    for ch in 0..a.channels() {
        for i in 0..h {
            for j in 0..w {
                out.push(if mask[i * w + j] { a.get(ch, i, j) } else { b.get(ch, i, j) });
            }
        }
    }
    out
}

pub fn oracle_masked_mass(mask: &[bool], s: &SemanticMap, keep: bool) -> f64 {
    let mut total = 0.0;
    for i in 0..s.height() {
        for j in 0..s.width() {
            if mask[i * s.width() + j] == keep {
                total += s.at(i, j);
            }
        }
    }
    total
}

pub fn oracle_mixup(a: &Image, b: &Image, lambda: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for ch in 0..a.channels() {
        for i in 0..a.height() {
            for j in 0..a.width() {
                out.push(lambda * a.get(ch, i, j) + (1.0 - lambda) * b.get(ch, i, j));
            }
        }
    }
    out
}

pub fn oracle_cutmix(a: &Image, b: &Image, cut: CutBox) -> (Vec<f64>, f64) {
    let (h, w) = (a.height(), a.width());
    let mut out = Vec::new();
    let mut pasted = 0usize;
    for ch in 0..a.channels() {
        for i in 0..h {
            for j in 0..w {
                let inside = i >= cut.top && i < cut.bottom && j >= cut.left && j < cut.right;
                if inside && ch == 0 {
                    pasted += 1;
                }
                out.push(if inside { b.get(ch, i, j) } else { a.get(ch, i, j) });
            }
        }
    }
    (out, 1.0 - pasted as f64 / (h * w) as f64)
}

/// Rotation by 90° counter-clockwise, straight from the index map.
pub fn oracle_rot90(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut data = vec![0.0; img.data().len()];
    for ch in 0..img.channels() {
        for i in 0..h {
            for j in 0..w {
                // new shape is w × h; (i, j) lands on (w − 1 − j, i)
                let (ni, nj) = (w - 1 - j, i);
                data[ch * h * w + ni * h + nj] = img.get(ch, i, j);
            }
        }
    }
    Image::new(w, h, data).unwrap()
}

/// Cross-entropy against a soft target by explicit log-sum-exp.
pub fn ce_oracle(logits: &[f64], target: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::MIN, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    target.iter().zip(logits).map(|(t, z)| t * (lse - z)).sum()
}

/// `L_base` through the plain forward-only loss functions.
pub fn forward_loss(model: &Model, batch: &[MixedSample], lm: LmReduction, w: LossWeights) -> f64 {
    let rots = RotationAngle::ALL;
    let l_m = mixed_classification_loss(model, batch, &rots, lm).unwrap();
    let l_r = rotation_loss(model, batch, &rots).unwrap();
    total_loss(l_m, l_r, w)
}

/// Relative error `‖g − ĝ‖ / (‖g‖ + ‖ĝ‖)` per parameter tensor between the
/// analytic gradient and central differences with step `eps`.
pub fn gradient_check(model: &Model, batch: &[MixedSample], lm: LmReduction, w: LossWeights, eps: f64) -> Vec<(String, f64)> {
    let rots = RotationAngle::ALL;
    let red = BatchReduction {
        items: batch.len(),
        rotations_per_item: rots.len(),
        lm,
        rotation_loss: true,
        weights: w,
    };
    let (_, grads) = batch_loss_and_grad(model, &views_for(batch, &rots), red).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|(n, t)| (n, t.to_vec())).collect();
    let mut out = Vec::new();
    for (t_idx, (name, g)) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(g.len());
        for k in 0..g.len() {
            let mut plus = model.clone();
            plus.tensors_mut()[t_idx][k] += eps;
            let mut minus = model.clone();
            minus.tensors_mut()[t_idx][k] -= eps;
            numeric.push((forward_loss(&plus, batch, lm, w) - forward_loss(&minus, batch, lm, w)) / (2.0 * eps));
        }
        let diff: f64 = g.iter().zip(&numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let norm: f64 = g.iter().map(|a| a * a).sum::<f64>().sqrt() + numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
        out.push((name.clone(), if norm == 0.0 { 0.0 } else { diff / norm }));
    }
    out
}

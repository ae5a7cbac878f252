//! Episodic N-way K-shot evaluation with a frozen embedding network.
//!
//! Each episode samples `n_way` novel classes, splits `k_shot + h_query`
//! images per class into support and query, fits a multinomial logistic
//! regression on the support embeddings and scores it on the queries.
//! Episode `e` draws from `SeededRng::new(seed ^ e)`, so reports do not depend
//! on how episodes are spread over worker threads.

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datakit::LabeledDataset;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::Model;
use crate::rng::SeededRng;

/// Probe optimisation stops once the gradient norm falls below this.
pub const PROBE_GRAD_TOL: f64 = 1e-6;
pub const PROBE_MAX_ITERS: usize = 1000;
const LBFGS_HISTORY: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub h_query: usize,
    pub episodes: usize,
    /// Strength of the squared-L2 penalty on probe weights.
    pub l2: f64,
    /// L2-normalise embeddings before fitting the probe.
    pub normalize: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 1,
            h_query: 15,
            episodes: 600,
            l2: 1.0,
            normalize: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_way < 2 || self.k_shot == 0 || self.h_query == 0 || self.episodes == 0 {
            return Err(Error::Config(
                "evaluation needs n_way ≥ 2 and positive k_shot, h_query and episodes".into(),
            ));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(Error::Config("l2 must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeItem {
    /// Index into the dataset's samples.
    pub index: usize,
    pub instance: u64,
    /// Episode-local label in `0..n_way`.
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub h_query: usize,
    /// Dataset class ids, in episode-label order.
    pub classes: Vec<usize>,
    pub support: Vec<EpisodeItem>,
    pub query: Vec<EpisodeItem>,
}

impl Episode {
    /// The episode restricted to the first `k` support items of each class.
    pub fn with_shots(&self, k: usize) -> Result<Episode> {
        if k == 0 || k > self.k_shot {
            return Err(Error::invalid(format!("cannot take {k} shots from a {}-shot episode", self.k_shot)));
        }
        let support = self
            .support
            .chunks(self.k_shot)
            .flat_map(|chunk| chunk[..k].iter().copied())
            .collect();
        Ok(Episode {
            k_shot: k,
            support,
            ..self.clone()
        })
    }
}

/// Samples classes, then query and support images, all without replacement.
pub fn sample_episode(
    dataset: &LabeledDataset,
    n_way: usize,
    k_shot: usize,
    h_query: usize,
    rng: &mut SeededRng,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 || h_query == 0 {
        return Err(Error::invalid("episode sizes must be positive"));
    }
    let by_class = dataset.indices_by_class();
    let eligible: Vec<usize> = (0..by_class.len())
        .filter(|&c| by_class[c].len() >= k_shot + h_query)
        .collect();
    if eligible.len() < n_way {
        return Err(Error::invalid(format!(
            "{n_way}-way episode needs {n_way} classes with ≥ {} images, dataset has {}",
            k_shot + h_query,
            eligible.len()
        )));
    }
    let classes: Vec<usize> = sample_indices(rng, eligible.len(), n_way)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * h_query);
    for (label, &c) in classes.iter().enumerate() {
        // A full permutation of the class: queries first, then support. The
        // draw does not depend on the shot count, so a k-shot episode is the
        // prefix of any larger-shot episode with the same seed.
        let mut pool = by_class[c].clone();
        pool.shuffle(rng);
        let item = |index: usize| EpisodeItem {
            index,
            instance: dataset.samples()[index].instance,
            label,
        };
        query.extend(pool[..h_query].iter().map(|&i| item(i)));
        support.extend(pool[h_query..h_query + k_shot].iter().map(|&i| item(i)));
    }
    Ok(Episode {
        n_way,
        k_shot,
        h_query,
        classes,
        support,
        query,
    })
}

fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Pooled embeddings of `images`, optionally L2-normalised.
pub fn extract_embeddings(model: &Model, images: &[&Image], normalize: bool) -> Result<Vec<Vec<f64>>> {
    images
        .par_iter()
        .map(|img| {
            let mut e = model.forward_image(img)?.embedding;
            if normalize {
                l2_normalize(&mut e);
            }
            Ok(e)
        })
        .collect()
}

/// Multinomial logistic regression over episode classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub n_way: usize,
    pub dim: usize,
    /// `n_way × dim`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub l2: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Set when every support embedding was identical.
    pub degenerate: bool,
}

impl LinearProbe {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_way)
            .map(|k| {
                self.bias[k]
                    + self.weight[k * self.dim..(k + 1) * self.dim]
                        .iter()
                        .zip(x)
                        .map(|(w, v)| w * v)
                        .sum::<f64>()
            })
            .collect()
    }

    /// Arg-max class, ties to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        crate::nettrain::argmax(&self.logits(x))
    }
}

/// Mean cross-entropy plus `l2·‖W‖²` and its gradient, for packed `θ = [W; b]`.
fn probe_objective(theta: &[f64], xs: &[Vec<f64>], ys: &[usize], n_way: usize, dim: usize, l2: f64) -> (f64, Vec<f64>) {
    let (w, b) = theta.split_at(n_way * dim);
    let mut grad = vec![0.0; theta.len()];
    let mut loss = 0.0;
    let inv_n = 1.0 / xs.len() as f64;
    let mut logits = vec![0.0; n_way];
    for (x, &y) in xs.iter().zip(ys) {
        for k in 0..n_way {
            logits[k] = b[k] + w[k * dim..(k + 1) * dim].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + z.ln();
        loss += (lse - logits[y]) * inv_n;
        for k in 0..n_way {
            let d = ((logits[k] - lse).exp() - if k == y { 1.0 } else { 0.0 }) * inv_n;
            grad[n_way * dim + k] += d;
            for (g, v) in grad[k * dim..(k + 1) * dim].iter_mut().zip(x) {
                *g += d * v;
            }
        }
    }
    for (g, wv) in grad[..n_way * dim].iter_mut().zip(w) {
        *g += 2.0 * l2 * wv;
    }
    loss += l2 * w.iter().map(|v| v * v).sum::<f64>();
    (loss, grad)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fits the probe by L-BFGS from a zero start.
pub fn fit_linear_probe(embeddings: &[Vec<f64>], labels: &[usize], n_way: usize, l2: f64) -> Result<LinearProbe> {
    if embeddings.is_empty() || embeddings.len() != labels.len() {
        return Err(Error::invalid("probe needs one label per support embedding"));
    }
    if !(l2.is_finite() && l2 >= 0.0) {
        return Err(Error::invalid("l2 strength must be finite and ≥ 0"));
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim || e.iter().any(|v| !v.is_finite())) {
        return Err(Error::invalid("support embeddings must share a length and be finite"));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= n_way) {
        return Err(Error::invalid(format!("label {bad} out of range for {n_way}-way probe")));
    }
    for k in 0..n_way {
        if !labels.contains(&k) {
            return Err(Error::invalid(format!("no support example for class {k}")));
        }
    }
    let degenerate = embeddings.iter().all(|e| e == &embeddings[0]);

    let f = |t: &[f64]| probe_objective(t, embeddings, labels, n_way, dim, l2);
    let mut theta = vec![0.0; n_way * dim + n_way];
    let (mut loss, mut grad) = f(&theta);
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut iterations = 0;
    let mut converged = dot(&grad, &grad).sqrt() < PROBE_GRAD_TOL;

    while !converged && iterations < PROBE_MAX_ITERS {
        // Two-loop recursion for the search direction.
        let mut q = grad.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let rho = 1.0 / dot(y, s);
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push((rho, a));
        }
        let gamma = match (s_hist.last(), y_hist.last()) {
            (Some(s), Some(y)) => dot(s, y) / dot(y, y),
            _ => 1.0 / dot(&grad, &grad).sqrt().max(1.0),
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y), (rho, a)) in s_hist.iter().zip(&y_hist).zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&grad, &dir);
        if slope >= 0.0 {
            dir = grad.iter().map(|g| -g).collect();
            slope = -dot(&grad, &grad);
            s_hist.clear();
            y_hist.clear();
        }

        // Backtracking line search with the Armijo condition.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let cand: Vec<f64> = theta.iter().zip(&dir).map(|(t, d)| t + step * d).collect();
            let (c_loss, c_grad) = f(&cand);
            if c_loss <= loss + 1e-4 * step * slope {
                accepted = Some((cand, c_loss, c_grad));
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        let Some((cand, c_loss, c_grad)) = accepted else {
            break;
        };
        let s: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = c_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-12 {
            if s_hist.len() == LBFGS_HISTORY {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        let improvement = loss - c_loss;
        theta = cand;
        loss = c_loss;
        grad = c_grad;
        converged = dot(&grad, &grad).sqrt() < PROBE_GRAD_TOL;
        if improvement.abs() < f64::EPSILON * loss.abs().max(1.0) && !converged {
            break;
        }
    }

    let bias = theta.split_off(n_way * dim);
    Ok(LinearProbe {
        n_way,
        dim,
        weight: theta,
        bias,
        l2,
        iterations,
        converged,
        degenerate,
    })
}

/// Fraction of queries whose arg-max prediction matches the label.
pub fn evaluate_episode(probe: &LinearProbe, queries: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if queries.is_empty() || queries.len() != labels.len() {
        return Err(Error::invalid("episode evaluation needs one label per query"));
    }
    if labels.iter().any(|&y| y >= probe.n_way) {
        return Err(Error::invalid("query label outside the probe's classes"));
    }
    let correct = queries
        .iter()
        .zip(labels)
        .filter(|(q, &y)| probe.predict(q) == y)
        .count();
    Ok(correct as f64 / queries.len() as f64)
}

/// Mean and normal-approximation 95% half-width `1.96·σ/√n`, with `σ` the
/// sample standard deviation.
pub fn mean_and_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 || values.iter().all(|v| *v == values[0]) {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_way: usize,
    pub k_shot: usize,
    pub h_query: usize,
    pub episodes: usize,
    pub mean_accuracy: f64,
    pub ci95_halfwidth: f64,
    pub seed: u64,
    pub checkpoint_id: Option<String>,
    pub degenerate_episodes: usize,
    pub per_episode_accuracy: Vec<f64>,
}

impl EvalReport {
    /// Aggregates per-episode accuracies into a report.
    pub fn from_accuracies(cfg: &EvalConfig, k_shot: usize, seed: u64, accs: Vec<f64>, degenerate: usize) -> Self {
        let (mean, hw) = mean_and_ci95(&accs);
        Self {
            n_way: cfg.n_way,
            k_shot,
            h_query: cfg.h_query,
            episodes: accs.len(),
            mean_accuracy: mean,
            ci95_halfwidth: hw,
            seed,
            checkpoint_id: None,
            degenerate_episodes: degenerate,
            per_episode_accuracy: accs,
        }
    }

    /// Percent with two decimals, e.g. `66.98±0.81`.
    pub fn cell(&self) -> String {
        format!("{:.2}±{:.2}", 100.0 * self.mean_accuracy, 100.0 * self.ci95_halfwidth)
    }

    /// The human-readable summary line, e.g. `acc 66.98 ± 0.81`.
    pub fn summary_line(&self) -> String {
        format!("acc {:.2} ± {:.2}", 100.0 * self.mean_accuracy, 100.0 * self.ci95_halfwidth)
    }
}

/// Evaluates precomputed per-sample embeddings at several shot counts over
/// the same episodes: each episode is drawn at the largest shot count and the
/// smaller ones use a prefix of its support set.
pub fn evaluate_embeddings(
    dataset: &LabeledDataset,
    embeddings: &[Vec<f64>],
    cfg: &EvalConfig,
    shots: &[usize],
    seed: u64,
) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    if embeddings.len() != dataset.len() {
        return Err(Error::invalid("need one embedding per dataset sample"));
    }
    let max_shot = shots.iter().copied().max().ok_or_else(|| Error::invalid("no shot counts given"))?;
    let per_episode: Vec<Vec<(f64, bool)>> = (0..cfg.episodes)
        .into_par_iter()
        .map(|e| {
            let mut rng = SeededRng::new(seed ^ e as u64);
            let full = sample_episode(dataset, cfg.n_way, max_shot, cfg.h_query, &mut rng)?;
            let q_x: Vec<Vec<f64>> = full.query.iter().map(|i| embeddings[i.index].clone()).collect();
            let q_y: Vec<usize> = full.query.iter().map(|i| i.label).collect();
            shots
                .iter()
                .map(|&k| {
                    let ep = full.with_shots(k)?;
                    let s_x: Vec<Vec<f64>> = ep.support.iter().map(|i| embeddings[i.index].clone()).collect();
                    let s_y: Vec<usize> = ep.support.iter().map(|i| i.label).collect();
                    let probe = fit_linear_probe(&s_x, &s_y, cfg.n_way, cfg.l2)?;
                    Ok((evaluate_episode(&probe, &q_x, &q_y)?, probe.degenerate))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(shots
        .iter()
        .enumerate()
        .map(|(s, &k)| {
            let accs: Vec<f64> = per_episode.iter().map(|r| r[s].0).collect();
            let degenerate = per_episode.iter().filter(|r| r[s].1).count();
            EvalReport::from_accuracies(cfg, k, seed, accs, degenerate)
        })
        .collect())
}

/// Embeds every sample of `dataset` with the frozen network.
pub fn embed_dataset(model: &Model, dataset: &LabeledDataset, normalize: bool) -> Result<Vec<Vec<f64>>> {
    let images: Vec<&Image> = dataset.samples().iter().map(|s| &s.image).collect();
    extract_embeddings(model, &images, normalize)
}

/// Runs `cfg.episodes` episodes at `cfg.k_shot` shots.
pub fn evaluate(model: &Model, dataset: &LabeledDataset, cfg: &EvalConfig, seed: u64) -> Result<EvalReport> {
    cfg.validate()?;
    let embeddings = embed_dataset(model, dataset, cfg.normalize)?;
    let mut reports = evaluate_embeddings(dataset, &embeddings, cfg, &[cfg.k_shot], seed)?;
    Ok(reports.remove(0))
}

/// Runs the same episodes at every shot count in `shots`.
pub fn evaluate_shots(
    model: &Model,
    dataset: &LabeledDataset,
    cfg: &EvalConfig,
    shots: &[usize],
    seed: u64,
) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    let embeddings = embed_dataset(model, dataset, cfg.normalize)?;
    evaluate_embeddings(dataset, &embeddings, cfg, shots, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datakit::make_synthetic;
    use std::collections::HashSet;

    #[test]
    fn smaller_shot_episodes_are_prefixes() {
        let ds = make_synthetic(6, 20, 8, 0).unwrap();
        let one = sample_episode(&ds, 5, 1, 15, &mut SeededRng::new(3)).unwrap();
        let five = sample_episode(&ds, 5, 5, 15, &mut SeededRng::new(3)).unwrap();
        assert_eq!(five.with_shots(1).unwrap(), one);
    }

    #[test]
    fn episode_counts_and_disjointness() {
        let ds = make_synthetic(6, 20, 8, 0).unwrap();
        let ep = sample_episode(&ds, 5, 1, 15, &mut SeededRng::new(3)).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 75);
        let s: HashSet<u64> = ep.support.iter().map(|i| i.instance).collect();
        assert!(ep.query.iter().all(|q| !s.contains(&q.instance)));
        assert_eq!(ep, sample_episode(&ds, 5, 1, 15, &mut SeededRng::new(3)).unwrap());
    }

    #[test]
    fn episode_needs_enough_classes() {
        let ds = make_synthetic(4, 20, 8, 0).unwrap();
        assert!(sample_episode(&ds, 5, 1, 15, &mut SeededRng::new(0)).is_err());
        let small = make_synthetic(6, 10, 8, 0).unwrap();
        assert!(sample_episode(&small, 5, 1, 15, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn separable_two_class_probe_fits_support() {
        let xs = vec![vec![1.0, 0.2], vec![0.9, -0.1], vec![-1.0, 0.1], vec![-0.8, -0.3]];
        let ys = vec![0, 0, 1, 1];
        let probe = fit_linear_probe(&xs, &ys, 2, 1.0).unwrap();
        assert_eq!(evaluate_episode(&probe, &xs, &ys).unwrap(), 1.0);
        assert!(probe.converged);
    }

    #[test]
    fn heavy_penalty_shrinks_weights() {
        let xs = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let probe = fit_linear_probe(&xs, &[0, 1], 2, 1e6).unwrap();
        assert!(probe.weight.iter().all(|w| w.abs() < 1e-3));
    }

    #[test]
    fn orthogonal_one_shot_support_classifies_itself() {
        let xs: Vec<Vec<f64>> = (0..5).map(|k| (0..5).map(|j| f64::from(u8::from(j == k))).collect()).collect();
        let ys: Vec<usize> = (0..5).collect();
        let probe = fit_linear_probe(&xs, &ys, 5, 1.0).unwrap();
        for k in 0..5 {
            assert_eq!(probe.predict(&xs[k]), k);
        }
    }

    #[test]
    fn degenerate_support_is_flagged() {
        let xs = vec![vec![0.5, 0.5]; 4];
        let probe = fit_linear_probe(&xs, &[0, 1, 0, 1], 2, 1.0).unwrap();
        assert!(probe.degenerate);
        // Identical logits tie; the lowest index wins.
        assert_eq!(probe.predict(&[0.5, 0.5]), 0);
    }

    #[test]
    fn probe_is_deterministic() {
        let xs = vec![vec![0.3, -0.2, 0.9], vec![0.1, 0.4, -0.5], vec![-0.7, 0.2, 0.1]];
        let a = fit_linear_probe(&xs, &[0, 1, 2], 3, 0.5).unwrap();
        let b = fit_linear_probe(&xs, &[0, 1, 2], 3, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_queries_are_rejected() {
        let probe = fit_linear_probe(&[vec![1.0], vec![-1.0]], &[0, 1], 2, 1.0).unwrap();
        assert!(evaluate_episode(&probe, &[], &[]).is_err());
        assert_eq!(evaluate_episode(&probe, &[vec![2.0], vec![3.0]], &[0, 0]).unwrap(), 1.0);
    }

    #[test]
    fn ci_examples() {
        let (m, hw) = mean_and_ci95(&[0.6; 10]);
        assert!((m - 0.6).abs() < 1e-15);
        assert_eq!(hw, 0.0);
        let (m, hw) = mean_and_ci95(&[0.8, 0.6, 0.7, 0.9, 0.5]);
        // deviations ±0.1, ±0.2, 0 → sample variance 0.1/4
        let expected = 1.96 * (0.1f64 / 4.0).sqrt() / 5f64.sqrt();
        assert!((m - 0.7).abs() < 1e-12);
        assert!((hw - expected).abs() < 1e-12);
    }

    #[test]
    fn report_formatting() {
        let cfg = EvalConfig::default();
        let mut r = EvalReport::from_accuracies(&cfg, 1, 0, vec![0.5], 0);
        r.mean_accuracy = 0.669_8;
        r.ci95_halfwidth = 0.008_1;
        assert_eq!(r.cell(), "66.98±0.81");
        assert_eq!(r.summary_line(), "acc 66.98 ± 0.81");
        assert_eq!(cfg.episodes, 600);
    }
}

mod common;

use common::*;
use seppmix::datakit::{make_synthetic, split_base_novel, LabeledDataset};
use seppmix::fewshot::{evaluate_embeddings, fit_linear_probe, EvalConfig};
use seppmix::mixkit::{seppmix, MixedSample, MixerKind, Source};
use seppmix::nettrain::{
    mixed_classification_loss, pretrain_for_cams, rotation_loss, train, LmReduction, RotationMode, TrainConfig,
};
use seppmix::nn::{Architecture, Model};
use seppmix::rotation::{rotate, RotationAngle};
use seppmix::{Image, SeededRng};

/// Loop-level forward pass: 3×3 same-padded conv, layer norm over the whole
/// block output, per-channel affine, ReLU, 2×2 max-pool, global average.
fn scalar_embedding(model: &Model, img: &Image) -> Vec<f64> {
    let (mut h, mut w) = (img.height(), img.width());
    let mut x: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|c| (0..h).map(|i| (0..w).map(|j| img.get(c, i, j)).collect()).collect())
        .collect();
    for b in &model.net.blocks {
        let (cin, cout) = (b.in_channels, b.out_channels);
        let mut z = vec![vec![vec![0.0; w]; h]; cout];
        for o in 0..cout {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for c in 0..cin {
                        for di in 0..3 {
                            for dj in 0..3 {
                                let (si, sj) = (i as i64 + di as i64 - 1, j as i64 + dj as i64 - 1);
                                if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < w {
                                    acc += b.weight[((o * cin + c) * 3 + di) * 3 + dj] * x[c][si as usize][sj as usize];
                                }
                            }
                        }
                    }
                    z[o][i][j] = acc;
                }
            }
        }
        let all: Vec<f64> = z.iter().flatten().flatten().copied().collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
        let sd = (var + 1e-5).sqrt();
        let (oh, ow) = (h / 2, w / 2);
        let mut pooled = vec![vec![vec![0.0; ow]; oh]; cout];
        for o in 0..cout {
            let act = |i: usize, j: usize| (b.gamma[o] * (z[o][i][j] - mean) / sd + b.beta[o]).max(0.0);
            for i in 0..oh {
                for j in 0..ow {
                    pooled[o][i][j] = act(2 * i, 2 * j).max(act(2 * i, 2 * j + 1)).max(act(2 * i + 1, 2 * j)).max(act(2 * i + 1, 2 * j + 1));
                }
            }
        }
        x = pooled;
        h = oh;
        w = ow;
    }
    x.iter().map(|m| m.iter().flatten().sum::<f64>() / (h * w) as f64).collect()
}

fn linear(weight: &[f64], bias: &[f64], x: &[f64]) -> Vec<f64> {
    bias.iter()
        .enumerate()
        .map(|(o, b)| b + (0..x.len()).map(|k| weight[o * x.len() + k] * x[k]).sum::<f64>())
        .collect()
}

fn two_image_batch(rng: &mut SeededRng) -> (Model, Vec<MixedSample>) {
    let arch = Architecture { in_channels: 3, channels: vec![3, 2], num_classes: 2 };
    let model = Model::init(&arch, rng).unwrap();
    let (xa, xb) = (random_image(4, 4, rng), random_image(4, 4, rng));
    let (sa, sb) = (random_semantic_map(4, 4, rng), random_semantic_map(4, 4, rng));
    let batch = vec![
        seppmix(Source::new(&xa, 0, 0), Source::new(&xb, 1, 1), &sa, &sb, 2, 2, rng).unwrap(),
        seppmix(Source::new(&xb, 1, 1), Source::new(&xa, 0, 0), &sb, &sa, 2, 2, rng).unwrap(),
    ];
    (model, batch)
}

#[test]
fn losses_match_a_scalar_forward_pass() {
    let mut rng = SeededRng::new(21);
    let (model, batch) = two_image_batch(&mut rng);
    let rots = RotationAngle::ALL;
    let (mut lm, mut lr) = (0.0, 0.0);
    for s in &batch {
        for r in rots {
            let emb = scalar_embedding(&model, &rotate(&s.image, r));
            lm += ce_oracle(&linear(&model.head.weight, &model.head.bias, &emb), s.label.weights());
            let mut hard = [0.0; 4];
            hard[r.target_id()] = 1.0;
            lr += ce_oracle(&linear(&model.rot_head.weight, &model.rot_head.bias, &emb), &hard);
        }
    }
    let n = batch.len() as f64;
    let sum = mixed_classification_loss(&model, &batch, &rots, LmReduction::Sum).unwrap();
    let mean = mixed_classification_loss(&model, &batch, &rots, LmReduction::Mean).unwrap();
    assert!((sum - lm / n).abs() < 1e-6, "{sum} vs {}", lm / n);
    assert!((mean - lm / (4.0 * n)).abs() < 1e-6);
    let r = rotation_loss(&model, &batch, &rots).unwrap();
    assert!((r - lr / (4.0 * n)).abs() < 1e-6, "{r} vs {}", lr / (4.0 * n));
}

#[test]
fn zero_head_gives_closed_form_losses() {
    let mut rng = SeededRng::new(5);
    let (mut model, batch) = two_image_batch(&mut rng);
    model.head.weight.iter_mut().for_each(|v| *v = 0.0);
    model.rot_head.weight.iter_mut().for_each(|v| *v = 0.0);
    let plain: Vec<MixedSample> = batch
        .iter()
        .map(|s| MixedSample::plain(Source::new(&s.image, 0, 0), 2).unwrap())
        .collect();
    let l = mixed_classification_loss(&model, &plain, &RotationAngle::ALL, LmReduction::Sum).unwrap();
    assert!((l - 4.0 * 2f64.ln()).abs() < 1e-12);
    let doubled = [plain[0].clone(), plain[0].clone()];
    let one = mixed_classification_loss(&model, &plain[..1], &RotationAngle::ALL, LmReduction::Sum).unwrap();
    let two = mixed_classification_loss(&model, &doubled, &RotationAngle::ALL, LmReduction::Sum).unwrap();
    assert_eq!(one, two);
    let r = rotation_loss(&model, &batch, &RotationAngle::ALL).unwrap();
    assert!((r - 4f64.ln()).abs() < 1e-12);
}

fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        channels: vec![8, 16],
        batch_size: 16,
        ..TrainConfig::desk_scale(epochs)
    }
}

fn subset(ds: &LabeledDataset, n: usize) -> LabeledDataset {
    LabeledDataset::new("subset", ds.role, ds.classes().to_vec(), ds.samples()[..n].to_vec()).unwrap()
}

#[test]
fn pretraining_overfits_a_small_subset() {
    let ds = make_synthetic(4, 4, 16, 1).unwrap();
    let tiny = subset(&ds, 16);
    let cfg = TrainConfig {
        pretrain_epochs: 200,
        milestones: vec![],
        hflip: false,
        ..small_config(1)
    };
    let out = pretrain_for_cams(&tiny, &cfg).unwrap();
    assert_eq!(out.metrics.last().unwrap().train_accuracy, 1.0);
}

fn dataset_loss(model: &Model, ds: &LabeledDataset) -> f64 {
    let plain: Vec<MixedSample> = ds
        .samples()
        .iter()
        .map(|s| MixedSample::plain(Source::new(&s.image, s.class_id, s.instance), ds.num_classes()).unwrap())
        .collect();
    mixed_classification_loss(model, &plain, &RotationAngle::ALL[..1], LmReduction::Mean).unwrap()
}

#[test]
fn pretraining_is_seeded() {
    let ds = make_synthetic(6, 20, 16, 2).unwrap();
    let cfg = TrainConfig { pretrain_epochs: 2, ..small_config(2) };
    let a = pretrain_for_cams(&ds, &cfg).unwrap();
    let b = pretrain_for_cams(&ds, &cfg).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.model, b.model);
}

/// Full-dataset loss before and after one epoch, default settings on the
/// default synthetic base split.
#[test]
fn one_epoch_reduces_the_loss() {
    let (base, _) = split_base_novel(&make_synthetic(24, 100, 32, 0).unwrap(), 2.0 / 3.0).unwrap();
    let cfg = TrainConfig {
        mixer: MixerKind::None,
        rotations: RotationMode::Off,
        init_from_pretrained: true,
        ..TrainConfig::desk_scale(1)
    };
    let arch = Architecture { in_channels: 3, channels: cfg.channels.clone(), num_classes: base.num_classes() };
    let start = Model::init(&arch, &mut SeededRng::new(9)).unwrap();
    let after = train(&base, &cfg, Some(&start)).unwrap().model;
    let (l0, l1) = (dataset_loss(&start, &base), dataset_loss(&after, &base));
    assert!(l1 < l0, "{l1} vs {l0}");
}

#[test]
fn mixing_free_training_is_pretraining() {
    let ds = make_synthetic(6, 12, 16, 3).unwrap();
    let cfg = TrainConfig {
        mixer: MixerKind::None,
        rotations: RotationMode::Off,
        pretrain_epochs: 3,
        ..small_config(3)
    };
    let pre = pretrain_for_cams(&ds, &cfg).unwrap();
    let tr = train(&ds, &cfg, None).unwrap();
    assert_eq!(pre.model, tr.model);
    assert_eq!(pre.metrics, tr.metrics);
}

#[test]
fn seppmix_needs_a_cam_source_and_logs_every_epoch() {
    let ds = make_synthetic(6, 12, 16, 4).unwrap();
    let cfg = small_config(4);
    assert!(matches!(train(&ds, &cfg, None), Err(seppmix::Error::Config(_))));
    let pre = pretrain_for_cams(&ds, &cfg).unwrap();
    let out = train(&ds, &cfg, Some(&pre.model)).unwrap();
    let lrs: Vec<f64> = out.metrics.iter().map(|m| m.lr).collect();
    assert_eq!(cfg.milestones, vec![2, 3]);
    assert_eq!(lrs, vec![0.05, 0.05, 0.05 * 0.1, 0.05 * 0.1 * 0.1]);
    assert!(out.metrics.iter().all(|m| m.l_r > 0.0 && m.l_base.is_finite()));
}

#[test]
fn default_lr_schedule() {
    let cfg = TrainConfig::default();
    for (epoch, lr) in [(0, 0.05), (29, 0.05), (30, 0.005), (44, 0.005), (45, 0.0005), (59, 0.0005), (60, 0.00005), (64, 0.00005)] {
        assert!((cfg.lr_at(epoch) - lr).abs() < 1e-15, "epoch {epoch}");
    }
    assert_eq!((cfg.epochs, cfg.momentum, cfg.weight_decay, cfg.alpha, cfg.beta, cfg.grid_n), (65, 0.9, 5e-4, 1.0, 0.5, 2));
}

/// Pixel-space multinomial logistic regression on the synthetic generator.
#[test]
fn synthetic_data_is_linearly_separable_in_pixel_space() {
    let ds = make_synthetic(10, 50, 32, 0).unwrap();
    let xs: Vec<Vec<f64>> = ds.samples().iter().map(|s| s.image.data().to_vec()).collect();
    let ys: Vec<usize> = ds.samples().iter().map(|s| s.class_id).collect();
    let probe = fit_linear_probe(&xs, &ys, 10, 1e-4).unwrap();
    let correct = xs.iter().zip(&ys).filter(|(x, y)| probe.predict(x) == **y).count();
    let acc = correct as f64 / xs.len() as f64;
    assert!(acc > 0.9, "train accuracy {acc}");
}

/// Embeddings that carry no information give chance-level accuracy.
#[test]
fn random_embeddings_are_at_chance() {
    let ds = make_synthetic(10, 30, 4, 0).unwrap();
    let mut rng = SeededRng::new(17);
    let emb: Vec<Vec<f64>> = (0..ds.len()).map(|_| (0..16).map(|_| rng.unit() - 0.5).collect()).collect();
    let cfg = EvalConfig { episodes: 500, ..EvalConfig::default() };
    let report = evaluate_embeddings(&ds, &emb, &cfg, &[1], 0).unwrap().remove(0);
    // 500 episodes × 75 queries: σ of the mean is about 0.0065
    assert!((report.mean_accuracy - 0.2).abs() < 3.0 * 0.0065, "{}", report.mean_accuracy);
}

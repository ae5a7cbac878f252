mod common;

use common::*;
use proptest::prelude::*;
use seppmix::cam::{normalize_to_semantic_map, RawMap};
use seppmix::datakit::{make_synthetic, split_base_novel};
use seppmix::fewshot::{extract_embeddings, fit_linear_probe, sample_episode};
use seppmix::mixkit::{combine_labels, mix_images, one_hot, seppmix, upsample_mask, PatchGridMask, PixelMask, Source};
use seppmix::nettrain::soft_cross_entropy;
use seppmix::nn::{Architecture, Model};
use seppmix::rotation::{expand_with_rotations, rotate, RotationAngle};
use seppmix::{Image, SeededRng};

fn image_strategy() -> impl Strategy<Value = Image> {
    (1usize..=8, 1usize..=8, any::<u64>()).prop_map(|(h, w, seed)| random_image(h, w, &mut SeededRng::new(seed)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn semantic_maps_are_valid(h in 1usize..=8, w in 1usize..=8, scale in -30i32..30, seed: u64) {
        let mut rng = SeededRng::new(seed);
        let s = 10f64.powi(scale);
        let raw: Vec<f64> = (0..h * w).map(|_| (rng.unit() - 0.7) * s).collect();
        let map = normalize_to_semantic_map(&RawMap::new(h, w, raw).unwrap()).unwrap();
        prop_assert!(map.values().iter().all(|v| *v >= 0.0));
        prop_assert!((map.values().iter().sum::<f64>() - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn mixed_pixels_come_from_their_source(img in image_strategy(), seed: u64) {
        let mut rng = SeededRng::new(seed);
        let (h, w) = (img.height(), img.width());
        let other = random_image(h, w, &mut rng);
        let cells = random_cells(h * w, &mut rng);
        let mixed = mix_images(&img, &other, &PixelMask::new(h, w, cells.clone()).unwrap()).unwrap();
        for c in 0..3 {
            for p in 0..h * w {
                let expect = if cells[p] { img.get(c, p / w, p % w) } else { other.get(c, p / w, p % w) };
                prop_assert_eq!(mixed.get(c, p / w, p % w), expect);
            }
        }
    }

    #[test]
    fn upsampled_masks_partition_the_image(h in 1usize..=12, w in 1usize..=12, n in 1usize..=4, seed: u64) {
        prop_assume!(n <= h && n <= w);
        let cells = random_cells(n * n, &mut SeededRng::new(seed));
        let px = upsample_mask(&PatchGridMask::from_cells(n, cells.clone()).unwrap(), h, w).unwrap();
        let oracle = oracle_upsample(&cells, n, h, w);
        prop_assert_eq!(px.cells(), oracle.as_slice());
        let ones = px.count_ones() + px.complement().count_ones();
        prop_assert_eq!(ones, h * w);
    }

    #[test]
    fn seppmix_proportions_stay_in_range(h in 2usize..=8, w in 2usize..=8, seed: u64) {
        let mut rng = SeededRng::new(seed);
        let (xa, xb) = (random_image(h, w, &mut rng), random_image(h, w, &mut rng));
        let (sa, sb) = (random_semantic_map(h, w, &mut rng), random_semantic_map(h, w, &mut rng));
        let m = seppmix(Source::new(&xa, 0, 0), Source::new(&xb, 1, 1), &sa, &sb, 2, 2, &mut rng).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.provenance.rho_a));
        prop_assert!((0.0..=1.0).contains(&m.provenance.rho_b));
        let shared = seppmix(Source::new(&xa, 0, 0), Source::new(&xb, 1, 1), &sa, &sa, 2, 2, &mut rng).unwrap();
        prop_assert!((shared.provenance.rho_a + shared.provenance.rho_b - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn rotations_compose(img in image_strategy(), a in 0usize..4, b in 0usize..4) {
        let (ra, rb) = (RotationAngle::ALL[a], RotationAngle::ALL[b]);
        prop_assert_eq!(rotate(&rotate(&img, ra), rb), rotate(&img, ra.then(rb)));
        let four = (0..4).fold(img.clone(), |acc, _| rotate(&acc, ra));
        prop_assert_eq!(four, img);
    }

    #[test]
    fn rotation_keeps_the_label(img in image_strategy(), class in 0usize..5) {
        let sample = seppmix::mixkit::MixedSample::plain(Source::new(&img, class, 0), 5).unwrap();
        for view in expand_with_rotations(&sample) {
            prop_assert_eq!(&view.label, &sample.label);
        }
    }

    #[test]
    fn soft_cross_entropy_is_linear_in_the_target(
        logits in prop::collection::vec(-20.0f64..20.0, 2..10),
        ra in 0.0f64..=1.0,
        rb in 0.0f64..=1.0,
        ka in 0usize..10,
        kb in 0usize..10,
    ) {
        let c = logits.len();
        let (ya, yb) = (one_hot(ka % c, c).unwrap(), one_hot(kb % c, c).unwrap());
        let mixed = combine_labels(&ya, &yb, ra, rb).unwrap();
        let lhs = soft_cross_entropy(&logits, &mixed).unwrap();
        let rhs = ra * soft_cross_entropy(&logits, &ya).unwrap() + rb * soft_cross_entropy(&logits, &yb).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-9);
        prop_assert!((lhs - ce_oracle(&logits, mixed.weights())).abs() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn base_and_novel_classes_are_disjoint(classes in 4usize..30, fraction in 0.2f64..0.8, seed: u64) {
        let ds = make_synthetic(classes, 2, 4, seed).unwrap();
        if let Ok((base, novel)) = split_base_novel(&ds, fraction) {
            prop_assert!(base.classes().iter().all(|c| !novel.classes().contains(c)));
            prop_assert_eq!(base.num_classes() + novel.num_classes(), classes);
            prop_assert!(base.samples().iter().all(|s| novel.samples().iter().all(|t| t.instance != s.instance)));
        }
    }

    #[test]
    fn episodes_are_disjoint_and_balanced(n_way in 2usize..6, k in 1usize..5, q in 1usize..5, seed: u64) {
        let ds = make_synthetic(6, 10, 4, 0).unwrap();
        let ep = sample_episode(&ds, n_way, k, q, &mut SeededRng::new(seed)).unwrap();
        prop_assert_eq!(ep.support.len(), n_way * k);
        prop_assert_eq!(ep.query.len(), n_way * q);
        prop_assert!(ep.support.iter().all(|s| ep.query.iter().all(|x| x.instance != s.instance)));
        for label in 0..n_way {
            prop_assert_eq!(ep.support.iter().filter(|s| s.label == label).count(), k);
            prop_assert_eq!(ep.query.iter().filter(|s| s.label == label).count(), q);
        }
    }

    #[test]
    fn probes_are_deterministic(seed: u64, n_way in 2usize..5) {
        let mut rng = SeededRng::new(seed);
        let xs: Vec<Vec<f64>> = (0..n_way * 2).map(|_| (0..6).map(|_| rng.unit()).collect()).collect();
        let ys: Vec<usize> = (0..n_way * 2).map(|i| i % n_way).collect();
        let a = fit_linear_probe(&xs, &ys, n_way, 1.0).unwrap();
        let b = fit_linear_probe(&xs, &ys, n_way, 1.0).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn normalised_embeddings_have_unit_norm(seed: u64) {
        let arch = Architecture { in_channels: 3, channels: vec![4, 6], num_classes: 3 };
        let model = Model::init(&arch, &mut SeededRng::new(seed)).unwrap();
        let mut rng = SeededRng::new(seed ^ 1);
        let images: Vec<Image> = (0..3).map(|_| random_image(8, 8, &mut rng)).collect();
        let refs: Vec<&Image> = images.iter().chain(images.iter().take(1)).collect();
        let emb = extract_embeddings(&model, &refs, true).unwrap();
        for e in &emb {
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(norm == 0.0 || (norm - 1.0).abs() <= 1e-6);
        }
        prop_assert_eq!(&emb[0], &emb[3]);
    }
}

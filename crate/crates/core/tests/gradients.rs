use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use svh_core::model::gradcheck::{self, tiny_config, tiny_problem};
use svh_core::model::{combine, gradients, init_params, LossWeights, NetworkConfig, NetworkParams};
use svh_core::targets::{build_pixel_targets, MaskConfig, SmoothingConfig};
use svh_core::{AnnotatedImage, GrayImage, JointAnnotation, JointSchema, Limb, Side};

#[test]
fn analytic_gradients_match_finite_differences() {
    let report = gradcheck::run(3).unwrap();
    println!("{report:?}");
    assert_eq!(report.parameters, 681);
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

#[test]
fn deeper_network_gradients_match_finite_differences() {
    let cfg = NetworkConfig {
        depth: 2,
        base_channels: 2,
        in_h: 16,
        in_w: 16,
        ..NetworkConfig::default()
    };
    let params = init_params(&cfg, 5).unwrap().cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let image = AnnotatedImage {
        pixels: GrayImage::from_fn(16, 16, |_, _| rng.gen::<f32>()),
        limb: Limb::Foot,
        side: Side::Left,
        joints: vec![
            JointAnnotation {
                type_id: 2,
                x: 3.5,
                y: 4.0,
                narrowing: Some(2),
                erosion: Some(6),
            },
            JointAnnotation {
                type_id: 5,
                x: 11.0,
                y: 12.5,
                narrowing: Some(4),
                erosion: Some(1),
            },
        ],
    };
    let targets = build_pixel_targets(
        &image,
        &JointSchema::default(),
        &MaskConfig::new(3.0, 5.0).unwrap(),
        &SmoothingConfig::default(),
    )
    .unwrap();
    let report = gradcheck::check(&params, &image.pixels, &targets, &LossWeights::default(), 1e-5).unwrap();
    assert!(report.max_relative_error < 1e-4, "{report:?}");
}

fn tiny() -> (NetworkParams<f64>, GrayImage, svh_core::targets::PixelTargets) {
    let params = init_params(&tiny_config(), 3).unwrap().cast::<f64>();
    let (image, targets) = tiny_problem(3).unwrap();
    (params, image, targets)
}

fn head_range(params: &NetworkParams<f64>, prefix: &str) -> std::ops::Range<usize> {
    let specs: Vec<_> = params.specs().iter().filter(|s| s.name.starts_with(prefix)).collect();
    specs[0].offset..specs.last().unwrap().offset + specs.last().unwrap().len
}

#[test]
fn unweighted_head_receives_exactly_zero_gradient() {
    let (params, image, targets) = tiny();
    let w = LossWeights {
        erosion: 0.0,
        ..LossWeights::default()
    };
    let (_, g) = gradients(&params, &image, &targets, &w).unwrap();
    let range = head_range(&params, "head.erosion");
    assert!(g[range.clone()].iter().all(|&v| v == 0.0));
    // the other heads still learn
    assert!(g[head_range(&params, "head.narrowing")].iter().any(|&v| v != 0.0));
}

#[test]
fn gradients_are_bit_identical_across_calls() {
    let (params, image, targets) = tiny();
    let a = gradients(&params, &image, &targets, &LossWeights::default()).unwrap();
    let b = gradients(&params, &image, &targets, &LossWeights::default()).unwrap();
    assert_eq!(a.1, b.1);
    assert_eq!(a.0, b.0);
}

#[test]
fn scaling_all_weights_leaves_loss_and_gradients_unchanged() {
    let (params, image, targets) = tiny();
    let w = LossWeights {
        seg: 0.5,
        narrowing: 2.0,
        erosion: 1.25,
    };
    let scaled = LossWeights {
        seg: 3.5,
        narrowing: 14.0,
        erosion: 8.75,
    };
    let (ta, ga) = gradients(&params, &image, &targets, &w).unwrap();
    let (tb, gb) = gradients(&params, &image, &targets, &scaled).unwrap();
    assert!((ta.total - tb.total).abs() < 1e-12);
    for (a, b) in ga.iter().zip(&gb) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1e-9), "{a} vs {b}");
    }
}

#[test]
fn targets_at_unsupervised_pixels_do_not_matter() {
    let (params, image, targets) = tiny();
    let mut scrambled = targets.clone();
    for px in 0..targets.pixels() {
        if !targets.narrowing_valid[px] {
            scrambled.narrowing_target[px * 5..(px + 1) * 5].copy_from_slice(&[0.0, 0.0, 0.0, 0.0, 1.0]);
        }
        if !targets.erosion_valid[px] {
            scrambled.erosion_target[px * 6..(px + 1) * 6].copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        }
    }
    assert_ne!(scrambled, targets);
    let a = gradients(&params, &image, &targets, &LossWeights::default()).unwrap();
    let b = gradients(&params, &image, &scrambled, &LossWeights::default()).unwrap();
    assert_eq!(a.1, b.1);
}

#[test]
fn combined_loss_is_the_normalized_weighted_average() {
    assert_eq!(combine(1.0, 2.0, 3.0, &LossWeights::default()), 2.0);
    let w = LossWeights {
        seg: 1.0,
        narrowing: 0.0,
        erosion: 3.0,
    };
    assert_eq!(combine(2.0, 100.0, 6.0, &w), 5.0);
}

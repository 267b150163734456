//! Ground-truth mask rule, context module behavior, metrics and guidance
//! training.

use guided_conv::guidance::{
    bce_loss_and_grad, binarize, context_forward, gt_mask_from_boxes, mask_metrics, pr_sweep,
    train_guidance, BBox, ContextModuleParams, GuidanceMap, GuidanceTrainConfig,
};
use guided_conv::mask::GuidanceMask;
use guided_conv::ops::{
    avg_pool2d, crop, dense_conv2d, elementwise_add, l2_normalize_channels, nearest_upsample,
};
use guided_conv::scene::{gen_scene, SceneSpec};
use guided_conv::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent per-cell rectangle-intersection oracle for the GT rule.
fn gt_oracle(image_w: usize, image_h: usize, boxes: &[BBox]) -> Vec<bool> {
    let (gh, gw) = GuidanceMask::grid_for_image(image_h, image_w, 32);
    let mut cells = vec![false; gh * gw];
    for y in 0..gh {
        for x in 0..gw {
            // rectangle (32y-16, 32x-16, 32, 32), clipped to the image
            let ry0 = (32.0 * y as f64 - 16.0).max(0.0);
            let rx0 = (32.0 * x as f64 - 16.0).max(0.0);
            let ry1 = (32.0 * y as f64 + 16.0).min(image_h as f64);
            let rx1 = (32.0 * x as f64 + 16.0).min(image_w as f64);
            if ry1 <= ry0 || rx1 <= rx0 {
                continue;
            }
            for b in boxes {
                let ox = rx1.min(b.x + b.w) - rx0.max(b.x);
                let oy = ry1.min(b.y + b.h) - ry0.max(b.y);
                if ox > 0.0 && oy > 0.0 {
                    cells[y * gw + x] = true;
                    break;
                }
            }
        }
    }
    cells
}

#[test]
fn gt_mask_empty_boxes_is_all_false() {
    let m = gt_mask_from_boxes(128, 96, &[]);
    assert_eq!((m.height(), m.width()), (3, 4));
    assert!(m.cells().iter().all(|&c| !c));
}

#[test]
fn gt_mask_full_image_box_is_all_true() {
    let m = gt_mask_from_boxes(128, 96, &[BBox::new(0.0, 0.0, 128.0, 96.0).unwrap()]);
    assert!(m.cells().iter().all(|&c| c));
}

#[test]
fn gt_mask_matches_oracle_on_1000_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    for trial in 0..1000 {
        let image_w = rng.gen_range(33..300);
        let image_h = rng.gen_range(33..300);
        let n_boxes = rng.gen_range(0..6);
        let boxes: Vec<BBox> = (0..n_boxes)
            .map(|_| {
                let x = rng.gen_range(0.0..image_w as f64 - 2.0);
                let y = rng.gen_range(0.0..image_h as f64 - 2.0);
                let w = rng.gen_range(1.0..(image_w as f64 - x));
                let h = rng.gen_range(1.0..(image_h as f64 - y));
                BBox::new(x, y, w, h).unwrap()
            })
            .collect();
        let mask = gt_mask_from_boxes(image_w, image_h, &boxes);
        let want = gt_oracle(image_w, image_h, &boxes);
        assert_eq!(mask.cells(), &want[..], "trial {trial} ({image_w}x{image_h})");
    }
}

#[test]
fn binarize_thresholds_and_nesting() {
    let map = GuidanceMap::from_logits(1, 4, vec![-3.0, -0.5, 0.5, 3.0]);
    assert!(binarize(&map, 0.0).is_err());
    assert!(binarize(&map, 1.0).is_err());
    // tau near zero: every cell with p > 0 is true
    let all = binarize(&map, 1e-9).unwrap();
    assert!(all.cells().iter().all(|&c| c));
    // constant 0.5 map, tau 0.2: all true
    let half = GuidanceMap::from_logits(2, 2, vec![0.0; 4]);
    assert!(binarize(&half, 0.2).unwrap().cells().iter().all(|&c| c));

    let mut rng = ChaCha8Rng::seed_from_u64(501);
    for _ in 0..20 {
        let logits: Vec<f64> = (0..24).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let map = GuidanceMap::from_logits(4, 6, logits);
        let mut prev = binarize(&map, 0.1).unwrap();
        for tau in [0.2, 0.3, 0.4] {
            let cur = binarize(&map, tau).unwrap();
            assert!(prev.contains(&cur), "masks must be nested decreasing in tau");
            prev = cur;
        }
    }
}

#[test]
fn context_zero_weights_gives_half_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(502);
    let params = {
        let mut p = ContextModuleParams::<f64>::init(8, 1e-12, &mut rng);
        for layer in p.predictors.iter_mut() {
            for w in layer.weights.data_mut() {
                *w = 0.0;
            }
        }
        p
    };
    let features =
        Tensor::from_vec(1, 8, 5, 5, (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
    let map = context_forward(&features, &params).unwrap();
    assert!(map.probabilities().iter().all(|&p| p == 0.5));
}

#[test]
fn context_constant_features_give_constant_probabilities() {
    let mut rng = ChaCha8Rng::seed_from_u64(503);
    let params = ContextModuleParams::<f64>::init(4, 1e-12, &mut rng);
    let features = Tensor::from_vec(1, 4, 6, 6, vec![0.7; 4 * 36]).unwrap();
    let map = context_forward(&features, &params).unwrap();
    let first = map.probabilities()[0];
    assert!(map.probabilities().iter().all(|&p| (p - first).abs() < 1e-12));
}

#[test]
fn context_equals_sum_of_independently_computed_levels() {
    let mut rng = ChaCha8Rng::seed_from_u64(504);
    let params = ContextModuleParams::<f64>::init(6, 1e-12, &mut rng);
    // odd spatial size exercises ceil pooling and upsample-then-crop
    let features =
        Tensor::from_vec(1, 6, 5, 7, (0..6 * 35).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
    let map = context_forward(&features, &params).unwrap();

    let eps = 1e-12;
    let l1 = dense_conv2d(&l2_normalize_channels(&features, eps).unwrap(), &params.predictors[0]).unwrap();
    let d2 = avg_pool2d(&features, 2, 2).unwrap();
    let p2 = dense_conv2d(&l2_normalize_channels(&d2, eps).unwrap(), &params.predictors[1]).unwrap();
    let l2 = crop(&nearest_upsample(&p2, 2).unwrap(), 5, 7).unwrap();
    let d3 = avg_pool2d(&d2, 2, 2).unwrap();
    let p3 = dense_conv2d(&l2_normalize_channels(&d3, eps).unwrap(), &params.predictors[2]).unwrap();
    let l3 = crop(&nearest_upsample(&p3, 4).unwrap(), 5, 7).unwrap();
    let want = elementwise_add(&elementwise_add(&l1, &l2).unwrap(), &l3).unwrap();

    for (got, want) in map.logits().iter().zip(want.data()) {
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn bce_zero_logits_is_ln_two() {
    let logits = Tensor::<f64>::zeros(1, 1, 3, 3);
    let gt = GuidanceMask::from_cells(3, 3, 32, (0..9).map(|i| i % 2 == 0).collect());
    let (loss, _) = bce_loss_and_grad(&logits, &gt).unwrap();
    assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn bce_saturated_correct_logits_vanish() {
    let gt = GuidanceMask::from_cells(2, 2, 32, vec![true, false, true, false]);
    let logits = Tensor::from_vec(
        1,
        1,
        2,
        2,
        gt.cells().iter().map(|&c| if c { 20.0 } else { -20.0 }).collect(),
    )
    .unwrap();
    let (loss, _) = bce_loss_and_grad(&logits, &gt).unwrap();
    assert!(loss < 1e-3);
}

#[test]
fn bce_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let logits: Tensor<f64> =
        Tensor::from_vec(1, 1, 3, 4, (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
    let gt = GuidanceMask::from_cells(3, 4, 32, (0..12).map(|_| rng.gen_bool(0.5)).collect());
    let (_, grad) = bce_loss_and_grad(&logits, &gt).unwrap();
    let eps = 1e-6;
    for i in 0..12 {
        let mut lp = logits.clone();
        lp.data_mut()[i] += eps;
        let mut lm = logits.clone();
        lm.data_mut()[i] -= eps;
        let num = (bce_loss_and_grad(&lp, &gt).unwrap().0 - bce_loss_and_grad(&lm, &gt).unwrap().0)
            / (2.0 * eps);
        let ana = grad.data()[i];
        assert!((num - ana).abs() / ana.abs().max(1e-8) < 1e-5);
    }
}

#[test]
fn metrics_identity_and_all_true_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(506);
    let cells: Vec<bool> = (0..40).map(|_| rng.gen_bool(0.4)).collect();
    let gt = GuidanceMask::from_cells(5, 8, 32, cells);
    assert_eq!(mask_metrics(&gt, &gt).unwrap(), (1.0, 1.0));
    let all = GuidanceMask::new_true(5, 8, 32);
    let (recall, precision) = mask_metrics(&all, &gt).unwrap();
    assert_eq!(recall, 1.0);
    assert!((precision - gt.area_ratio()).abs() < 1e-12);
}

#[test]
fn metrics_match_direct_counting() {
    let mut rng = ChaCha8Rng::seed_from_u64(507);
    for _ in 0..100 {
        let pred_cells: Vec<bool> = (0..30).map(|_| rng.gen_bool(0.5)).collect();
        let gt_cells: Vec<bool> = (0..30).map(|_| rng.gen_bool(0.5)).collect();
        let pred = GuidanceMask::from_cells(5, 6, 32, pred_cells.clone());
        let gt = GuidanceMask::from_cells(5, 6, 32, gt_cells.clone());
        let tp = pred_cells.iter().zip(&gt_cells).filter(|(&p, &g)| p && g).count() as f64;
        let pc = pred_cells.iter().filter(|&&p| p).count() as f64;
        let gc = gt_cells.iter().filter(|&&g| g).count() as f64;
        let want_r = if gc == 0.0 { 1.0 } else { tp / gc };
        let want_p = if pc == 0.0 { 1.0 } else { tp / pc };
        assert_eq!(mask_metrics(&pred, &gt).unwrap(), (want_r, want_p));
    }
}

#[test]
fn pr_sweep_recall_is_non_increasing() {
    let mut rng = ChaCha8Rng::seed_from_u64(508);
    for _ in 0..20 {
        let logits: Vec<f64> = (0..36).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let map = GuidanceMap::from_logits(6, 6, logits);
        let gt = GuidanceMask::from_cells(6, 6, 32, (0..36).map(|_| rng.gen_bool(0.3)).collect());
        let taus = [0.1, 0.2, 0.3, 0.4, 0.6, 0.8];
        let points = pr_sweep(&map, &gt, &taus).unwrap();
        for pair in points.windows(2) {
            assert!(pair[1].recall <= pair[0].recall + 1e-12);
            assert!(pair[1].area_ratio <= pair[0].area_ratio + 1e-12);
        }
        // a single tau reduces to binarize + mask_metrics
        let single = pr_sweep(&map, &gt, &[0.3]).unwrap();
        let mask = binarize(&map, 0.3).unwrap();
        let (r, p) = mask_metrics(&mask, &gt).unwrap();
        assert_eq!((single[0].recall, single[0].precision), (r, p));
        assert_eq!(single[0].area_ratio, mask.area_ratio());
    }
}

#[test]
fn one_image_overfit_reaches_small_bce() {
    let spec = SceneSpec {
        width: 96,
        height: 96,
        bucket: 2,
        box_count_min: 1,
        box_count_max: 2,
        stripe_period: 6,
        noise_level: 0.25,
        seed: 11,
    };
    let (image, boxes) = gen_scene::<f32>(&spec).unwrap();
    let dataset = vec![(image, boxes)];
    let config = GuidanceTrainConfig {
        epochs: 400,
        lr: 0.05,
        momentum: 0.9,
        seed: 12,
        tau: 0.2,
        epsilon: 1e-12,
    };
    let (_, report) = train_guidance(&dataset, &config).unwrap();
    assert!(
        report.final_loss < 0.05,
        "final loss {} after {} steps",
        report.final_loss,
        config.epochs
    );
    assert!(report.final_loss < report.initial_loss);
}

#[test]
fn training_is_deterministic_per_seed() {
    let spec = SceneSpec {
        width: 96,
        height: 96,
        bucket: 2,
        box_count_min: 1,
        box_count_max: 2,
        stripe_period: 6,
        noise_level: 0.25,
        seed: 13,
    };
    let (image, boxes) = gen_scene::<f32>(&spec).unwrap();
    let dataset = vec![(image, boxes)];
    let config = GuidanceTrainConfig {
        epochs: 20,
        ..Default::default()
    };
    let (a, _) = train_guidance(&dataset, &config).unwrap();
    let (b, _) = train_guidance(&dataset, &config).unwrap();
    for (la, lb) in a.all_layers().iter().zip(b.all_layers()) {
        assert_eq!(la.weights.data(), lb.weights.data());
        assert_eq!(la.bias, lb.bias);
    }
    assert!(train_guidance::<f32>(&[], &config).is_err());
}

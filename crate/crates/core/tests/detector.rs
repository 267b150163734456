//! Toy detector behavior: mode equivalences, target assignment, MAC
//! accounting and training sanity runs.

use guided_conv::detector::{
    dense_macs, detect, detector_forward, head_loss_and_grad, make_targets, train_detector,
    CellTargets, DetectorTrainConfig, ToyDetectorParams, TrainMaskSource, HEAD_STRIDE,
};
use guided_conv::guidance::{gt_mask_from_boxes, BBox};
use guided_conv::guided::flop_count;
use guided_conv::mask::{GuidanceMask, MaskView};
use guided_conv::postprocess::{decode_and_nms, evaluate};
use guided_conv::scene::{gen_scene, SceneSpec};
use guided_conv::synthesis::{Mode, SynthesisConfig};
use guided_conv::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor<f32> {
    Tensor::from_vec(1, 1, h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
}

#[test]
fn all_true_mask_guided_forward_equals_dense_bit_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    let image = random_image(&mut rng, 96, 64);
    let params = ToyDetectorParams::<f32>::init(601);
    let mask = GuidanceMask::new_true(3, 2, 32);
    let dense = detector_forward(&image, &params, Mode::Dense, 0.0, None).unwrap();
    let guided = detector_forward(&image, &params, Mode::Guided, 0.0, Some(&mask)).unwrap();
    assert_eq!(dense.score.data(), guided.score.data());
    assert_eq!(dense.deltas.data(), guided.deltas.data());
    assert_eq!(dense.macs, guided.macs);
}

#[test]
fn all_false_mask_yields_zero_logits_and_no_detections() {
    let mut rng = ChaCha8Rng::seed_from_u64(602);
    let image = random_image(&mut rng, 64, 64);
    let params = ToyDetectorParams::<f32>::init(603);
    let mask = GuidanceMask::new_false(2, 2, 32);
    let out = detector_forward(&image, &params, Mode::Guided, 0.0, Some(&mask)).unwrap();
    assert!(out.score.data().iter().all(|&v| v == 0.0));
    let dets = decode_and_nms(&out.score, &out.deltas, HEAD_STRIDE, 0.5, 0.5, Some(&out.head_view));
    assert!(dets.is_empty());
    assert_eq!(out.macs, 0);
}

#[test]
fn masked_head_cells_match_dense_when_interior() {
    // a mask true everywhere except one corner cell: head cells well inside
    // the true region match the dense head, background is exactly zero
    let mut rng = ChaCha8Rng::seed_from_u64(604);
    let image = random_image(&mut rng, 128, 128);
    let params = ToyDetectorParams::<f32>::init(605);
    let mut mask = GuidanceMask::new_true(4, 4, 32);
    mask.set(0, 0, false);
    let dense = detector_forward(&image, &params, Mode::Dense, 0.0, None).unwrap();
    let guided = detector_forward(&image, &params, Mode::Guided, 0.0, Some(&mask)).unwrap();
    let (_, _, gh, gw) = guided.score.shape();
    for y in 0..gh {
        for x in 0..gw {
            if !guided.head_view.get(y, x) {
                assert_eq!(guided.score.at(0, 0, y, x), 0.0, "background logit must be 0");
            } else if y >= 4 && x >= 4 {
                // interior: 2 mask cells (= 4 head cells) away from the hole
                let d = dense.score.at(0, 0, y, x);
                let g = guided.score.at(0, 0, y, x);
                let rel = (d - g).abs() / d.abs().max(1e-3);
                assert!(rel < 1e-4, "cell ({y},{x}): {d} vs {g}");
            }
        }
    }
}

#[test]
fn guided_plus_p_one_equals_dense_and_p_zero_equals_guided() {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let image = random_image(&mut rng, 96, 96);
    let params = ToyDetectorParams::<f32>::init(607);
    let cells: Vec<bool> = (0..9).map(|_| rng.gen_bool(0.5)).collect();
    let mask = GuidanceMask::from_cells(3, 3, 32, cells);

    let dense = detector_forward(&image, &params, Mode::Dense, 1.0, None).unwrap();
    let plus1 = detector_forward(&image, &params, Mode::GuidedPlus, 1.0, Some(&mask)).unwrap();
    assert_eq!(dense.score.data(), plus1.score.data());
    assert_eq!(dense.deltas.data(), plus1.deltas.data());
    assert!(!plus1.decode_masked);

    let guided = detector_forward(&image, &params, Mode::Guided, 0.0, Some(&mask)).unwrap();
    let plus0 = detector_forward(&image, &params, Mode::GuidedPlus, 0.0, Some(&mask)).unwrap();
    assert_eq!(guided.score.data(), plus0.score.data());
    assert_eq!(guided.deltas.data(), plus0.deltas.data());
    assert!(plus0.decode_masked);

    // guided-plus spends the dense MAC budget whenever it computes the
    // background (p > 0); at p = 0 it degenerates to the guided path
    assert_eq!(plus1.macs, dense.macs);
    assert_eq!(plus0.macs, guided.macs);
}

#[test]
fn make_targets_examples() {
    // no boxes: all negative
    let t = make_targets(64, 64, &[]);
    assert!(t.labels.iter().all(|&l| !l));

    // a full 64x64 box at stride 16: all 4x4 cells positive
    let t = make_targets(64, 64, &[BBox::new(0.0, 0.0, 64.0, 64.0).unwrap()]);
    assert_eq!((t.gh, t.gw), (4, 4));
    assert!(t.labels.iter().all(|&l| l));
    // centered box: zero offsets, log(64/16) sizes
    for i in 0..16 {
        assert!((t.deltas[i][2] - (4.0f64).ln()).abs() < 1e-12);
        assert!((t.deltas[i][3] - (4.0f64).ln()).abs() < 1e-12);
    }
}

/// Independent target oracle: enumerate boxes per cell, pick by footprint
/// IoU with first-listed tie break.
fn targets_oracle(image_w: usize, image_h: usize, boxes: &[BBox]) -> CellTargets {
    let stride = HEAD_STRIDE as f64;
    let gh = (image_h + HEAD_STRIDE - 1) / HEAD_STRIDE;
    let gw = (image_w + HEAD_STRIDE - 1) / HEAD_STRIDE;
    let mut labels = vec![false; gh * gw];
    let mut deltas = vec![[0.0f64; 4]; gh * gw];
    for y in 0..gh {
        for x in 0..gw {
            let cx = x as f64 * stride + stride / 2.0;
            let cy = y as f64 * stride + stride / 2.0;
            let fp = BBox {
                x: x as f64 * stride,
                y: y as f64 * stride,
                w: stride,
                h: stride,
            };
            let mut best_iou = -1.0;
            let mut best: Option<&BBox> = None;
            for b in boxes {
                if !(cx > b.x && cx < b.x + b.w && cy > b.y && cy < b.y + b.h) {
                    continue;
                }
                let iou = fp.iou(b);
                if iou > best_iou {
                    best_iou = iou;
                    best = Some(b);
                }
            }
            if let Some(b) = best {
                labels[y * gw + x] = true;
                deltas[y * gw + x] = [
                    (b.x + b.w / 2.0 - cx) / stride,
                    (b.y + b.h / 2.0 - cy) / stride,
                    (b.w / stride).ln(),
                    (b.h / stride).ln(),
                ];
            }
        }
    }
    CellTargets {
        gh,
        gw,
        labels,
        deltas,
    }
}

#[test]
fn make_targets_matches_oracle_with_overlapping_boxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(608);
    for _ in 0..200 {
        let n = rng.gen_range(1..5);
        let boxes: Vec<BBox> = (0..n)
            .map(|_| {
                BBox::new(
                    rng.gen_range(0.0..90.0),
                    rng.gen_range(0.0..90.0),
                    rng.gen_range(10.0..38.0),
                    rng.gen_range(10.0..38.0),
                )
                .unwrap()
            })
            .collect();
        let got = make_targets(128, 128, &boxes);
        let want = targets_oracle(128, 128, &boxes);
        assert_eq!(got.labels, want.labels);
        assert_eq!(got.deltas, want.deltas);
    }
}

#[test]
fn perfect_predictions_give_tiny_loss() {
    let boxes = vec![BBox::new(16.0, 16.0, 32.0, 32.0).unwrap()];
    let targets = make_targets(64, 64, &boxes);
    let mut head = Tensor::<f64>::zeros(1, 5, 4, 4);
    for y in 0..4 {
        for x in 0..4 {
            let i = y * 4 + x;
            head.set(0, 0, y, x, if targets.labels[i] { 30.0 } else { -30.0 });
            for c in 0..4 {
                head.set(0, c + 1, y, x, targets.deltas[i][c]);
            }
        }
    }
    let (loss, _) = head_loss_and_grad(&head, &targets, &MaskView::full(4, 4), 1.0).unwrap();
    assert!(loss < 1e-3, "loss {loss}");
}

#[test]
fn guided_macs_are_dense_times_mask_ratio_per_layer() {
    let mut rng = ChaCha8Rng::seed_from_u64(609);
    let image = random_image(&mut rng, 128, 96);
    let params = ToyDetectorParams::<f32>::init(610);
    let cells: Vec<bool> = (0..12).map(|_| rng.gen_bool(0.4)).collect();
    let mask = GuidanceMask::from_cells(4, 3, 32, cells);
    let out = detector_forward(&image, &params, Mode::Guided, 0.0, Some(&mask)).unwrap();

    let views = guided_conv::detector::project_views(&params, &mask, 128, 96).unwrap();
    let mut want = 0u64;
    for (layer, view) in params.layers().iter().zip(&views) {
        want += flop_count(layer, view.height(), view.width(), Some(view));
    }
    assert_eq!(out.macs, want);
    let dense = dense_macs(&params, 128, 96).unwrap();
    assert!(out.macs <= dense);
}

#[test]
fn one_image_dense_overfit_reaches_perfect_f_measure() {
    let spec = SceneSpec {
        width: 96,
        height: 96,
        bucket: 2,
        box_count_min: 2,
        box_count_max: 2,
        stripe_period: 6,
        noise_level: 0.25,
        seed: 21,
    };
    let (image, boxes) = gen_scene::<f32>(&spec).unwrap();
    let dataset = vec![(image.clone(), boxes.clone())];
    let config = DetectorTrainConfig {
        epochs: 250,
        lr: 0.02,
        momentum: 0.9,
        seed: 22,
        lambda: 1.0,
    };
    let (params, report) = train_detector(&dataset, &config, &TrainMaskSource::Dense).unwrap();
    assert!(report.final_loss < report.initial_loss);
    let (dets, _) = detect(&image, &params, None, Mode::Dense, 0.0, 0.5, 0.5).unwrap();
    let (recall, precision, f) = evaluate(&dets, &boxes, 0.5);
    assert_eq!(
        (recall, precision, f),
        (1.0, 1.0, 1.0),
        "dets: {dets:?} vs gt {boxes:?}"
    );
}

#[test]
fn detector_training_is_deterministic_and_guided_loss_decreases() {
    let mut data = Vec::new();
    for seed in 0..6 {
        let spec = SceneSpec {
            width: 96,
            height: 96,
            bucket: (1 + seed % 2) as usize,
            box_count_min: 1,
            box_count_max: 2,
            stripe_period: 6,
            noise_level: 0.25,
            seed: 30 + seed,
        };
        data.push(gen_scene::<f32>(&spec).unwrap());
    }
    let config = DetectorTrainConfig {
        epochs: 4,
        lr: 0.01,
        momentum: 0.9,
        seed: 31,
        lambda: 1.0,
    };
    let syn = SynthesisConfig::new(0.4, 32).unwrap();
    let (a, report) = train_detector(&data, &config, &TrainMaskSource::GtSynthesis(syn)).unwrap();
    let (b, _) = train_detector(&data, &config, &TrainMaskSource::GtSynthesis(syn)).unwrap();
    for (la, lb) in a.layers().iter().zip(b.layers()) {
        assert_eq!(la.weights.data(), lb.weights.data());
    }
    for pair in report.epoch_losses.windows(2) {
        assert!(
            pair[1] <= pair[0],
            "epoch losses must decrease: {:?}",
            report.epoch_losses
        );
    }
}

#[test]
fn gt_synthesis_p_one_training_equals_dense_training_bitwise() {
    let mut data = Vec::new();
    for seed in 0..3 {
        let spec = SceneSpec {
            width: 96,
            height: 96,
            bucket: 2,
            box_count_min: 1,
            box_count_max: 1,
            stripe_period: 6,
            noise_level: 0.25,
            seed: 40 + seed,
        };
        data.push(gen_scene::<f32>(&spec).unwrap());
    }
    let config = DetectorTrainConfig {
        epochs: 3,
        lr: 0.01,
        momentum: 0.9,
        seed: 41,
        lambda: 1.0,
    };
    let syn = SynthesisConfig::new(1.0, 99).unwrap();
    let (dense, _) = train_detector(&data, &config, &TrainMaskSource::Dense).unwrap();
    let (ext, _) = train_detector(&data, &config, &TrainMaskSource::GtSynthesis(syn)).unwrap();
    for (ld, le) in dense.layers().iter().zip(ext.layers()) {
        assert_eq!(ld.weights.data(), le.weights.data());
        assert_eq!(ld.bias, le.bias);
    }
}

#[test]
fn every_gt_box_keeps_a_supervised_head_cell() {
    // The ground-truth cell rectangles are offset half a cell from the
    // floor-projected mask blocks, so an individual positive head cell can
    // fall outside the mask. Boxes at least 33 px wide always keep at least
    // one positive head cell inside it, which is what detection needs;
    // generated scenes respect that minimum.
    let mut rng = ChaCha8Rng::seed_from_u64(611);
    for trial in 0..100 {
        let boxes: Vec<BBox> = (0..rng.gen_range(1..4))
            .map(|_| {
                BBox::new(
                    rng.gen_range(0.0..70.0),
                    rng.gen_range(0.0..70.0),
                    rng.gen_range(34.0..56.0),
                    rng.gen_range(34.0..56.0),
                )
                .unwrap()
            })
            .collect();
        let params = ToyDetectorParams::<f32>::init(1);
        let mask = gt_mask_from_boxes(128, 128, &boxes);
        let views = guided_conv::detector::project_views(&params, &mask, 128, 128).unwrap();
        let targets = make_targets(128, 128, &boxes);
        for b in &boxes {
            let mut covered = false;
            for y in 0..targets.gh {
                for x in 0..targets.gw {
                    let cx = (x as f64 + 0.5) * HEAD_STRIDE as f64;
                    let cy = (y as f64 + 0.5) * HEAD_STRIDE as f64;
                    let inside = cx > b.x && cx < b.x + b.w && cy > b.y && cy < b.y + b.h;
                    if inside && targets.label(y, x) && views[5].get(y, x) {
                        covered = true;
                    }
                }
            }
            assert!(covered, "trial {trial}: box {b:?} has no mask-covered positive cell");
        }
    }
}

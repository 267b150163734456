//! Toy single-forward-pass text detector that runs dense, guided, or
//! guided-plus.
//!
//! Architecture: five 3x3 relu conv blocks (stride 1 then four stride-2,
//! channels 16/16/32/32/64) and a 1x1 head producing 5 channels per stride-16
//! cell: one score logit and four box deltas (dx, dy, log dw, log dh)
//! relative to the cell center and the 16 px cell size.
//!
//! In guided modes every layer takes the guidance mask projected to its own
//! output resolution; the head is computed only at mask-true cells.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::guidance::{
    gt_mask_from_boxes, init_conv, predict_mask, scheduled_lr, shuffle, BBox, GuidanceNetParams,
    Momentum, TrainReport, SHUFFLE_STREAM,
};
use crate::guided::{flop_count, guided_conv2d, guided_conv2d_backward, guided_pointwise, PointwiseOp};
use crate::layer::ConvLayer;
use crate::mask::{mask_project, GuidanceMask, MaskView};
use crate::ops::{relu_backward, sigmoid_scalar};
use crate::synthesis::{extend_mask_random, scale_background, Mode, SynthesisConfig};
use crate::tensor::Tensor;

pub const HEAD_STRIDE: usize = 16;
pub const DETECTOR_BLOCK_CHANNELS: [usize; 5] = [16, 16, 32, 32, 64];
/// Head channels: score logit + (dx, dy, log dw, log dh).
pub const HEAD_CHANNELS: usize = 5;

#[derive(Debug, Clone)]
pub struct ToyDetectorParams<E: Element> {
    pub blocks: Vec<ConvLayer<E>>,
    pub head: ConvLayer<E>,
}

impl<E: Element> ToyDetectorParams<E> {
    pub fn init(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::with_capacity(5);
        let mut in_ch = 1;
        for (i, &out_ch) in DETECTOR_BLOCK_CHANNELS.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            blocks.push(init_conv(out_ch, in_ch, 3, 3, stride, 1, &mut rng));
            in_ch = out_ch;
        }
        let head = init_conv(HEAD_CHANNELS, in_ch, 1, 1, 1, 0, &mut rng);
        ToyDetectorParams { blocks, head }
    }

    pub fn layers(&self) -> Vec<&ConvLayer<E>> {
        self.blocks.iter().chain(std::iter::once(&self.head)).collect()
    }

    pub fn layers_mut(&mut self) -> Vec<&mut ConvLayer<E>> {
        self.blocks.iter_mut().chain(std::iter::once(&mut self.head)).collect()
    }

    pub fn cast<T: Element>(&self) -> ToyDetectorParams<T> {
        ToyDetectorParams {
            blocks: self.blocks.iter().map(|l| l.cast()).collect(),
            head: self.head.cast(),
        }
    }

    /// Rebuild from the weight-file layer list (5 blocks then the head).
    pub fn from_raw_layers(
        raw: Vec<(usize, usize, usize, usize, Vec<E>, Vec<E>)>,
    ) -> Result<Self> {
        if raw.len() != 6 {
            return Err(Error::BadHeader {
                what: "detector weights",
                detail: format!("expected 6 layers, found {}", raw.len()),
            });
        }
        let mut layers = Vec::with_capacity(6);
        for (i, (oc, ic, kh, kw, w, b)) in raw.into_iter().enumerate() {
            let (stride, padding) = match i {
                0 => (1, 1),
                1..=4 => (2, 1),
                _ => (1, 0),
            };
            let weights = Tensor::from_vec(oc, ic, kh, kw, w)?;
            layers.push(ConvLayer::new(oc, ic, kh, kw, stride, padding, weights, b)?);
        }
        let mut expect_in = 1;
        for (i, layer) in layers.iter().take(5).enumerate() {
            if layer.in_channels != expect_in
                || layer.out_channels != DETECTOR_BLOCK_CHANNELS[i]
                || layer.kernel_h != 3
            {
                return Err(Error::BadHeader {
                    what: "detector weights",
                    detail: format!("block {i} has unexpected shape"),
                });
            }
            expect_in = layer.out_channels;
        }
        let head = layers.pop().unwrap();
        if head.out_channels != HEAD_CHANNELS || head.in_channels != expect_in || head.kernel_h != 1
        {
            return Err(Error::BadHeader {
                what: "detector weights",
                detail: "head has unexpected shape".into(),
            });
        }
        Ok(ToyDetectorParams {
            blocks: layers,
            head,
        })
    }

    /// Output grids of all six layers for an image of the given size.
    pub fn layer_grids(&self, image_h: usize, image_w: usize) -> Result<Vec<(usize, usize)>> {
        let mut dims = Vec::with_capacity(6);
        let (mut h, mut w) = (image_h, image_w);
        for layer in self.layers() {
            let (oh, ow) = layer.output_size(h, w)?;
            dims.push((oh, ow));
            h = oh;
            w = ow;
        }
        Ok(dims)
    }
}

/// Per-cell training targets: positive label where a cell center falls
/// strictly inside a box, plus that box's regression encoding.
#[derive(Debug, Clone)]
pub struct CellTargets {
    pub gh: usize,
    pub gw: usize,
    pub labels: Vec<bool>,
    pub deltas: Vec<[f64; 4]>,
}

impl CellTargets {
    #[inline]
    pub fn label(&self, y: usize, x: usize) -> bool {
        self.labels[y * self.gw + x]
    }
}

/// Assign each stride-16 cell a label and regression target. A cell is
/// positive iff its center pixel lies strictly inside a box; overlaps go to
/// the box with highest IoU against the cell's 16x16 footprint, ties to the
/// first-listed box.
pub fn make_targets(image_w: usize, image_h: usize, boxes: &[BBox]) -> CellTargets {
    let stride = HEAD_STRIDE as f64;
    let gh = (image_h + HEAD_STRIDE - 1) / HEAD_STRIDE;
    let gw = (image_w + HEAD_STRIDE - 1) / HEAD_STRIDE;
    let mut labels = vec![false; gh * gw];
    let mut deltas = vec![[0.0f64; 4]; gh * gw];
    for y in 0..gh {
        for x in 0..gw {
            let cx = (x as f64 + 0.5) * stride;
            let cy = (y as f64 + 0.5) * stride;
            let footprint = BBox {
                x: x as f64 * stride,
                y: y as f64 * stride,
                w: stride,
                h: stride,
            };
            let mut best: Option<(f64, &BBox)> = None;
            for b in boxes {
                let inside = cx > b.x && cx < b.x1() && cy > b.y && cy < b.y1();
                if !inside {
                    continue;
                }
                let iou = footprint.iou(b);
                if best.map_or(true, |(bi, _)| iou > bi) {
                    best = Some((iou, b));
                }
            }
            if let Some((_, b)) = best {
                let i = y * gw + x;
                labels[i] = true;
                deltas[i] = [
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

/// The guidance mask projected onto each of the six layer output grids.
pub fn project_views<E: Element>(
    params: &ToyDetectorParams<E>,
    mask: &GuidanceMask,
    image_h: usize,
    image_w: usize,
) -> Result<Vec<MaskView>> {
    Ok(params
        .layer_grids(image_h, image_w)?
        .into_iter()
        .map(|(h, w)| mask_project(mask, h, w, image_h, image_w))
        .collect())
}

/// Cached activations of one zero-background (or dense, via all-true views)
/// forward pass.
pub struct DetectorForward<E: Element> {
    pub views: Vec<MaskView>,
    pre: Vec<Tensor<E>>,
    post: Vec<Tensor<E>>,
    pub head_out: Tensor<E>,
    pub macs: u64,
}

impl<E: Element> DetectorForward<E> {
    pub fn score_map(&self) -> Tensor<E> {
        split_head(&self.head_out).0
    }
    pub fn delta_map(&self) -> Tensor<E> {
        split_head(&self.head_out).1
    }
}

/// Split the 5-channel head output into (1-channel score, 4-channel deltas).
pub fn split_head<E: Element>(head_out: &Tensor<E>) -> (Tensor<E>, Tensor<E>) {
    let (_, _, gh, gw) = head_out.shape();
    let mut score = Tensor::zeros(1, 1, gh, gw);
    let mut deltas = Tensor::zeros(1, 4, gh, gw);
    score.plane_mut(0, 0).copy_from_slice(head_out.plane(0, 0));
    for c in 0..4 {
        deltas.plane_mut(0, c).copy_from_slice(head_out.plane(0, c + 1));
    }
    (score, deltas)
}

/// Forward pass with zero-filled background, evaluating each layer only at
/// its view-true cells. Dense execution is the all-true special case.
pub fn detector_forward_cached<E: Element>(
    image: &Tensor<E>,
    params: &ToyDetectorParams<E>,
    views: &[MaskView],
) -> Result<DetectorForward<E>> {
    debug_assert_eq!(views.len(), 6);
    let mut pre = Vec::with_capacity(5);
    let mut post = Vec::with_capacity(5);
    let mut macs = 0u64;
    let mut x = image.clone();
    for (i, layer) in params.blocks.iter().enumerate() {
        let z = guided_conv2d(&x, layer, &views[i])?;
        macs += flop_count(layer, views[i].height(), views[i].width(), Some(&views[i]));
        x = guided_pointwise(PointwiseOp::Relu, &z, &views[i])?;
        pre.push(z);
        post.push(x.clone());
    }
    let head_out = guided_conv2d(&x, &params.head, &views[5])?;
    macs += flop_count(&params.head, views[5].height(), views[5].width(), Some(&views[5]));
    Ok(DetectorForward {
        views: views.to_vec(),
        pre,
        post,
        head_out,
        macs,
    })
}

/// Inference product: maps to decode plus the exact MAC count spent.
pub struct DetectorInference<E: Element> {
    pub score: Tensor<E>,
    pub deltas: Tensor<E>,
    pub head_view: MaskView,
    pub decode_masked: bool,
    pub macs: u64,
}

/// Run the detector in one of the three test modes.
///
/// Dense ignores the mask. Guided projects it to every layer and zero-fills
/// background. Guided-plus computes densely but multiplies the background of
/// the first gated feature map by p (the dropout expectation of the training
/// gate); it spends the dense MAC budget.
pub fn detector_forward<E: Element>(
    image: &Tensor<E>,
    params: &ToyDetectorParams<E>,
    mode: Mode,
    p: f64,
    mask: Option<&GuidanceMask>,
) -> Result<DetectorInference<E>> {
    let (_, _, h, w) = image.shape();
    match mode {
        Mode::Dense => {
            let views: Vec<MaskView> = params
                .layer_grids(h, w)?
                .into_iter()
                .map(|(vh, vw)| MaskView::full(vh, vw))
                .collect();
            let fwd = detector_forward_cached(image, params, &views)?;
            let (score, deltas) = split_head(&fwd.head_out);
            Ok(DetectorInference {
                score,
                deltas,
                head_view: views[5].clone(),
                decode_masked: false,
                macs: fwd.macs,
            })
        }
        Mode::Guided => {
            let mask = mask.ok_or(Error::InvalidParam {
                name: "mask",
                detail: "guided mode requires a guidance mask".into(),
            })?;
            let views = project_views(params, mask, h, w)?;
            let fwd = detector_forward_cached(image, params, &views)?;
            let (score, deltas) = split_head(&fwd.head_out);
            Ok(DetectorInference {
                score,
                deltas,
                head_view: views[5].clone(),
                decode_masked: true,
                macs: fwd.macs,
            })
        }
        Mode::GuidedPlus => {
            let mask = mask.ok_or(Error::InvalidParam {
                name: "mask",
                detail: "guided_plus mode requires a guidance mask".into(),
            })?;
            if p == 0.0 {
                // scale-by-zero is exactly the guided zero-fill path
                let mut out = detector_forward(image, params, Mode::Guided, 0.0, Some(mask))?;
                out.decode_masked = true;
                return Ok(out);
            }
            let views = project_views(params, mask, h, w)?;
            // dense compute, with the background scaled by p once, at the
            // first gated feature map. The training gate is one Bernoulli
            // draw per cell shared by all layers, so its expectation enters
            // the network once; scaling at every layer compounds to p^5 and
            // over-attenuates the background.
            let mut macs = 0u64;
            let mut x = image.clone();
            for (i, layer) in params.blocks.iter().enumerate() {
                let full = MaskView::full(views[i].height(), views[i].width());
                let z = guided_conv2d(&x, layer, &full)?;
                macs += flop_count(layer, full.height(), full.width(), None);
                x = guided_pointwise(PointwiseOp::Relu, &z, &full)?;
                if i == 0 {
                    x = scale_background(&x, &views[i], p)?;
                }
            }
            let full = MaskView::full(views[5].height(), views[5].width());
            let head_out = guided_conv2d(&x, &params.head, &full)?;
            macs += flop_count(&params.head, full.height(), full.width(), None);
            let (score, deltas) = split_head(&head_out);
            Ok(DetectorInference {
                score,
                deltas,
                head_view: views[5].clone(),
                decode_masked: false,
                macs,
            })
        }
    }
}

/// Dense MAC budget of one forward pass at the given image size.
pub fn dense_macs<E: Element>(params: &ToyDetectorParams<E>, image_h: usize, image_w: usize) -> Result<u64> {
    let grids = params.layer_grids(image_h, image_w)?;
    Ok(params
        .layers()
        .iter()
        .zip(grids)
        .map(|(layer, (h, w))| flop_count(layer, h, w, None))
        .sum())
}

fn smooth_l1(d: f64) -> f64 {
    if d.abs() < 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

fn smooth_l1_grad(d: f64) -> f64 {
    if d.abs() < 1.0 {
        d
    } else {
        d.signum()
    }
}

/// Loss over mask-selected head cells and its gradient at the head output.
///
/// Score: mean binary cross-entropy over view-true cells. Regression: lambda
/// times the mean (over positive view-true cells) of the summed smooth-L1 of
/// the four deltas. An all-false view yields zero loss and zero gradient.
pub fn head_loss_and_grad<E: Element>(
    head_out: &Tensor<E>,
    targets: &CellTargets,
    head_view: &MaskView,
    lambda: f64,
) -> Result<(f64, Tensor<E>)> {
    let (_, _, gh, gw) = head_out.shape();
    if (targets.gh, targets.gw) != (gh, gw) {
        return Err(Error::ShapeMismatch {
            what: "detector targets",
            left: format!("{gh}x{gw}"),
            right: format!("{}x{}", targets.gh, targets.gw),
        });
    }
    let mut d_head = Tensor::<E>::zeros(1, HEAD_CHANNELS, gh, gw);
    let masked = head_view.true_count();
    if masked == 0 {
        return Ok((0.0, d_head));
    }
    let positives = (0..gh * gw)
        .filter(|&i| targets.labels[i] && head_view.cells()[i])
        .count();
    let mut loss = 0.0;
    let m = masked as f64;
    for y in 0..gh {
        for x in 0..gw {
            if !head_view.get(y, x) {
                continue;
            }
            let i = y * gw + x;
            let z = head_out.at(0, 0, y, x).to_f64();
            let t = if targets.labels[i] { 1.0 } else { 0.0 };
            loss += (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()) / m;
            d_head.set(0, 0, y, x, E::from_f64((sigmoid_scalar(z) - t) / m));
            if targets.labels[i] && positives > 0 {
                let pn = positives as f64;
                for c in 0..4 {
                    let d = head_out.at(0, c + 1, y, x).to_f64() - targets.deltas[i][c];
                    loss += lambda * smooth_l1(d) / pn;
                    d_head.set(0, c + 1, y, x, E::from_f64(lambda * smooth_l1_grad(d) / pn));
                }
            }
        }
    }
    Ok((loss, d_head))
}

/// Loss plus the full backward pass through head and blocks. Gradients flow
/// only through masked computations.
pub fn detector_loss_and_backprop<E: Element>(
    image: &Tensor<E>,
    params: &ToyDetectorParams<E>,
    fwd: &DetectorForward<E>,
    targets: &CellTargets,
    lambda: f64,
) -> Result<(f64, Vec<(Tensor<E>, Vec<E>)>)> {
    let head_view = &fwd.views[5];
    let (loss, d_head) = head_loss_and_grad(&fwd.head_out, targets, head_view, lambda)?;
    if head_view.true_count() == 0 {
        let zeros = params
            .layers()
            .iter()
            .map(|l| {
                (
                    Tensor::zeros(l.out_channels, l.in_channels, l.kernel_h, l.kernel_w),
                    vec![E::ZERO; l.out_channels],
                )
            })
            .collect();
        return Ok((0.0, zeros));
    }

    // head backward, then the relu/conv chain down to the image
    let mut grads_rev: Vec<(Tensor<E>, Vec<E>)> = Vec::with_capacity(6);
    let g = guided_conv2d_backward(&d_head, &fwd.post[4], &params.head, head_view)?;
    grads_rev.push((g.weights, g.bias));
    let mut d_post = g.input;
    for i in (0..5).rev() {
        // guided relu: background activations are the constant zero, and
        // pre-activations there are exactly zero, so the relu gate cuts them
        let d_pre = relu_backward(&d_post, &fwd.pre[i]);
        let input = if i == 0 { image } else { &fwd.post[i - 1] };
        let g = guided_conv2d_backward(&d_pre, input, &params.blocks[i], &fwd.views[i])?;
        grads_rev.push((g.weights, g.bias));
        d_post = g.input;
    }
    grads_rev.reverse(); // now blocks 0..4 then head, matching layers()
    Ok((loss, grads_rev))
}

/// Which mask drives guided training.
pub enum TrainMaskSource<'a, E: Element> {
    /// All-true mask: the dense baseline.
    Dense,
    /// Ground-truth mask extended per iteration by random synthesis.
    GtSynthesis(SynthesisConfig),
    /// Mask predicted by a trained guidance net (not extended).
    Predicted(&'a GuidanceNetParams<E>, f64),
}

#[derive(Debug, Clone)]
pub struct DetectorTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub lambda: f64,
}

impl Default for DetectorTrainConfig {
    fn default() -> Self {
        DetectorTrainConfig {
            epochs: 4,
            lr: 0.01,
            momentum: 0.9,
            seed: 2,
            lambda: 1.0,
        }
    }
}

/// Train with SGD + momentum. Every iteration rebuilds the iteration mask
/// (ground truth + fresh synthesis draw in guided training), projects it to
/// each layer and runs the guided forward/backward. Single-threaded and
/// deterministic for a seed; the dense baseline consumes the same shuffle
/// stream, so a p = 1 synthesis run reproduces it exactly.
pub fn train_detector<E: Element>(
    dataset: &[(Tensor<E>, Vec<BBox>)],
    config: &DetectorTrainConfig,
    source: &TrainMaskSource<'_, E>,
) -> Result<(ToyDetectorParams<E>, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = ToyDetectorParams::<E>::init(config.seed);
    let mut momentum = Momentum::for_layers(&params.layers());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);

    let targets: Vec<CellTargets> = dataset
        .iter()
        .map(|(img, boxes)| make_targets(img.width(), img.height(), boxes))
        .collect();
    let gt_masks: Vec<GuidanceMask> = dataset
        .iter()
        .map(|(img, boxes)| gt_mask_from_boxes(img.width(), img.height(), boxes))
        .collect();
    let predicted: Option<Vec<GuidanceMask>> = match source {
        TrainMaskSource::Predicted(net, tau) => {
            let mut masks = Vec::with_capacity(dataset.len());
            for (img, _) in dataset {
                let map = crate::guidance::predict_guidance(img, net)?;
                masks.push(crate::guidance::binarize(&map, *tau)?);
            }
            Some(masks)
        }
        _ => None,
    };

    let total_steps = config.epochs * dataset.len();
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut initial_loss = None;
    let mut final_loss = 0.0;
    for epoch in 0..config.epochs {
        shuffle(&mut order, &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for &idx in &order {
            let (image, _) = &dataset[idx];
            let (_, _, h, w) = image.shape();
            let mask = match source {
                TrainMaskSource::Dense => {
                    let (mh, mw) = GuidanceMask::grid_for_image(h, w, crate::mask::DEFAULT_CELL_SIZE);
                    GuidanceMask::new_true(mh, mw, crate::mask::DEFAULT_CELL_SIZE)
                }
                TrainMaskSource::GtSynthesis(cfg) => {
                    extend_mask_random(&gt_masks[idx], &cfg.for_draw(epoch, idx))
                }
                TrainMaskSource::Predicted(..) => predicted.as_ref().unwrap()[idx].clone(),
            };
            let views = project_views(&params, &mask, h, w)?;
            let fwd = detector_forward_cached(image, &params, &views)?;
            let (loss, grads) =
                detector_loss_and_backprop(image, &params, &fwd, &targets[idx], config.lambda)?;
            let lr = scheduled_lr(config.lr, step, total_steps);
            momentum.step(
                &mut params.layers_mut(),
                &grads,
                E::from_f64(lr),
                E::from_f64(config.momentum),
            );
            epoch_loss += loss;
            final_loss = loss;
            initial_loss.get_or_insert(loss);
            step += 1;
        }
        epoch_losses.push(epoch_loss / dataset.len() as f64);
    }
    Ok((
        params,
        TrainReport {
            epoch_losses,
            initial_loss: initial_loss.unwrap(),
            final_loss,
        },
    ))
}

/// Convenience: predict a mask, run the requested mode and decode.
pub fn detect<E: Element>(
    image: &Tensor<E>,
    params: &ToyDetectorParams<E>,
    guidance: Option<&GuidanceNetParams<E>>,
    mode: Mode,
    p: f64,
    score_thresh: f64,
    nms_iou: f64,
) -> Result<(Vec<crate::postprocess::Detection>, u64)> {
    let mask = match (mode, guidance) {
        (Mode::Dense, _) => None,
        (_, Some(net)) => Some(predict_mask(image, net)?),
        (_, None) => {
            return Err(Error::InvalidParam {
                name: "guidance",
                detail: "guided modes require a guidance net".into(),
            })
        }
    };
    let inference = detector_forward(image, params, mode, p, mask.as_ref())?;
    let dets = crate::postprocess::decode_and_nms(
        &inference.score,
        &inference.deltas,
        HEAD_STRIDE,
        score_thresh,
        nms_iou,
        if inference.decode_masked {
            Some(&inference.head_view)
        } else {
            None
        },
    );
    Ok((dets, inference.macs))
}

//! Guidance subnetwork: ground-truth mask construction from text boxes, a
//! small trainable feature stack, the 3-level pyramid context module,
//! cross-entropy training, threshold binarization and mask-quality metrics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::guided::{guided_conv2d_backward, ConvGrads};
use crate::layer::ConvLayer;
use crate::mask::{GuidanceMask, MaskView, DEFAULT_CELL_SIZE};
use crate::ops::{
    avg_pool2d, avg_pool2d_backward, crop, crop_backward, dense_conv2d, elementwise_add,
    l2_normalize_channels, l2_normalize_channels_backward, nearest_upsample,
    nearest_upsample_backward, relu, relu_backward, sigmoid_scalar,
};
use crate::tensor::Tensor;

/// Axis-aligned text box in input-pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(Error::InvalidParam {
                name: "bbox",
                detail: format!("non-finite coordinates ({x},{y},{w},{h})"),
            });
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidParam {
                name: "bbox",
                detail: format!("extents must be positive, got w={w}, h={h}"),
            });
        }
        Ok(BBox { x, y, w, h })
    }

    #[inline]
    pub fn x1(&self) -> f64 {
        self.x + self.w
    }
    #[inline]
    pub fn y1(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let ix = (self.x1().min(other.x1()) - self.x.max(other.x)).max(0.0);
        let iy = (self.y1().min(other.y1()) - self.y.max(other.y)).max(0.0);
        let inter = ix * iy;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

/// Ground-truth guidance mask: cell (y, x) is true iff the 32x32 rectangle
/// with top-left (32y - 16, 32x - 16), clipped to the image, has
/// positive-area intersection with any text box.
pub fn gt_mask_from_boxes(image_w: usize, image_h: usize, boxes: &[BBox]) -> GuidanceMask {
    let cell = DEFAULT_CELL_SIZE as f64;
    let half = cell / 2.0;
    let (grid_h, grid_w) = GuidanceMask::grid_for_image(image_h, image_w, DEFAULT_CELL_SIZE);
    let mut mask = GuidanceMask::new_false(grid_h, grid_w, DEFAULT_CELL_SIZE);
    for gy in 0..grid_h {
        let ry0 = (gy as f64 * cell - half).max(0.0);
        let ry1 = (gy as f64 * cell - half + cell).min(image_h as f64);
        if ry1 <= ry0 {
            continue;
        }
        for gx in 0..grid_w {
            let rx0 = (gx as f64 * cell - half).max(0.0);
            let rx1 = (gx as f64 * cell - half + cell).min(image_w as f64);
            if rx1 <= rx0 {
                continue;
            }
            let hit = boxes.iter().any(|b| {
                rx1.min(b.x1()) > rx0.max(b.x) && ry1.min(b.y1()) > ry0.max(b.y)
            });
            if hit {
                mask.set(gy, gx, true);
            }
        }
    }
    mask
}

/// Predicted guidance probabilities at the 1/32 grid, with the raw logits
/// they were computed from.
#[derive(Debug, Clone)]
pub struct GuidanceMap {
    h: usize,
    w: usize,
    logits: Vec<f64>,
    probabilities: Vec<f64>,
}

impl GuidanceMap {
    pub fn from_logits(h: usize, w: usize, logits: Vec<f64>) -> Self {
        assert_eq!(logits.len(), h * w);
        let probabilities = logits.iter().map(|&z| sigmoid_scalar(z)).collect();
        GuidanceMap {
            h,
            w,
            logits,
            probabilities,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.h
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.w
    }
    #[inline]
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }
    #[inline]
    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }
}

/// Binarize a guidance map with threshold tau in (0, 1): cell true iff
/// probability >= tau. Masks are nested decreasing in tau.
pub fn binarize(map: &GuidanceMap, tau: f64) -> Result<GuidanceMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidParam {
            name: "tau",
            detail: format!("must lie strictly inside (0,1), got {tau}"),
        });
    }
    let cells = map.probabilities.iter().map(|&p| p >= tau).collect();
    Ok(GuidanceMask::from_cells(
        map.h,
        map.w,
        DEFAULT_CELL_SIZE,
        cells,
    ))
}

/// Mean binary cross-entropy between logits and a boolean mask, plus the
/// gradient with respect to the logits: (sigmoid(z) - label) / N.
pub fn bce_loss_and_grad<E: Element>(
    logits: &Tensor<E>,
    gt: &GuidanceMask,
) -> Result<(f64, Tensor<E>)> {
    let (n, c, h, w) = logits.shape();
    if n != 1 || c != 1 || (h, w) != (gt.height(), gt.width()) {
        return Err(Error::ShapeMismatch {
            what: "bce",
            left: logits.shape_string(),
            right: format!("1x1x{}x{}", gt.height(), gt.width()),
        });
    }
    let count = (h * w) as f64;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(1, 1, h, w);
    for (i, (&z, &cell)) in logits.data().iter().zip(gt.cells()).enumerate() {
        let z = z.to_f64();
        let t = if cell { 1.0 } else { 0.0 };
        // stable form: max(z,0) - z*t + ln(1 + exp(-|z|))
        loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
        grad.data_mut()[i] = E::from_f64((sigmoid_scalar(z) - t) / count);
    }
    Ok((loss / count, grad))
}

/// Cell-level recall and precision of a predicted mask against ground truth.
/// Conventionally 1.0 when the denominator is zero.
pub fn mask_metrics(pred: &GuidanceMask, gt: &GuidanceMask) -> Result<(f64, f64)> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::ShapeMismatch {
            what: "mask_metrics",
            left: format!("{}x{}", pred.height(), pred.width()),
            right: format!("{}x{}", gt.height(), gt.width()),
        });
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &g) in pred.cells().iter().zip(gt.cells()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    Ok((recall, precision))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepPoint {
    pub tau: f64,
    pub recall: f64,
    pub precision: f64,
    pub area_ratio: f64,
}

/// Metrics and mask area ratio of one guidance map across thresholds. The
/// area ratio is the speedup proxy: idealized speedup is 1 / area_ratio.
pub fn pr_sweep(map: &GuidanceMap, gt: &GuidanceMask, taus: &[f64]) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::with_capacity(taus.len());
    for &tau in taus {
        let mask = binarize(map, tau)?;
        let (recall, precision) = mask_metrics(&mask, gt)?;
        out.push(SweepPoint {
            tau,
            recall,
            precision,
            area_ratio: mask.area_ratio(),
        });
    }
    Ok(out)
}

/// Sweep with counts pooled over a whole validation set.
pub fn pr_sweep_aggregate(
    pairs: &[(GuidanceMap, GuidanceMask)],
    taus: &[f64],
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::with_capacity(taus.len());
    for &tau in taus {
        let (mut tp, mut fp, mut fn_, mut true_cells, mut cells) = (0usize, 0, 0, 0usize, 0usize);
        for (map, gt) in pairs {
            let mask = binarize(map, tau)?;
            if (mask.height(), mask.width()) != (gt.height(), gt.width()) {
                return Err(Error::ShapeMismatch {
                    what: "pr_sweep_aggregate",
                    left: format!("{}x{}", mask.height(), mask.width()),
                    right: format!("{}x{}", gt.height(), gt.width()),
                });
            }
            for (&p, &g) in mask.cells().iter().zip(gt.cells()) {
                match (p, g) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                    _ => {}
                }
            }
            true_cells += mask.true_count();
            cells += mask.cells().len();
        }
        out.push(SweepPoint {
            tau,
            recall: if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 },
            precision: if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 },
            area_ratio: if cells == 0 { 0.0 } else { true_cells as f64 / cells as f64 },
        });
    }
    Ok(out)
}

/// Three per-level 1x1 predictors plus the shared normalization epsilon.
///
/// Level 1 predicts on normalized features directly; levels 2 and 3 pool by
/// 2x and 4x first and upsample their predictions back.
#[derive(Debug, Clone)]
pub struct ContextModuleParams<E: Element> {
    pub predictors: Vec<ConvLayer<E>>,
    pub epsilon: E,
}

impl<E: Element> ContextModuleParams<E> {
    pub fn init(in_channels: usize, epsilon: E, rng: &mut ChaCha8Rng) -> Self {
        let predictors = (0..3)
            .map(|_| init_conv(1, in_channels, 1, 1, 1, 0, rng))
            .collect();
        ContextModuleParams {
            predictors,
            epsilon,
        }
    }
}

/// Feature extractor plus context module plus binarization threshold.
///
/// The feature stack is five 3x3 stride-2 relu conv blocks
/// (1 -> 8 -> 16 -> 16 -> 32 -> 32), taking the input image to exactly the
/// 1/32 guidance grid.
#[derive(Debug, Clone)]
pub struct GuidanceNetParams<E: Element> {
    pub features: Vec<ConvLayer<E>>,
    pub context: ContextModuleParams<E>,
    pub tau: f64,
}

pub const GUIDANCE_FEATURE_CHANNELS: [usize; 5] = [8, 16, 16, 32, 32];

impl<E: Element> GuidanceNetParams<E> {
    pub fn init(tau: f64, epsilon: E, seed: u64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidParam {
                name: "tau",
                detail: format!("must lie strictly inside (0,1), got {tau}"),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = Vec::with_capacity(5);
        let mut in_ch = 1;
        for &out_ch in &GUIDANCE_FEATURE_CHANNELS {
            features.push(init_conv(out_ch, in_ch, 3, 3, 2, 1, &mut rng));
            in_ch = out_ch;
        }
        let context = ContextModuleParams::init(in_ch, epsilon, &mut rng);
        Ok(GuidanceNetParams {
            features,
            context,
            tau,
        })
    }

    pub fn all_layers(&self) -> Vec<&ConvLayer<E>> {
        self.features.iter().chain(self.context.predictors.iter()).collect()
    }

    pub fn all_layers_mut(&mut self) -> Vec<&mut ConvLayer<E>> {
        self.features
            .iter_mut()
            .chain(self.context.predictors.iter_mut())
            .collect()
    }

    pub fn cast<T: Element>(&self) -> GuidanceNetParams<T> {
        GuidanceNetParams {
            features: self.features.iter().map(|l| l.cast()).collect(),
            context: ContextModuleParams {
                predictors: self.context.predictors.iter().map(|l| l.cast()).collect(),
                epsilon: T::from_f64(self.context.epsilon.to_f64()),
            },
            tau: self.tau,
        }
    }

    /// Rebuild from the weight-file layer list (5 feature convs then 3
    /// predictors); strides and paddings are architectural.
    pub fn from_raw_layers(
        raw: Vec<(usize, usize, usize, usize, Vec<E>, Vec<E>)>,
        tau: f64,
        epsilon: E,
    ) -> Result<Self> {
        if raw.len() != 8 {
            return Err(Error::BadHeader {
                what: "guidance weights",
                detail: format!("expected 8 layers, found {}", raw.len()),
            });
        }
        let mut layers = Vec::with_capacity(8);
        for (i, (oc, ic, kh, kw, w, b)) in raw.into_iter().enumerate() {
            let (stride, padding) = if i < 5 { (2, 1) } else { (1, 0) };
            let weights = Tensor::from_vec(oc, ic, kh, kw, w)?;
            layers.push(ConvLayer::new(oc, ic, kh, kw, stride, padding, weights, b)?);
        }
        let mut expect_in = 1;
        for (i, layer) in layers.iter().take(5).enumerate() {
            if layer.in_channels != expect_in
                || layer.out_channels != GUIDANCE_FEATURE_CHANNELS[i]
                || layer.kernel_h != 3
            {
                return Err(Error::BadHeader {
                    what: "guidance weights",
                    detail: format!("feature layer {i} has unexpected shape"),
                });
            }
            expect_in = layer.out_channels;
        }
        for (i, layer) in layers.iter().skip(5).enumerate() {
            if layer.out_channels != 1 || layer.in_channels != expect_in || layer.kernel_h != 1 {
                return Err(Error::BadHeader {
                    what: "guidance weights",
                    detail: format!("predictor layer {i} has unexpected shape"),
                });
            }
        }
        let predictors = layers.split_off(5);
        Ok(GuidanceNetParams {
            features: layers,
            context: ContextModuleParams {
                predictors,
                epsilon,
            },
            tau,
        })
    }
}

/// He-uniform init: U(-limit, limit) with limit = sqrt(6 / fan_in).
pub(crate) fn init_conv<E: Element>(
    oc: usize,
    ic: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    rng: &mut ChaCha8Rng,
) -> ConvLayer<E> {
    let fan_in = (ic * kh * kw) as f64;
    let limit = (6.0 / fan_in).sqrt();
    let weights = Tensor::from_vec(
        oc,
        ic,
        kh,
        kw,
        (0..oc * ic * kh * kw)
            .map(|_| E::from_f64(rng.gen_range(-limit..limit)))
            .collect(),
    )
    .unwrap();
    ConvLayer::new(oc, ic, kh, kw, stride, padding, weights, vec![E::ZERO; oc]).unwrap()
}

/// Cached activations of one context-module forward pass.
pub struct ContextForward<E: Element> {
    pub logits: Tensor<E>,
    norm1: Tensor<E>,
    pooled2: Tensor<E>,
    norm2: Tensor<E>,
    pred2: Tensor<E>,
    pooled3: Tensor<E>,
    norm3: Tensor<E>,
    pred3: Tensor<E>,
}

/// Pyramid context module: per-level l2-normalize + 1x1 predict, with 2x/4x
/// average pooling and nearest upsampling on levels 2 and 3; level logits are
/// summed before the loss.
pub fn context_forward_cached<E: Element>(
    features: &Tensor<E>,
    params: &ContextModuleParams<E>,
) -> Result<ContextForward<E>> {
    let (_, _, h, w) = features.shape();
    let eps = params.epsilon;

    let norm1 = l2_normalize_channels(features, eps)?;
    let pred1 = dense_conv2d(&norm1, &params.predictors[0])?;

    let pooled2 = avg_pool2d(features, 2, 2)?;
    let norm2 = l2_normalize_channels(&pooled2, eps)?;
    let pred2 = dense_conv2d(&norm2, &params.predictors[1])?;
    let up2 = crop(&nearest_upsample(&pred2, 2)?, h, w)?;

    let pooled3 = avg_pool2d(&pooled2, 2, 2)?;
    let norm3 = l2_normalize_channels(&pooled3, eps)?;
    let pred3 = dense_conv2d(&norm3, &params.predictors[2])?;
    let up3 = crop(&nearest_upsample(&pred3, 4)?, h, w)?;

    let logits = elementwise_add(&elementwise_add(&pred1, &up2)?, &up3)?;
    Ok(ContextForward {
        logits,
        norm1,
        pooled2,
        norm2,
        pred2,
        pooled3,
        norm3,
        pred3,
    })
}

/// Guidance map from 1/32-scale features.
pub fn context_forward<E: Element>(
    features: &Tensor<E>,
    params: &ContextModuleParams<E>,
) -> Result<GuidanceMap> {
    let fwd = context_forward_cached(features, params)?;
    let (_, _, h, w) = fwd.logits.shape();
    let logits = fwd.logits.data().iter().map(|v| v.to_f64()).collect();
    Ok(GuidanceMap::from_logits(h, w, logits))
}

pub struct ContextGrads<E: Element> {
    pub features: Tensor<E>,
    pub predictors: Vec<ConvGrads<E>>,
}

pub fn context_backward<E: Element>(
    grad_logits: &Tensor<E>,
    features: &Tensor<E>,
    params: &ContextModuleParams<E>,
    fwd: &ContextForward<E>,
) -> Result<ContextGrads<E>> {
    let (_, _, h, w) = features.shape();
    let eps = params.epsilon;
    let full1 = MaskView::full(h, w);

    // level 1
    let g1 = guided_conv2d_backward(grad_logits, &fwd.norm1, &params.predictors[0], &full1)?;
    let mut grad_features = l2_normalize_channels_backward(&g1.input, features, eps);

    // level 2: sum -> crop -> upsample -> predict -> l2norm -> pool
    let (_, _, p2h, p2w) = fwd.pred2.shape();
    let g_up2 = crop_backward(grad_logits, p2h * 2, p2w * 2);
    let g_pred2 = nearest_upsample_backward(&g_up2, 2);
    let full2 = MaskView::full(p2h, p2w);
    let g2 = guided_conv2d_backward(&g_pred2, &fwd.norm2, &params.predictors[1], &full2)?;
    let g_pooled2 = l2_normalize_channels_backward(&g2.input, &fwd.pooled2, eps);

    // level 3: sum -> crop -> upsample -> predict -> l2norm -> pool -> pool
    let (_, _, p3h, p3w) = fwd.pred3.shape();
    let g_up3 = crop_backward(grad_logits, p3h * 4, p3w * 4);
    let g_pred3 = nearest_upsample_backward(&g_up3, 4);
    let full3 = MaskView::full(p3h, p3w);
    let g3 = guided_conv2d_backward(&g_pred3, &fwd.norm3, &params.predictors[2], &full3)?;
    let g_pooled3 = l2_normalize_channels_backward(&g3.input, &fwd.pooled3, eps);
    let (_, _, d2h, d2w) = fwd.pooled2.shape();
    let g_pooled2_from3 = avg_pool2d_backward(&g_pooled3, d2h, d2w, 2, 2);
    let g_pooled2_total = elementwise_add(&g_pooled2, &g_pooled2_from3)?;
    let g_feat_from_pool = avg_pool2d_backward(&g_pooled2_total, h, w, 2, 2);
    grad_features = elementwise_add(&grad_features, &g_feat_from_pool)?;

    Ok(ContextGrads {
        features: grad_features,
        predictors: vec![g1, g2, g3],
    })
}

/// Cached activations of the full guidance net (feature stack + context).
pub struct GuidanceForward<E: Element> {
    /// Pre-activation output of each feature conv.
    pre: Vec<Tensor<E>>,
    /// Post-relu output of each feature conv; the last is the context input.
    post: Vec<Tensor<E>>,
    pub context: ContextForward<E>,
}

impl<E: Element> GuidanceForward<E> {
    pub fn logits(&self) -> &Tensor<E> {
        &self.context.logits
    }
}

pub fn guidance_forward_cached<E: Element>(
    image: &Tensor<E>,
    params: &GuidanceNetParams<E>,
) -> Result<GuidanceForward<E>> {
    let mut pre = Vec::with_capacity(params.features.len());
    let mut post = Vec::with_capacity(params.features.len());
    let mut x = image.clone();
    for layer in &params.features {
        let z = dense_conv2d(&x, layer)?;
        x = relu(&z);
        pre.push(z);
        post.push(x.clone());
    }
    let context = context_forward_cached(&x, &params.context)?;
    Ok(GuidanceForward { pre, post, context })
}

/// Predict the guidance map for an image.
pub fn predict_guidance<E: Element>(
    image: &Tensor<E>,
    params: &GuidanceNetParams<E>,
) -> Result<GuidanceMap> {
    let fwd = guidance_forward_cached(image, params)?;
    let (_, _, h, w) = fwd.context.logits.shape();
    let logits = fwd.context.logits.data().iter().map(|v| v.to_f64()).collect();
    Ok(GuidanceMap::from_logits(h, w, logits))
}

/// Predict and binarize with the net's own threshold.
pub fn predict_mask<E: Element>(
    image: &Tensor<E>,
    params: &GuidanceNetParams<E>,
) -> Result<GuidanceMask> {
    binarize(&predict_guidance(image, params)?, params.tau)
}

/// Per-layer parameter gradients of the whole guidance net, ordered as
/// `all_layers` (5 feature convs then 3 predictors).
pub fn guidance_backward<E: Element>(
    grad_logits: &Tensor<E>,
    image: &Tensor<E>,
    params: &GuidanceNetParams<E>,
    fwd: &GuidanceForward<E>,
) -> Result<Vec<(Tensor<E>, Vec<E>)>> {
    let ctx_grads = context_backward(
        grad_logits,
        &fwd.post[fwd.post.len() - 1],
        &params.context,
        &fwd.context,
    )?;
    let mut grad = ctx_grads.features;
    let mut feature_grads: Vec<(Tensor<E>, Vec<E>)> = Vec::with_capacity(params.features.len());
    for (i, layer) in params.features.iter().enumerate().rev() {
        let grad_pre = relu_backward(&grad, &fwd.pre[i]);
        let input = if i == 0 { image } else { &fwd.post[i - 1] };
        let (_, _, oh, ow) = grad_pre.shape();
        let g = guided_conv2d_backward(&grad_pre, input, layer, &MaskView::full(oh, ow))?;
        grad = g.input;
        feature_grads.push((g.weights, g.bias));
    }
    feature_grads.reverse();
    let mut all = feature_grads;
    for g in ctx_grads.predictors {
        all.push((g.weights, g.bias));
    }
    Ok(all)
}

#[derive(Debug, Clone)]
pub struct GuidanceTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub tau: f64,
    pub epsilon: f64,
}

impl Default for GuidanceTrainConfig {
    fn default() -> Self {
        GuidanceTrainConfig {
            epochs: 6,
            lr: 0.01,
            momentum: 0.9,
            seed: 1,
            tau: 0.2,
            epsilon: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Mean loss per epoch, in epoch order.
    pub epoch_losses: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// SGD-with-momentum velocity buffers, one per layer.
pub(crate) struct Momentum<E: Element> {
    vel_w: Vec<Vec<E>>,
    vel_b: Vec<Vec<E>>,
}

impl<E: Element> Momentum<E> {
    pub(crate) fn for_layers(layers: &[&ConvLayer<E>]) -> Self {
        Momentum {
            vel_w: layers.iter().map(|l| vec![E::ZERO; l.weights.len()]).collect(),
            vel_b: layers.iter().map(|l| vec![E::ZERO; l.bias.len()]).collect(),
        }
    }

    pub(crate) fn step(
        &mut self,
        layers: &mut [&mut ConvLayer<E>],
        grads: &[(Tensor<E>, Vec<E>)],
        lr: E,
        momentum: E,
    ) {
        for (i, layer) in layers.iter_mut().enumerate() {
            let (gw, gb) = &grads[i];
            for ((w, v), &g) in layer
                .weights
                .data_mut()
                .iter_mut()
                .zip(self.vel_w[i].iter_mut())
                .zip(gw.data())
            {
                *v = momentum * *v - lr * g;
                *w += *v;
            }
            for ((b, v), &g) in layer.bias.iter_mut().zip(self.vel_b[i].iter_mut()).zip(gb) {
                *v = momentum * *v - lr * g;
                *b += *v;
            }
        }
    }
}

/// Learning rate schedule: base rate, decayed by 10x at 2/3 of total steps.
pub(crate) fn scheduled_lr(base: f64, step: usize, total_steps: usize) -> f64 {
    if step * 3 >= total_steps * 2 {
        base * 0.1
    } else {
        base
    }
}

/// Train the guidance net on (image, boxes) pairs with cross-entropy against
/// the ground-truth mask. Single-threaded and deterministic for a seed.
pub fn train_guidance<E: Element>(
    dataset: &[(Tensor<E>, Vec<BBox>)],
    config: &GuidanceTrainConfig,
) -> Result<(GuidanceNetParams<E>, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = GuidanceNetParams::<E>::init(config.tau, E::from_f64(config.epsilon), config.seed)?;
    let mut momentum = Momentum::for_layers(&params.all_layers());
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_STREAM);

    let gts: Vec<GuidanceMask> = dataset
        .iter()
        .map(|(img, boxes)| gt_mask_from_boxes(img.width(), img.height(), boxes))
        .collect();

    let total_steps = config.epochs * dataset.len();
    let mut step = 0;
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut initial_loss = None;
    let mut final_loss = 0.0;
    for _ in 0..config.epochs {
        shuffle(&mut order, &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for &idx in &order {
            let (image, _) = &dataset[idx];
            let fwd = guidance_forward_cached(image, &params)?;
            let (loss, grad_logits) = bce_loss_and_grad(fwd.logits(), &gts[idx])?;
            let grads = guidance_backward(&grad_logits, image, &params, &fwd)?;
            let lr = scheduled_lr(config.lr, step, total_steps);
            momentum.step(
                &mut params.all_layers_mut(),
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

/// Fisher-Yates with the given rng; kept local so training never touches a
/// global generator.
pub(crate) fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Keeps the shuffle stream independent of parameter-init draws, so dense
/// and synthesis-extended trainings see identical data orders for one seed.
pub(crate) const SHUFFLE_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

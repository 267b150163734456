//! Box decoding, greedy NMS and IoU-based detection evaluation.

use crate::element::Element;
use crate::guidance::BBox;
use crate::mask::MaskView;
use crate::ops::sigmoid_scalar;
use crate::tensor::Tensor;

/// One decoded box with its confidence in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

/// Decode per-cell boxes and run greedy NMS.
///
/// Cells with sigmoid(score) >= score_thresh emit a box from their center
/// and deltas (exp for sizes). When `decode_view` is given, only mask-true
/// cells are decoded; zero-filled background never emits. Output is sorted
/// by descending score, ties in row-major cell order.
pub fn decode_and_nms<E: Element>(
    score_map: &Tensor<E>,
    delta_map: &Tensor<E>,
    cell_stride: usize,
    score_thresh: f64,
    iou_thresh: f64,
    decode_view: Option<&MaskView>,
) -> Vec<Detection> {
    let (_, _, gh, gw) = score_map.shape();
    let mut candidates: Vec<Detection> = Vec::new();
    let stride = cell_stride as f64;
    for y in 0..gh {
        for x in 0..gw {
            if let Some(view) = decode_view {
                if !view.get(y, x) {
                    continue;
                }
            }
            let s = sigmoid_scalar(score_map.at(0, 0, y, x).to_f64());
            if s < score_thresh {
                continue;
            }
            let dx = delta_map.at(0, 0, y, x).to_f64();
            let dy = delta_map.at(0, 1, y, x).to_f64();
            let dw = delta_map.at(0, 2, y, x).to_f64();
            let dh = delta_map.at(0, 3, y, x).to_f64();
            let cx = (x as f64 + 0.5) * stride + stride * dx;
            let cy = (y as f64 + 0.5) * stride + stride * dy;
            let w = stride * dw.exp();
            let h = stride * dh.exp();
            candidates.push(Detection {
                bbox: BBox {
                    x: cx - w / 2.0,
                    y: cy - h / 2.0,
                    w,
                    h,
                },
                score: s,
            });
        }
    }
    // stable sort keeps row-major order among equal scores
    candidates.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    nms_greedy(&candidates, iou_thresh)
}

/// Greedy NMS over score-sorted detections: keep the best, suppress
/// everything overlapping it at IoU >= iou_thresh, repeat.
pub fn nms_greedy(sorted: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut keep: Vec<Detection> = Vec::new();
    let mut suppressed = vec![false; sorted.len()];
    for i in 0..sorted.len() {
        if suppressed[i] {
            continue;
        }
        keep.push(sorted[i]);
        for j in i + 1..sorted.len() {
            if !suppressed[j] && sorted[i].bbox.iou(&sorted[j].bbox) >= iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// Number of detections greedily matched one-to-one to ground truth at the
/// IoU threshold, in descending score order.
pub fn greedy_match_count(detections: &[Detection], gt: &[BBox], iou_thresh: f64) -> usize {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.partial_cmp(&detections[a].score).unwrap());
    let mut gt_matched = vec![false; gt.len()];
    let mut matched = 0usize;
    for &di in &order {
        let det = &detections[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gt.iter().enumerate() {
            if gt_matched[gi] {
                continue;
            }
            let iou = det.bbox.iou(g);
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            gt_matched[gi] = true;
            matched += 1;
        }
    }
    matched
}

/// Greedy one-to-one matching at the IoU threshold: recall, precision and
/// F-measure. Empty denominators count as 1.0; F is 0 when undefined.
pub fn evaluate(detections: &[Detection], gt: &[BBox], iou_thresh: f64) -> (f64, f64, f64) {
    let matched = greedy_match_count(detections, gt, iou_thresh);
    let recall = if gt.is_empty() { 1.0 } else { matched as f64 / gt.len() as f64 };
    let precision = if detections.is_empty() {
        1.0
    } else {
        matched as f64 / detections.len() as f64
    };
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (recall, precision, f)
}

/// Detections as `x,y,w,h,score` lines.
pub fn detections_to_string(detections: &[Detection]) -> String {
    let mut s = String::new();
    for d in detections {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h, d.score
        ));
    }
    s
}

//! Dataset construction, training drivers, strategy evaluation, the
//! four-strategy ablation and the tau/p sweep runners.

use guided_conv::detector::{
    dense_macs, detector_forward, train_detector, DetectorTrainConfig, ToyDetectorParams,
    TrainMaskSource, HEAD_STRIDE,
};
use guided_conv::guidance::{
    gt_mask_from_boxes, predict_guidance, train_guidance, BBox, GuidanceMap, GuidanceNetParams,
    GuidanceTrainConfig, SweepPoint, TrainReport,
};
use guided_conv::postprocess::{decode_and_nms, greedy_match_count};
use guided_conv::scene::{gen_dataset, pad_to_multiple};
use guided_conv::synthesis::{Mode, SynthesisConfig};
use guided_conv::Tensor;

use crate::config::Config;
use crate::csv::CsvWriter;
use crate::error::HarnessError;

pub type Item = (Tensor<f32>, Vec<BBox>);

/// Validation scenes draw from an independent stream of the data seed.
const VAL_STREAM: u64 = 0x85eb_ca6b_27d4_eb4f;

pub fn build_datasets(cfg: &Config) -> Result<(Vec<Item>, Vec<Item>), HarnessError> {
    let train = build_split(cfg, cfg.data.train_count, cfg.data.seed)?;
    let val = build_split(cfg, cfg.data.val_count, cfg.data.seed ^ VAL_STREAM)?;
    Ok((train, val))
}

pub fn build_split(cfg: &Config, count: usize, seed: u64) -> Result<Vec<Item>, HarnessError> {
    let items = gen_dataset::<f32>(
        count,
        cfg.image.width,
        cfg.image.height,
        cfg.scene.box_count_min,
        cfg.scene.box_count_max,
        cfg.scene.stripe_period,
        cfg.scene.noise_level,
        seed,
    )?;
    // detector and guidance grids assume multiples of 32
    Ok(items
        .into_iter()
        .map(|(img, boxes)| (pad_to_multiple(&img, 32), boxes))
        .collect())
}

pub fn guidance_train_config(cfg: &Config) -> GuidanceTrainConfig {
    GuidanceTrainConfig {
        epochs: cfg.guidance.epochs,
        lr: cfg.guidance.lr,
        momentum: cfg.guidance.momentum,
        seed: cfg.guidance.seed,
        tau: cfg.guidance.tau,
        epsilon: cfg.guidance.epsilon,
    }
}

pub fn detector_train_config(cfg: &Config) -> DetectorTrainConfig {
    DetectorTrainConfig {
        epochs: cfg.detector.epochs,
        lr: cfg.detector.lr,
        momentum: cfg.detector.momentum,
        seed: cfg.detector.seed,
        lambda: cfg.detector.lambda,
    }
}

pub fn train_guidance_net(
    cfg: &Config,
    train: &[Item],
) -> Result<(GuidanceNetParams<f32>, TrainReport), HarnessError> {
    Ok(train_guidance(train, &guidance_train_config(cfg))?)
}

/// Aggregate detection quality and MAC accounting of one detector/mode pair
/// over a validation split. Counts are pooled across images before rates are
/// computed.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub recall: f64,
    pub precision: f64,
    pub f_measure: f64,
    /// Sum of primary-detector MACs over the split.
    pub macs: u64,
    /// Same-architecture dense MAC budget over the split.
    pub dense_macs: u64,
}

impl EvalSummary {
    pub fn mac_ratio(&self) -> f64 {
        self.macs as f64 / self.dense_macs as f64
    }

    /// MAC reduction factor (>= 1 means cheaper than dense).
    pub fn mac_reduction(&self) -> f64 {
        self.dense_macs as f64 / self.macs as f64
    }
}

/// Grow a mask by a Chebyshev radius in mask cells; the config knob for
/// users who want a receptive-field margin around predicted masks.
pub fn dilate_mask(mask: &guided_conv::GuidanceMask, radius: usize) -> guided_conv::GuidanceMask {
    if radius == 0 {
        return mask.clone();
    }
    let view = guided_conv::MaskView::from_cells(mask.height(), mask.width(), mask.cells().to_vec());
    let grown = guided_conv::mask::mask_dilate(&view, radius);
    guided_conv::GuidanceMask::from_cells(
        mask.height(),
        mask.width(),
        mask.cell_size(),
        grown.cells().to_vec(),
    )
}

pub fn evaluate_detector(
    cfg: &Config,
    val: &[Item],
    detector: &ToyDetectorParams<f32>,
    guidance: Option<&GuidanceNetParams<f32>>,
    mode: Mode,
    p: f64,
) -> Result<EvalSummary, HarnessError> {
    let mut matched = 0usize;
    let mut det_count = 0usize;
    let mut gt_count = 0usize;
    let mut macs = 0u64;
    let mut dense_total = 0u64;
    for (image, boxes) in val {
        let mask = match (mode, guidance) {
            (Mode::Dense, _) => None,
            (_, Some(net)) => Some(dilate_mask(
                &guided_conv::guidance::predict_mask(image, net)?,
                cfg.eval.mask_dilate_radius,
            )),
            (_, None) => {
                return Err(HarnessError::BadConfig {
                    detail: "guided evaluation requires a guidance net".into(),
                })
            }
        };
        let inference = detector_forward(image, detector, mode, p, mask.as_ref())?;
        let dets = decode_and_nms(
            &inference.score,
            &inference.deltas,
            HEAD_STRIDE,
            cfg.eval.score_thresh,
            cfg.eval.nms_iou,
            if inference.decode_masked {
                Some(&inference.head_view)
            } else {
                None
            },
        );
        matched += greedy_match_count(&dets, boxes, cfg.eval.match_iou);
        det_count += dets.len();
        gt_count += boxes.len();
        macs += inference.macs;
        let (_, _, h, w) = image.shape();
        dense_total += dense_macs(detector, h, w)?;
    }
    let recall = if gt_count == 0 { 1.0 } else { matched as f64 / gt_count as f64 };
    let precision = if det_count == 0 { 1.0 } else { matched as f64 / det_count as f64 };
    let f_measure = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(EvalSummary {
        recall,
        precision,
        f_measure,
        macs,
        dense_macs: dense_total,
    })
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub strategy: &'static str,
    pub summary: EvalSummary,
}

#[derive(Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Soft qualitative check: gt_synthesis >= retrain_predicted >=
    /// apply_no_retrain in F-measure.
    pub ordering_ok: bool,
}

pub const ABLATION_STRATEGIES: [&str; 5] = [
    "dense",
    "apply_mask_no_retrain",
    "retrain_predicted",
    "gt_synthesis_guided",
    "gt_synthesis_guided_plus",
];

/// Train and evaluate the five strategies on one (train, val) split pair.
pub fn run_ablation(cfg: &Config, train: &[Item], val: &[Item]) -> Result<AblationReport, HarnessError> {
    let (guidance, _) = train_guidance_net(cfg, train)?;
    let dt = detector_train_config(cfg);
    let syn = SynthesisConfig::new(cfg.synthesis.p, cfg.synthesis.seed)?;

    let (dense_det, _) = train_detector(train, &dt, &TrainMaskSource::Dense)?;
    let (pg_det, _) = train_detector(
        train,
        &dt,
        &TrainMaskSource::Predicted(&guidance, cfg.guidance.tau),
    )?;
    let (gts_det, _) = train_detector(train, &dt, &TrainMaskSource::GtSynthesis(syn))?;

    let rows = vec![
        AblationRow {
            strategy: ABLATION_STRATEGIES[0],
            summary: evaluate_detector(cfg, val, &dense_det, None, Mode::Dense, 0.0)?,
        },
        AblationRow {
            strategy: ABLATION_STRATEGIES[1],
            summary: evaluate_detector(cfg, val, &dense_det, Some(&guidance), Mode::Guided, 0.0)?,
        },
        AblationRow {
            strategy: ABLATION_STRATEGIES[2],
            summary: evaluate_detector(cfg, val, &pg_det, Some(&guidance), Mode::Guided, 0.0)?,
        },
        AblationRow {
            strategy: ABLATION_STRATEGIES[3],
            summary: evaluate_detector(cfg, val, &gts_det, Some(&guidance), Mode::Guided, 0.0)?,
        },
        AblationRow {
            strategy: ABLATION_STRATEGIES[4],
            summary: evaluate_detector(
                cfg,
                val,
                &gts_det,
                Some(&guidance),
                Mode::GuidedPlus,
                cfg.synthesis.p,
            )?,
        },
    ];
    let ordering_ok = rows[3].summary.f_measure >= rows[2].summary.f_measure
        && rows[2].summary.f_measure >= rows[1].summary.f_measure;
    Ok(AblationReport { rows, ordering_ok })
}

pub fn ablation_to_csv(report: &AblationReport) -> String {
    let mut w = CsvWriter::new(&["strategy", "recall", "precision", "f_measure", "mac_reduction"]);
    for row in &report.rows {
        w.row([
            row.strategy.to_string(),
            format!("{}", row.summary.recall),
            format!("{}", row.summary.precision),
            format!("{}", row.summary.f_measure),
            format!("{:.4}", row.summary.mac_reduction()),
        ]);
    }
    w.finish()
}

/// Guidance maps and ground-truth masks for a split.
pub fn guidance_pairs(
    net: &GuidanceNetParams<f32>,
    split: &[Item],
) -> Result<Vec<(GuidanceMap, guided_conv::GuidanceMask)>, HarnessError> {
    let mut pairs = Vec::with_capacity(split.len());
    for (image, boxes) in split {
        let map = predict_guidance(image, net)?;
        let gt = gt_mask_from_boxes(image.width(), image.height(), boxes);
        pairs.push((map, gt));
    }
    Ok(pairs)
}

/// Aggregate tau sweep over a validation split.
pub fn run_tau_sweep(
    cfg: &Config,
    guidance: &GuidanceNetParams<f32>,
    val: &[Item],
) -> Result<Vec<SweepPoint>, HarnessError> {
    let pairs = guidance_pairs(guidance, val)?;
    Ok(guided_conv::guidance::pr_sweep_aggregate(&pairs, &cfg.sweep.taus)?)
}

pub fn tau_sweep_to_csv(points: &[SweepPoint]) -> String {
    let mut w = CsvWriter::new(&["tau", "recall", "precision", "area_ratio"]);
    for p in points {
        w.row([
            format!("{}", p.tau),
            format!("{}", p.recall),
            format!("{}", p.precision),
            format!("{}", p.area_ratio),
        ]);
    }
    w.finish()
}

#[derive(Debug, Clone)]
pub struct PSweepRow {
    pub p: f64,
    pub f_dense: f64,
    pub f_guided: f64,
    pub f_guided_plus: f64,
    pub mac_ratio_guided: f64,
}

/// For each synthesis probability, retrain the detector with GT+synthesis
/// at that p and evaluate both test treatments (hard zeroing and scale-by-p)
/// against the shared dense baseline.
pub fn run_p_sweep(
    cfg: &Config,
    train: &[Item],
    val: &[Item],
    guidance: &GuidanceNetParams<f32>,
) -> Result<Vec<PSweepRow>, HarnessError> {
    let dt = detector_train_config(cfg);
    let (dense_det, _) = train_detector(train, &dt, &TrainMaskSource::Dense)?;
    let dense = evaluate_detector(cfg, val, &dense_det, None, Mode::Dense, 0.0)?;
    let mut rows = Vec::with_capacity(cfg.sweep.ps.len());
    for &p in &cfg.sweep.ps {
        let syn = SynthesisConfig::new(p, cfg.synthesis.seed)?;
        let (det, _) = train_detector(train, &dt, &TrainMaskSource::GtSynthesis(syn))?;
        let guided = evaluate_detector(cfg, val, &det, Some(guidance), Mode::Guided, 0.0)?;
        let plus = evaluate_detector(cfg, val, &det, Some(guidance), Mode::GuidedPlus, p)?;
        rows.push(PSweepRow {
            p,
            f_dense: dense.f_measure,
            f_guided: guided.f_measure,
            f_guided_plus: plus.f_measure,
            mac_ratio_guided: guided.mac_ratio(),
        });
    }
    Ok(rows)
}

pub fn p_sweep_to_csv(rows: &[PSweepRow]) -> String {
    let mut w = CsvWriter::new(&["p", "f_dense", "f_guided", "f_guided_plus", "mac_ratio_guided"]);
    for r in rows {
        w.row([
            format!("{}", r.p),
            format!("{}", r.f_dense),
            format!("{}", r.f_guided),
            format!("{}", r.f_guided_plus),
            format!("{}", r.mac_ratio_guided),
        ]);
    }
    w.finish()
}

/// Per-image text-area and ground-truth mask statistics.
pub fn mask_stats_csv(split: &[Item]) -> String {
    let mut w = CsvWriter::new(&["image", "text_area_ratio", "gt_mask_area_ratio"]);
    for (i, (image, boxes)) in split.iter().enumerate() {
        let (_, _, h, wd) = image.shape();
        let text_ratio = boxes.iter().map(|b| b.area()).sum::<f64>() / (h * wd) as f64;
        let gt = gt_mask_from_boxes(wd, h, boxes);
        w.row([
            format!("{i}"),
            format!("{}", text_ratio),
            format!("{}", gt.area_ratio()),
        ]);
    }
    w.finish()
}

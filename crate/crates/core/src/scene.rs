//! Synthetic sparse-text scene generation.
//!
//! Scenes are noisy grayscale backgrounds with striped rectangles standing
//! in for text lines. The text-area ratio is drawn from one of five buckets,
//! (0,10%] through (40,50%], and datasets sample buckets with weights
//! 57/21/11/6/5 so that text stays sparse on average.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::guidance::BBox;
use crate::tensor::Tensor;

pub const BUCKET_WEIGHTS: [u32; 5] = [57, 21, 11, 6, 5];
/// Smallest generated box side. Kept above one mask cell (32 px) so that a
/// box always overlaps the offset ground-truth cell rectangle of at least
/// one of its positive head cells; sub-cell text would be invisible to a
/// floor-projected mask even when the mask rule marks it.
pub const MIN_BOX_DIM: usize = 34;
/// Largest box side as a fraction of the smaller image side.
pub const MAX_BOX_FRAC: f64 = 0.45;
/// Absolute cap on box side: boxes must fit inside the toy detector's
/// receptive field (about 63 px at the head) for per-cell regression to see
/// both edges.
pub const MAX_BOX_PX: usize = 56;
/// Minimum gap between placed boxes, in pixels.
const BOX_MARGIN: usize = 4;
/// Separate stream for background noise so boxes can be re-rendered onto an
/// identical background from the annotations alone.
const BACKGROUND_STREAM: u64 = 0x6a09_e667_f3bc_c908;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Text-area ratio bucket, 0..=4 for (0,10%] .. (40,50%].
    pub bucket: usize,
    pub box_count_min: usize,
    pub box_count_max: usize,
    /// Full light/dark stripe period of the text texture, in rows.
    pub stripe_period: usize,
    /// Peak amplitude of the uniform background noise.
    pub noise_level: f64,
    pub seed: u64,
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        if self.bucket >= BUCKET_WEIGHTS.len() {
            return Err(Error::InvalidParam {
                name: "scene.bucket",
                detail: format!("must be 0..={}, got {}", BUCKET_WEIGHTS.len() - 1, self.bucket),
            });
        }
        if self.box_count_min == 0 || self.box_count_min > self.box_count_max {
            return Err(Error::InvalidParam {
                name: "scene.box_count",
                detail: format!("bad range {}..={}", self.box_count_min, self.box_count_max),
            });
        }
        let min_side = (MIN_BOX_DIM as f64 / MAX_BOX_FRAC).ceil() as usize;
        if self.width < min_side || self.height < min_side {
            return Err(Error::InvalidParam {
                name: "scene.size",
                detail: format!(
                    "image {}x{} too small for {MIN_BOX_DIM} px boxes (need >= {min_side})",
                    self.width, self.height
                ),
            });
        }
        Ok(())
    }
}

fn max_box_dim(spec: &SceneSpec) -> usize {
    (((spec.width.min(spec.height) as f64) * MAX_BOX_FRAC) as usize).min(MAX_BOX_PX)
}

/// Deterministic scene: background noise from the seed's background stream,
/// striped boxes stamped on top. Rendering depends only on (spec, boxes), so
/// annotations reproduce the image exactly.
pub fn render_scene<E: Element>(spec: &SceneSpec, boxes: &[BBox]) -> Tensor<E> {
    let (w, h) = (spec.width, spec.height);
    let mut bg_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ BACKGROUND_STREAM);
    let mut data: Vec<E> = (0..h * w)
        .map(|_| E::from_f64(bg_rng.gen_range(0.0..1.0) * spec.noise_level))
        .collect();
    let half = (spec.stripe_period / 2).max(1);
    for b in boxes {
        let (x0, y0) = (b.x as usize, b.y as usize);
        let (x1, y1) = ((b.x + b.w) as usize, (b.y + b.h) as usize);
        for y in y0..y1.min(h) {
            let bright = ((y - y0) / half) % 2 == 0;
            let v = E::from_f64(if bright { 0.9 } else { 0.1 });
            for x in x0..x1.min(w) {
                data[y * w + x] = v;
            }
        }
    }
    Tensor::from_vec(1, 1, h, w, data).unwrap()
}

fn boxes_overlap(a: &BBox, b: &BBox, margin: f64) -> bool {
    a.x - margin < b.x1() && b.x - margin < a.x1() && a.y - margin < b.y1() && b.y - margin < a.y1()
}

/// Generate one scene: image plus box annotations.
///
/// The realized text-area ratio lands within 0.05 absolute of a target drawn
/// from the spec's bucket; unreachable targets (given the box-count range
/// and size limits) produce an explicit error.
pub fn gen_scene<E: Element>(spec: &SceneSpec) -> Result<(Tensor<E>, Vec<BBox>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total_area = (spec.width * spec.height) as f64;
    let max_dim = max_box_dim(spec);
    let max_ratio = (spec.box_count_max * max_dim * max_dim) as f64 / total_area;
    let min_ratio = (spec.box_count_min * MIN_BOX_DIM * MIN_BOX_DIM) as f64 / total_area;
    let bucket_lo = spec.bucket as f64 * 0.1;
    let bucket_hi = bucket_lo + 0.1;
    // the realized ratio may sit up to 0.05 from the target, so targets may
    // reach slightly past the realizable ratio range
    let lo = bucket_lo.max(min_ratio - 0.045);
    let hi = bucket_hi.min(max_ratio + 0.045);
    if lo >= hi {
        return Err(Error::InfeasibleScene {
            detail: format!(
                "bucket ({bucket_lo:.2},{bucket_hi:.2}] unreachable: feasible ratio range \
                 [{min_ratio:.3},{max_ratio:.3}] with {}..={} boxes of {MIN_BOX_DIM}..={max_dim} px",
                spec.box_count_min, spec.box_count_max
            ),
        });
    }
    let target = rng.gen_range(lo..hi).max(bucket_lo + 1e-6);

    for _attempt in 0..400 {
        let n_boxes = rng.gen_range(spec.box_count_min..=spec.box_count_max);
        let weights: Vec<f64> = (0..n_boxes).map(|_| rng.gen_range(0.5..1.5)).collect();
        let weight_sum: f64 = weights.iter().sum();
        let mut placed: Vec<BBox> = Vec::with_capacity(n_boxes);
        for &wgt in &weights {
            let area = target * total_area * wgt / weight_sum;
            let aspect = rng.gen_range(0.5..2.0);
            let bw = ((area * aspect).sqrt() as usize).clamp(MIN_BOX_DIM, max_dim);
            let bh = ((area / bw as f64) as usize).clamp(MIN_BOX_DIM, max_dim);
            let mut ok = false;
            for _try in 0..80 {
                let x = rng.gen_range(1..spec.width.saturating_sub(bw + 1)) as f64;
                let y = rng.gen_range(1..spec.height.saturating_sub(bh + 1)) as f64;
                let cand = BBox {
                    x,
                    y,
                    w: bw as f64,
                    h: bh as f64,
                };
                if placed.iter().all(|p| !boxes_overlap(p, &cand, BOX_MARGIN as f64)) {
                    placed.push(cand);
                    ok = true;
                    break;
                }
            }
            if !ok {
                break;
            }
        }
        if placed.len() != n_boxes {
            continue;
        }
        let realized: f64 = placed.iter().map(|b| b.area()).sum::<f64>() / total_area;
        if (realized - target).abs() <= 0.05 {
            return Ok((render_scene(spec, &placed), placed));
        }
    }
    Err(Error::InfeasibleScene {
        detail: format!(
            "could not place boxes for target ratio {target:.3} within 400 attempts"
        ),
    })
}

/// Weighted bucket choice following the sparsity histogram.
pub fn sample_bucket(rng: &mut ChaCha8Rng) -> usize {
    let total: u32 = BUCKET_WEIGHTS.iter().sum();
    let mut v = rng.gen_range(0..total);
    for (i, &w) in BUCKET_WEIGHTS.iter().enumerate() {
        if v < w {
            return i;
        }
        v -= w;
    }
    BUCKET_WEIGHTS.len() - 1
}

/// Generate a dataset of scenes with bucket-weighted sparsity.
pub fn gen_dataset<E: Element>(
    count: usize,
    width: usize,
    height: usize,
    box_count_min: usize,
    box_count_max: usize,
    stripe_period: usize,
    noise_level: f64,
    seed: u64,
) -> Result<Vec<(Tensor<E>, Vec<BBox>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let bucket = sample_bucket(&mut rng);
        let scene_seed = rng.gen::<u64>();
        let spec = SceneSpec {
            width,
            height,
            bucket,
            box_count_min,
            box_count_max,
            stripe_period,
            noise_level,
            seed: scene_seed,
        };
        out.push(gen_scene(&spec)?);
    }
    Ok(out)
}

/// Zero-pad an image tensor on the bottom/right to multiples of `multiple`.
pub fn pad_to_multiple<E: Element>(image: &Tensor<E>, multiple: usize) -> Tensor<E> {
    let (n, c, h, w) = image.shape();
    let ph = (h + multiple - 1) / multiple * multiple;
    let pw = (w + multiple - 1) / multiple * multiple;
    if (ph, pw) == (h, w) {
        return image.clone();
    }
    let mut out = Tensor::zeros(n, c, ph, pw);
    for ni in 0..n {
        for ci in 0..c {
            let src = image.plane(ni, ci);
            let dst = out.plane_mut(ni, ci);
            for y in 0..h {
                dst[y * pw..y * pw + w].copy_from_slice(&src[y * w..(y + 1) * w]);
            }
        }
    }
    out
}

//! Wall-clock benchmark of the dense vs guided convolution paths, plus the
//! end-to-end guidance/detector runtime split.

use std::time::Instant;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use guided_conv::detector::{detector_forward, ToyDetectorParams};
use guided_conv::guidance::{predict_mask, GuidanceNetParams};
use guided_conv::guided::{flop_count, guided_conv2d};
use guided_conv::layer::ConvLayer;
use guided_conv::mask::MaskView;
use guided_conv::ops::dense_conv2d;
use guided_conv::scene::{gen_scene, SceneSpec};
use guided_conv::synthesis::{scale_background, Mode};
use guided_conv::{Result, Tensor};

use crate::config::{BenchConfig, Config};
use crate::csv::CsvWriter;

#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub layer: String,
    pub mode: String,
    /// Mask area ratio driving the computation (1.0 for dense).
    pub ratio: f64,
    pub threads: usize,
    pub macs: u64,
    /// Median wall time over the configured runs; non-deterministic.
    pub wall_ns: u64,
    /// Dense median / this median for the same layer and threads;
    /// non-deterministic.
    pub speedup: f64,
}

pub const BENCH_CSV_HEADER: [&str; 7] =
    ["layer", "mode", "ratio", "threads", "macs", "wall_ns", "speedup"];
/// Columns that are legitimately non-deterministic across reruns.
pub const TIMING_COLUMNS: [&str; 2] = ["wall_ns", "speedup"];

/// Median wall time of `runs` executions after `warmup` discarded ones.
pub fn median_time_ns<F: FnMut()>(warmup: usize, runs: usize, mut f: F) -> u64 {
    for _ in 0..warmup {
        f();
    }
    let mut samples: Vec<u64> = (0..runs.max(1))
        .map(|_| {
            let t0 = Instant::now();
            f();
            t0.elapsed().as_nanos() as u64
        })
        .collect();
    samples.sort_unstable();
    samples[samples.len() / 2]
}

/// Mask view with an exact true-cell count: round(ratio * cells) cells
/// chosen by a seeded shuffle.
pub fn view_with_ratio(h: usize, w: usize, ratio: f64, seed: u64) -> MaskView {
    let cells = h * w;
    let want = (ratio * cells as f64).round() as usize;
    let mut order: Vec<usize> = (0..cells).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut mask = vec![false; cells];
    for &i in order.iter().take(want) {
        mask[i] = true;
    }
    MaskView::from_cells(h, w, mask)
}

fn bench_layer(cfg: &BenchConfig) -> (Tensor<f32>, ConvLayer<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = cfg.channels;
    let n = cfg.size;
    let input = Tensor::from_vec(
        1,
        c,
        n,
        n,
        (0..c * n * n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let k = cfg.kernel;
    let weights = Tensor::from_vec(
        c,
        c,
        k,
        k,
        (0..c * c * k * k).map(|_| rng.gen_range(-0.2..0.2)).collect(),
    )
    .unwrap();
    let bias = (0..c).map(|_| rng.gen_range(-0.2..0.2)).collect();
    let layer = ConvLayer::new(c, c, k, k, 1, k / 2, weights, bias).unwrap();
    (input, layer)
}

/// Times the dense path once per thread count and the guided path at every
/// requested ratio; guided-plus (dense compute + background scaling) is
/// reported as well so its slowdown is visible rather than implied.
pub fn run_bench(cfg: &BenchConfig) -> Result<Vec<BenchRecord>> {
    let (input, layer) = bench_layer(cfg);
    let (h, w) = (cfg.size, cfg.size);
    let layer_name = format!(
        "conv{}x{}_{}to{}_{}x{}",
        cfg.kernel, cfg.kernel, cfg.channels, cfg.channels, cfg.size, cfg.size
    );
    let dense_macs = flop_count(&layer, h, w, None);
    let mut records = Vec::new();
    for &threads in &cfg.threads {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool");
        let dense_ns = pool.install(|| {
            median_time_ns(cfg.warmup, cfg.runs, || {
                std::hint::black_box(dense_conv2d(&input, &layer).unwrap());
            })
        });
        records.push(BenchRecord {
            layer: layer_name.clone(),
            mode: "dense".into(),
            ratio: 1.0,
            threads,
            macs: dense_macs,
            wall_ns: dense_ns,
            speedup: 1.0,
        });
        for (ri, &ratio) in cfg.ratios.iter().enumerate() {
            let view = view_with_ratio(h, w, ratio, cfg.seed ^ (ri as u64 + 1));
            let macs = flop_count(&layer, h, w, Some(&view));
            let guided_ns = pool.install(|| {
                median_time_ns(cfg.warmup, cfg.runs, || {
                    std::hint::black_box(guided_conv2d(&input, &layer, &view).unwrap());
                })
            });
            records.push(BenchRecord {
                layer: layer_name.clone(),
                mode: "guided".into(),
                ratio: view.area_ratio(),
                threads,
                macs,
                wall_ns: guided_ns,
                speedup: dense_ns as f64 / guided_ns as f64,
            });
            let plus_ns = pool.install(|| {
                median_time_ns(cfg.warmup, cfg.runs, || {
                    let out = dense_conv2d(&input, &layer).unwrap();
                    std::hint::black_box(scale_background(&out, &view, 0.8).unwrap());
                })
            });
            records.push(BenchRecord {
                layer: layer_name.clone(),
                mode: "guided_plus".into(),
                ratio: view.area_ratio(),
                threads,
                macs: dense_macs,
                wall_ns: plus_ns,
                speedup: dense_ns as f64 / plus_ns as f64,
            });
        }
    }
    Ok(records)
}

pub fn records_to_csv(records: &[BenchRecord]) -> String {
    let mut w = CsvWriter::new(&BENCH_CSV_HEADER);
    for r in records {
        w.row([
            r.layer.clone(),
            r.mode.clone(),
            format!("{}", r.ratio),
            format!("{}", r.threads),
            format!("{}", r.macs),
            format!("{}", r.wall_ns),
            format!("{:.4}", r.speedup),
        ]);
    }
    w.finish()
}

#[derive(Debug, Clone)]
pub struct RuntimeSplit {
    pub guidance_ns: u64,
    pub detector_ns: u64,
}

impl RuntimeSplit {
    pub fn guidance_fraction(&self) -> f64 {
        self.guidance_ns as f64 / (self.guidance_ns + self.detector_ns) as f64
    }
}

/// End-to-end split: guidance subnetwork (predict + binarize) vs guided
/// primary detector, on one synthetic scene.
pub fn runtime_split(
    config: &Config,
    guidance: &GuidanceNetParams<f32>,
    detector: &ToyDetectorParams<f32>,
) -> Result<RuntimeSplit> {
    let spec = SceneSpec {
        width: config.image.width,
        height: config.image.height,
        bucket: 1,
        box_count_min: config.scene.box_count_min,
        box_count_max: config.scene.box_count_max,
        stripe_period: config.scene.stripe_period,
        noise_level: config.scene.noise_level,
        seed: config.bench.seed,
    };
    let (image, _) = gen_scene::<f32>(&spec)?;
    let mask = predict_mask(&image, guidance)?;
    let guidance_ns = median_time_ns(config.bench.warmup, config.bench.runs, || {
        std::hint::black_box(predict_mask(&image, guidance).unwrap());
    });
    let detector_ns = median_time_ns(config.bench.warmup, config.bench.runs, || {
        std::hint::black_box(
            detector_forward(&image, detector, Mode::Guided, 0.0, Some(&mask)).unwrap(),
        );
    });
    Ok(RuntimeSplit {
        guidance_ns,
        detector_ns,
    })
}

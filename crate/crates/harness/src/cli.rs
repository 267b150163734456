//! Subcommand dispatch. Every failure prints one machine-parsable line
//! (`error: <kind>: <detail>`) and exits nonzero.

use std::fs;
use std::path::{Path, PathBuf};

use guided_conv::detector::{train_detector, ToyDetectorParams, TrainMaskSource};
use guided_conv::guidance::{predict_mask, GuidanceNetParams};
use guided_conv::io::{
    boxes_to_string, mask_to_pgm, read_boxes, weights_from_bytes, write_weights,
};
use guided_conv::postprocess::{detections_to_string, evaluate, Detection};
use guided_conv::scene::pad_to_multiple;
use guided_conv::synthesis::{Mode, SynthesisConfig};

use crate::bench::{records_to_csv, run_bench, runtime_split};
use crate::config::Config;
use crate::csv::CsvWriter;
use crate::error::HarnessError;
use crate::experiment::{
    ablation_to_csv, build_datasets, detector_train_config, dilate_mask, mask_stats_csv,
    p_sweep_to_csv, run_ablation, run_p_sweep, run_tau_sweep, tau_sweep_to_csv,
    train_guidance_net, Item,
};
use crate::images::load_image;

pub const USAGE: &str = "usage: guidedconv <subcommand> [--config PATH] [--seed N] [--threads N] [--out DIR] [...]
subcommands: gen-data train-guidance train-detector detect eval bench ablate sweep mask-stats";

struct Flags {
    pairs: Vec<(String, String)>,
}

impl Flags {
    fn parse(args: &[String]) -> Result<Flags, HarnessError> {
        let mut pairs = Vec::new();
        let mut i = 0;
        while i < args.len() {
            let name = &args[i];
            if !name.starts_with("--") {
                return Err(HarnessError::BadFlag {
                    detail: format!("expected a --flag, got {name:?}"),
                });
            }
            let value = args.get(i + 1).ok_or_else(|| HarnessError::BadFlag {
                detail: format!("flag {name} is missing its value"),
            })?;
            pairs.push((name[2..].to_string(), value.clone()));
            i += 2;
        }
        Ok(Flags { pairs })
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.pairs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
    }

    fn ensure_known(&self, known: &[&str]) -> Result<(), HarnessError> {
        for (n, _) in &self.pairs {
            if !known.contains(&n.as_str()) {
                return Err(HarnessError::BadFlag {
                    detail: format!("unknown flag --{n}"),
                });
            }
        }
        Ok(())
    }
}

const GLOBAL_FLAGS: [&str; 4] = ["config", "seed", "threads", "out"];

fn load_config(flags: &Flags) -> Result<Config, HarnessError> {
    let mut cfg = match flags.get("config") {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = flags.get("seed") {
        cfg.data.seed = seed.parse().map_err(|_| HarnessError::BadFlag {
            detail: format!("bad --seed value {seed:?}"),
        })?;
    }
    if let Some(threads) = flags.get("threads") {
        cfg.threads = threads.parse().map_err(|_| HarnessError::BadFlag {
            detail: format!("bad --threads value {threads:?}"),
        })?;
    }
    if let Some(out) = flags.get("out") {
        cfg.out_dir = out.to_string();
    }
    Ok(cfg)
}

fn install_thread_pool(cfg: &Config) {
    if cfg.threads > 0 {
        // ignore failure: the global pool can only be set once per process
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
}

/// Entry point; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(e @ HarnessError::UnknownSubcommand { .. }) | Err(e @ HarnessError::BadFlag { .. }) => {
            eprintln!("{e}");
            2
        }
        Err(e) => {
            eprintln!("{e}");
            1
        }
    }
}

fn dispatch(args: &[String]) -> Result<(), HarnessError> {
    let Some(sub) = args.first() else {
        return Err(HarnessError::UnknownSubcommand {
            name: "(none)".to_string(),
        });
    };
    if sub == "help" || sub == "--help" || sub == "-h" {
        println!("{USAGE}");
        return Ok(());
    }
    let rest = &args[1..];
    match sub.as_str() {
        "gen-data" => cmd_gen_data(rest),
        "train-guidance" => cmd_train_guidance(rest),
        "train-detector" => cmd_train_detector(rest),
        "detect" => cmd_detect(rest),
        "eval" => cmd_eval(rest),
        "bench" => cmd_bench(rest),
        "ablate" => cmd_ablate(rest),
        "sweep" => cmd_sweep(rest),
        "mask-stats" => cmd_mask_stats(rest),
        other => Err(HarnessError::UnknownSubcommand {
            name: other.to_string(),
        }),
    }
}

fn out_path(cfg: &Config, name: &str) -> PathBuf {
    Path::new(&cfg.out_dir).join(name)
}

fn ensure_out(cfg: &Config) -> Result<(), HarnessError> {
    fs::create_dir_all(&cfg.out_dir)?;
    Ok(())
}

/// Writes scenes as scene_NNNNN.pgm plus scene_NNNNN.txt annotations.
pub fn write_split(dir: &Path, items: &[Item]) -> Result<(), HarnessError> {
    fs::create_dir_all(dir)?;
    for (i, (image, boxes)) in items.iter().enumerate() {
        crate::images::save_pgm(dir.join(format!("scene_{i:05}.pgm")), image)?;
        fs::write(dir.join(format!("scene_{i:05}.txt")), boxes_to_string(boxes))?;
    }
    Ok(())
}

/// Reads a directory of image/annotation pairs matched by basename.
pub fn read_split(dir: &Path) -> Result<Vec<Item>, HarnessError> {
    let mut names: Vec<String> = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| HarnessError::MissingFile {
        path: dir.display().to_string(),
        detail: e.to_string(),
    })?;
    for entry in entries {
        let entry = entry?;
        let path = entry.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        if ext == "pgm" || ext == "png" {
            names.push(path.display().to_string());
        }
    }
    names.sort();
    let mut items = Vec::with_capacity(names.len());
    for name in names {
        let image = load_image(&name)?;
        let ann = Path::new(&name).with_extension("txt");
        let boxes = read_boxes(&ann).map_err(|e| HarnessError::MissingFile {
            path: ann.display().to_string(),
            detail: e.to_string(),
        })?;
        items.push((pad_to_multiple(&image, 32), boxes));
    }
    Ok(items)
}

fn cmd_gen_data(args: &[String]) -> Result<(), HarnessError> {
    let flags = Flags::parse(args)?;
    flags.ensure_known(&GLOBAL_FLAGS)?;
    let cfg = load_config(&flags)?;
    ensure_out(&cfg)?;
    let (train, val) = build_datasets(&cfg)?;
    write_split(&out_path(&cfg, "train"), &train)?;
    write_split(&out_path(&cfg, "val"), &val)?;
    println!(
        "wrote {} train and {} val scenes under {}",
        train.len(),
        val.len(),
        cfg.out_dir
    );
    Ok(())
}

fn data_split(cfg: &Config, flags: &Flags, which: &str) -> Result<Vec<Item>, HarnessError> {
    let dir = match flags.get("data") {
        Some(d) => Path::new(d).join(which),
        None => out_path(cfg, which),
    };
    read_split(&dir)
}

fn cmd_train_guidance(args: &[String]) -> Result<(), HarnessError> {
    let mut known = GLOBAL_FLAGS.to_vec();
    known.push("data");
    let flags = Flags::parse(args)?;
    flags.ensure_known(&known)?;
    let cfg = load_config(&flags)?;
    install_thread_pool(&cfg);
    ensure_out(&cfg)?;
    let train = data_split(&cfg, &flags, "train")?;
    let (net, report) = train_guidance_net(&cfg, &train)?;
    let layers: Vec<_> = net.all_layers().into_iter().cloned().collect();
    write_weights(out_path(&cfg, "guidance.gcw"), &layers)?;
    let mut csv = CsvWriter::new(&["epoch", "mean_loss"]);
    for (i, loss) in report.epoch_losses.iter().enumerate() {
        csv.row([format!("{i}"), format!("{loss}")]);
    }
    fs::write(out_path(&cfg, "guidance_train.csv"), csv.finish())?;
    println!(
        "trained guidance net on {} scenes; final epoch loss {:.6}",
        train.len(),
        report.epoch_losses.last().unwrap()
    );
    Ok(())
}

fn load_guidance(cfg: &Config, path: &Path) -> Result<GuidanceNetParams<f32>, HarnessError> {
    let bytes = fs::read(path).map_err(|e| HarnessError::MissingFile {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let raw = weights_from_bytes::<f32>(&bytes)?;
    Ok(GuidanceNetParams::from_raw_layers(
        raw,
        cfg.guidance.tau,
        cfg.guidance.epsilon as f32,
    )?)
}

fn load_detector(path: &Path) -> Result<ToyDetectorParams<f32>, HarnessError> {
    let bytes = fs::read(path).map_err(|e| HarnessError::MissingFile {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let raw = weights_from_bytes::<f32>(&bytes)?;
    Ok(ToyDetectorParams::from_raw_layers(raw)?)
}

fn cmd_train_detector(args: &[String]) -> Result<(), HarnessError> {
    let mut known = GLOBAL_FLAGS.to_vec();
    known.extend(["data", "mode", "guidance"]);
    let flags = Flags::parse(args)?;
    flags.ensure_known(&known)?;
    let mut cfg = load_config(&flags)?;
    if let Some(mode) = flags.get("mode") {
        cfg.mode = mode.to_string();
    }
    install_thread_pool(&cfg);
    ensure_out(&cfg)?;
    let mode = Mode::parse(&cfg.mode)?;
    let train = data_split(&cfg, &flags, "train")?;
    let dt = detector_train_config(&cfg);
    let guidance_net;
    let source = match mode {
        Mode::Dense => TrainMaskSource::Dense,
        Mode::Guided | Mode::GuidedPlus => match flags.get("guidance") {
            // retraining against a predicted guidance mask
            Some(path) => {
                guidance_net = load_guidance(&cfg, Path::new(path))?;
                TrainMaskSource::Predicted(&guidance_net, cfg.guidance.tau)
            }
            // the default strategy: ground truth + random synthesis
            None => TrainMaskSource::GtSynthesis(SynthesisConfig::new(
                cfg.synthesis.p,
                cfg.synthesis.seed,
            )?),
        },
    };
    let (params, report) = train_detector(&train, &dt, &source)?;
    let layers: Vec<_> = params.layers().into_iter().cloned().collect();
    write_weights(out_path(&cfg, "detector.gcw"), &layers)?;
    let mut csv = CsvWriter::new(&["epoch", "mean_loss"]);
    for (i, loss) in report.epoch_losses.iter().enumerate() {
        csv.row([format!("{i}"), format!("{loss}")]);
    }
    fs::write(out_path(&cfg, "detector_train.csv"), csv.finish())?;
    println!(
        "trained {} detector on {} scenes; final epoch loss {:.6}",
        cfg.mode,
        train.len(),
        report.epoch_losses.last().unwrap()
    );
    Ok(())
}

fn cmd_detect(args: &[String]) -> Result<(), HarnessError> {
    let mut known = GLOBAL_FLAGS.to_vec();
    known.extend(["image", "detector", "guidance", "mode"]);
    let flags = Flags::parse(args)?;
    flags.ensure_known(&known)?;
    let mut cfg = load_config(&flags)?;
    if let Some(mode) = flags.get("mode") {
        cfg.mode = mode.to_string();
    }
    install_thread_pool(&cfg);
    ensure_out(&cfg)?;
    let mode = Mode::parse(&cfg.mode)?;
    let image_path = flags.get("image").ok_or(HarnessError::BadFlag {
        detail: "detect requires --image".into(),
    })?;
    let detector_path = flags.get("detector").ok_or(HarnessError::BadFlag {
        detail: "detect requires --detector".into(),
    })?;
    let image = pad_to_multiple(&load_image(image_path)?, 32);
    let detector = load_detector(Path::new(detector_path))?;
    let guidance = match (mode, flags.get("guidance")) {
        (Mode::Dense, _) => None,
        (_, Some(path)) => Some(load_guidance(&cfg, Path::new(path))?),
        (_, None) => {
            return Err(HarnessError::BadFlag {
                detail: "guided modes require --guidance".into(),
            })
        }
    };
    let mask = match &guidance {
        Some(net) => {
            let map = guided_conv::guidance::predict_guidance(&image, net)?;
            fs::write(
                out_path(&cfg, "guidance_map.pgm"),
                guided_conv::io::probabilities_to_pgm(map.height(), map.width(), map.probabilities()),
            )?;
            let mask = dilate_mask(&predict_mask(&image, net)?, cfg.eval.mask_dilate_radius);
            fs::write(out_path(&cfg, "predicted_mask.pgm"), mask_to_pgm(&mask))?;
            Some(mask)
        }
        None => None,
    };
    let inference = guided_conv::detector::detector_forward(
        &image,
        &detector,
        mode,
        cfg.synthesis.p,
        mask.as_ref(),
    )?;
    let dets = guided_conv::postprocess::decode_and_nms(
        &inference.score,
        &inference.deltas,
        guided_conv::detector::HEAD_STRIDE,
        cfg.eval.score_thresh,
        cfg.eval.nms_iou,
        if inference.decode_masked {
            Some(&inference.head_view)
        } else {
            None
        },
    );
    let macs = inference.macs;
    fs::write(out_path(&cfg, "detections.txt"), detections_to_string(&dets))?;
    println!("{} detections ({} MACs) -> {}", dets.len(), macs, out_path(&cfg, "detections.txt").display());
    Ok(())
}

fn read_detections(path: &Path) -> Result<Vec<Detection>, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| HarnessError::MissingFile {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let mut dets = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(HarnessError::BadConfig {
                detail: format!(
                    "{}:{}: expected x,y,w,h,score, got {} fields",
                    path.display(),
                    idx + 1,
                    parts.len()
                ),
            });
        }
        let nums: Result<Vec<f64>, _> = parts.iter().map(|p| p.trim().parse::<f64>()).collect();
        let nums = nums.map_err(|_| HarnessError::BadConfig {
            detail: format!("{}:{}: bad number", path.display(), idx + 1),
        })?;
        dets.push(Detection {
            bbox: guided_conv::guidance::BBox::new(nums[0], nums[1], nums[2], nums[3])?,
            score: nums[4],
        });
    }
    Ok(dets)
}

fn cmd_eval(args: &[String]) -> Result<(), HarnessError> {
    let mut known = GLOBAL_FLAGS.to_vec();
    known.extend(["detections", "boxes"]);
    let flags = Flags::parse(args)?;
    flags.ensure_known(&known)?;
    let cfg = load_config(&flags)?;
    let det_path = flags.get("detections").ok_or(HarnessError::BadFlag {
        detail: "eval requires --detections".into(),
    })?;
    let boxes_path = flags.get("boxes").ok_or(HarnessError::BadFlag {
        detail: "eval requires --boxes".into(),
    })?;
    let dets = read_detections(Path::new(det_path))?;
    let boxes = read_boxes(boxes_path).map_err(|e| HarnessError::MissingFile {
        path: boxes_path.to_string(),
        detail: e.to_string(),
    })?;
    let (recall, precision, f) = evaluate(&dets, &boxes, cfg.eval.match_iou);
    println!("recall={recall} precision={precision} f_measure={f}");
    Ok(())
}

fn cmd_bench(args: &[String]) -> Result<(), HarnessError> {
    let mut known = GLOBAL_FLAGS.to_vec();
    known.extend(["ratios", "guidance", "detector"]);
    let flags = Flags::parse(args)?;
    flags.ensure_known(&known)?;
    let mut cfg = load_config(&flags)?;
    if let Some(ratios) = flags.get("ratios") {
        cfg.bench.ratios = ratios
            .split(',')
            .map(|r| {
                r.trim().parse::<f64>().map_err(|_| HarnessError::BadFlag {
                    detail: format!("bad --ratios entry {r:?}"),
                })
            })
            .collect::<Result<Vec<f64>, _>>()?;
    }
    if !cfg.bench.threads.contains(&cfg.threads) && flags.get("threads").is_some() {
        cfg.bench.threads = vec![cfg.threads];
    }
    ensure_out(&cfg)?;
    let records = run_bench(&cfg.bench)?;
    fs::write(out_path(&cfg, "bench.csv"), records_to_csv(&records))?;
    for r in &records {
        println!(
            "{} {} ratio={:.4} threads={} macs={} wall_ns={} speedup={:.2}",
            r.layer, r.mode, r.ratio, r.threads, r.macs, r.wall_ns, r.speedup
        );
    }
    if let (Some(gpath), Some(dpath)) = (flags.get("guidance"), flags.get("detector")) {
        let guidance = load_guidance(&cfg, Path::new(gpath))?;
        let detector = load_detector(Path::new(dpath))?;
        let split = runtime_split(&cfg, &guidance, &detector)?;
        let mut csv = CsvWriter::new(&["component", "wall_ns", "fraction"]);
        csv.row([
            "guidance_subnet".into(),
            format!("{}", split.guidance_ns),
            format!("{:.4}", split.guidance_fraction()),
        ]);
        csv.row([
            "primary_detector".into(),
            format!("{}", split.detector_ns),
            format!("{:.4}", 1.0 - split.guidance_fraction()),
        ]);
        fs::write(out_path(&cfg, "split.csv"), csv.finish())?;
        println!(
            "runtime split: guidance {:.1}%, primary detector {:.1}%",
            split.guidance_fraction() * 100.0,
            (1.0 - split.guidance_fraction()) * 100.0
        );
    }
    Ok(())
}

fn cmd_ablate(args: &[String]) -> Result<(), HarnessError> {
    let flags = Flags::parse(args)?;
    flags.ensure_known(&GLOBAL_FLAGS)?;
    let cfg = load_config(&flags)?;
    install_thread_pool(&cfg);
    ensure_out(&cfg)?;
    let (train, val) = build_datasets(&cfg)?;
    let report = run_ablation(&cfg, &train, &val)?;
    fs::write(out_path(&cfg, "ablation.csv"), ablation_to_csv(&report))?;
    for row in &report.rows {
        println!(
            "{}: f={:.4} recall={:.4} precision={:.4} mac_reduction={:.2}x",
            row.strategy,
            row.summary.f_measure,
            row.summary.recall,
            row.summary.precision,
            row.summary.mac_reduction()
        );
    }
    println!(
        "strategy ordering (gt_synthesis >= retrain_predicted >= apply_no_retrain): {}",
        if report.ordering_ok { "holds" } else { "does not hold" }
    );
    Ok(())
}

fn cmd_sweep(args: &[String]) -> Result<(), HarnessError> {
    let flags = Flags::parse(args)?;
    flags.ensure_known(&GLOBAL_FLAGS)?;
    let cfg = load_config(&flags)?;
    install_thread_pool(&cfg);
    ensure_out(&cfg)?;
    let (train, val) = build_datasets(&cfg)?;
    let (guidance, _) = train_guidance_net(&cfg, &train)?;
    let tau_points = run_tau_sweep(&cfg, &guidance, &val)?;
    fs::write(out_path(&cfg, "tau_sweep.csv"), tau_sweep_to_csv(&tau_points))?;
    for p in &tau_points {
        println!(
            "tau={} recall={:.4} precision={:.4} area_ratio={:.4}",
            p.tau, p.recall, p.precision, p.area_ratio
        );
    }
    let p_rows = run_p_sweep(&cfg, &train, &val, &guidance)?;
    fs::write(out_path(&cfg, "p_sweep.csv"), p_sweep_to_csv(&p_rows))?;
    for r in &p_rows {
        println!(
            "p={} f_dense={:.4} f_guided={:.4} f_guided_plus={:.4} mac_ratio={:.4}",
            r.p, r.f_dense, r.f_guided, r.f_guided_plus, r.mac_ratio_guided
        );
    }
    Ok(())
}

fn cmd_mask_stats(args: &[String]) -> Result<(), HarnessError> {
    let mut known = GLOBAL_FLAGS.to_vec();
    known.push("data");
    let flags = Flags::parse(args)?;
    flags.ensure_known(&known)?;
    let cfg = load_config(&flags)?;
    ensure_out(&cfg)?;
    let items = match flags.get("data") {
        Some(dir) => read_split(Path::new(dir))?,
        None => build_datasets(&cfg)?.0,
    };
    let csv = mask_stats_csv(&items);
    fs::write(out_path(&cfg, "mask_stats.csv"), &csv)?;
    let rows = crate::csv::parse(&csv);
    let n = (rows.len() - 1).max(1) as f64;
    let mean_text: f64 = rows[1..].iter().map(|r| r[1].parse::<f64>().unwrap()).sum::<f64>() / n;
    let mean_mask: f64 = rows[1..].iter().map(|r| r[2].parse::<f64>().unwrap()).sum::<f64>() / n;
    println!(
        "{} images: mean text-area ratio {:.4}, mean gt-mask ratio {:.4}",
        rows.len() - 1,
        mean_text,
        mean_mask
    );
    Ok(())
}

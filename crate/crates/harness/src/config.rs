//! JSON experiment configuration. Unknown keys are rejected so typos in
//! sweep scripts fail loudly.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::HarnessError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub image: ImageConfig,
    pub scene: SceneConfig,
    pub data: DataConfig,
    pub guidance: GuidanceConfig,
    pub detector: DetectorConfig,
    pub synthesis: SynthesisSection,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub sweep: SweepConfig,
    /// dense | guided | guided_plus
    pub mode: String,
    pub threads: usize,
    pub out_dir: String,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            image: ImageConfig::default(),
            scene: SceneConfig::default(),
            data: DataConfig::default(),
            guidance: GuidanceConfig::default(),
            detector: DetectorConfig::default(),
            synthesis: SynthesisSection::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            sweep: SweepConfig::default(),
            mode: "guided".to_string(),
            threads: 1,
            out_dir: "out".to_string(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageConfig {
    pub width: usize,
    pub height: usize,
}

impl Default for ImageConfig {
    fn default() -> Self {
        ImageConfig {
            width: 160,
            height: 160,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub box_count_min: usize,
    pub box_count_max: usize,
    pub stripe_period: usize,
    pub noise_level: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            box_count_min: 1,
            box_count_max: 4,
            stripe_period: 6,
            noise_level: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_count: usize,
    pub val_count: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_count: 500,
            val_count: 100,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub tau: f64,
    pub epsilon: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            epochs: 4,
            lr: 0.01,
            momentum: 0.9,
            seed: 11,
            tau: 0.2,
            epsilon: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub lambda: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            epochs: 4,
            lr: 0.01,
            momentum: 0.9,
            seed: 13,
            lambda: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthesisSection {
    pub p: f64,
    pub seed: u64,
}

impl Default for SynthesisSection {
    fn default() -> Self {
        SynthesisSection { p: 0.4, seed: 17 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub score_thresh: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
    /// Chebyshev radius (in mask cells) by which predicted masks are grown
    /// before guiding the detector; 0 applies them as-is.
    pub mask_dilate_radius: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            score_thresh: 0.5,
            nms_iou: 0.5,
            match_iou: 0.5,
            mask_dilate_radius: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    /// Mask area ratios to benchmark the guided kernel at.
    pub ratios: Vec<f64>,
    pub runs: usize,
    pub warmup: usize,
    pub threads: Vec<usize>,
    /// Benchmark layer: kernel x kernel conv, channels -> channels on a
    /// size x size feature map.
    pub channels: usize,
    pub size: usize,
    pub kernel: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            ratios: vec![1.0, 0.5, 0.25, 0.125],
            runs: 20,
            warmup: 3,
            threads: vec![1],
            channels: 64,
            size: 256,
            kernel: 3,
            seed: 99,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub taus: Vec<f64>,
    pub ps: Vec<f64>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            taus: vec![0.1, 0.2, 0.3, 0.4],
            ps: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            seeds: vec![1, 2, 3],
        }
    }
}

impl Config {
    pub fn load<P: AsRef<Path>>(path: P) -> Result<Config, HarnessError> {
        let text = fs::read_to_string(&path).map_err(|e| HarnessError::MissingFile {
            path: path.as_ref().display().to_string(),
            detail: e.to_string(),
        })?;
        Config::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Config, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::BadConfig {
            detail: e.to_string(),
        })
    }
}

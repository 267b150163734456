//! Background-aware block-wise random synthesis.
//!
//! During training the guidance mask is extended by flipping each background
//! cell true with probability p; the flip for cell i is a pure function of
//! (seed, i), so draws are reproducible under any thread scheduling. At test
//! time the mask is not extended; the guided-plus variant instead scales
//! background features by p, the dropout-style expectation of the training
//! gate.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::guided::{guided_pointwise, PointwiseOp};
use crate::mask::{GuidanceMask, MaskView};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisConfig {
    /// Probability of flipping a background cell true; 0 keeps the mask,
    /// 1 turns every cell true.
    pub p: f64,
    pub seed: u64,
}

impl SynthesisConfig {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) || !p.is_finite() {
            return Err(Error::InvalidParam {
                name: "synthesis.p",
                detail: format!("must lie in [0,1], got {p}"),
            });
        }
        Ok(SynthesisConfig { p, seed })
    }

    /// Sub-seed for one training draw, so every (epoch, image) pair samples
    /// a fresh extension while staying reproducible.
    pub fn for_draw(&self, epoch: usize, image: usize) -> SynthesisConfig {
        SynthesisConfig {
            p: self.p,
            seed: mix(self.seed ^ mix(epoch as u64).wrapping_add(image as u64)),
        }
    }
}

/// splitmix64 finalizer; counter-based so per-cell draws are order-free.
#[inline]
fn mix(z: u64) -> u64 {
    let mut z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform [0, 1) value for one (seed, counter) pair.
#[inline]
fn unit_draw(seed: u64, counter: u64) -> f64 {
    (mix(seed ^ mix(counter)) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Extend a mask by flipping each background cell true with probability p.
/// True cells always stay true: the output contains the input.
pub fn extend_mask_random(mask: &GuidanceMask, cfg: &SynthesisConfig) -> GuidanceMask {
    let mut out = mask.clone();
    for (i, cell) in out.cells_mut().iter_mut().enumerate() {
        if !*cell && unit_draw(cfg.seed, i as u64) < cfg.p {
            *cell = true;
        }
    }
    out
}

/// Leave mask-true feature cells untouched and multiply background cells by
/// p. With p = 0 this equals guided zeroing; with p = 1 it is the identity.
pub fn scale_background<E: Element>(
    features: &Tensor<E>,
    view: &MaskView,
    p: f64,
) -> Result<Tensor<E>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParam {
            name: "scale_background p",
            detail: format!("must lie in [0,1], got {p}"),
        });
    }
    guided_pointwise(PointwiseOp::Scale(E::from_f64(p)), features, view)
}

/// Execution mode of the primary detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Dense,
    Guided,
    GuidedPlus,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Mode> {
        match s {
            "dense" => Ok(Mode::Dense),
            "guided" => Ok(Mode::Guided),
            "guided_plus" | "guided-plus" => Ok(Mode::GuidedPlus),
            other => Err(Error::InvalidParam {
                name: "mode",
                detail: format!("unknown mode {other:?} (dense|guided|guided_plus)"),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Dense => "dense",
            Mode::Guided => "guided",
            Mode::GuidedPlus => "guided_plus",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Test,
}

/// Where the mask driving the detector comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    /// No mask: dense computation everywhere.
    None,
    /// Ground-truth mask extended by random synthesis (training).
    GtExtended,
    /// Mask predicted by the guidance net, not extended (testing).
    Predicted,
}

/// How background cells of each guided layer output are treated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BackgroundTreatment {
    /// Computed everywhere, nothing masked.
    Dense,
    /// Zero-filled; skipped locations are never computed.
    Zero,
    /// Computed everywhere, then multiplied by the scale (guided-plus).
    Scale(f64),
}

/// Layer-wiring policy selected by (mode, phase).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WiringPolicy {
    pub mask_source: MaskSource,
    pub background: BackgroundTreatment,
    /// Whether box decoding is restricted to mask-true head cells. A zeroed
    /// background carries no signal, so it is never decoded; a scaled one is.
    pub decode_masked: bool,
}

/// Training always extends the ground-truth mask by random synthesis; at
/// test time the predicted mask is applied without extension, with hard
/// zeroing in guided mode and scale-by-p in guided-plus mode.
pub fn pipeline_mode_select(mode: Mode, phase: Phase, p: f64) -> WiringPolicy {
    match (mode, phase) {
        (Mode::Dense, _) => WiringPolicy {
            mask_source: MaskSource::None,
            background: BackgroundTreatment::Dense,
            decode_masked: false,
        },
        (Mode::Guided, Phase::Train) | (Mode::GuidedPlus, Phase::Train) => WiringPolicy {
            mask_source: MaskSource::GtExtended,
            background: BackgroundTreatment::Zero,
            decode_masked: true,
        },
        (Mode::Guided, Phase::Test) => WiringPolicy {
            mask_source: MaskSource::Predicted,
            background: BackgroundTreatment::Zero,
            decode_masked: true,
        },
        (Mode::GuidedPlus, Phase::Test) => WiringPolicy {
            mask_source: MaskSource::Predicted,
            background: if p == 0.0 {
                BackgroundTreatment::Zero
            } else {
                BackgroundTreatment::Scale(p)
            },
            decode_masked: p == 0.0,
        },
    }
}

//! Intensity windowing and normalization, plus the per-dataset presets.

use serde::{Deserialize, Serialize};

use super::Volume;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum Normalization {
    /// `lo -> 0`, `hi -> 1`.
    UnitInterval,
    /// `lo -> -1`, `hi -> 1`.
    Symmetric,
    /// `(x - subtract) / divide`.
    ShiftScale { subtract: f64, divide: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_spacing_mm: [f64; 3],
    pub clip_range: [f64; 2],
    pub normalization: Normalization,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Btcv,
    Amos,
    CtOrg,
    Pelvic,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Btcv, Preset::Amos, Preset::CtOrg, Preset::Pelvic];

    /// Spacing is `(sz, sy, sx)`; the in-plane axes are listed first in the
    /// usual `x × y × z` notation, hence 1.0 × 1.0 × 1.5 becomes `[1.5, 1.0, 1.0]`.
    pub fn config(self) -> PreprocessConfig {
        match self {
            Preset::Btcv => PreprocessConfig {
                target_spacing_mm: [1.5, 1.0, 1.0],
                clip_range: [-125.0, 275.0],
                normalization: Normalization::UnitInterval,
            },
            Preset::Amos => PreprocessConfig {
                target_spacing_mm: [1.5, 1.0, 1.0],
                clip_range: [-991.0, 362.0],
                normalization: Normalization::ShiftScale {
                    subtract: 50.0,
                    divide: 141.0,
                },
            },
            Preset::CtOrg => PreprocessConfig {
                target_spacing_mm: [2.0, 2.0, 2.0],
                clip_range: [-1000.0, 1000.0],
                normalization: Normalization::Symmetric,
            },
            Preset::Pelvic => PreprocessConfig {
                target_spacing_mm: [1.5, 1.5, 1.5],
                clip_range: [-50.0, 150.0],
                normalization: Normalization::UnitInterval,
            },
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.clip_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::config("clip_range", format!("need lo < hi, got [{lo}, {hi}]")));
        }
        if let Normalization::ShiftScale { divide, subtract } = self.normalization {
            if divide == 0.0 || !divide.is_finite() || !subtract.is_finite() {
                return Err(Error::config("normalization.divide", "must be finite and nonzero"));
            }
        }
        if !self.target_spacing_mm.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::config("target_spacing_mm", "components must be positive"));
        }
        Ok(())
    }

    /// Maps one raw intensity through clip-then-normalize.
    pub fn map_intensity(&self, x: f64) -> f64 {
        let [lo, hi] = self.clip_range;
        let c = if x.is_nan() { lo } else { x.clamp(lo, hi) };
        match self.normalization {
            Normalization::UnitInterval => (c - lo) / (hi - lo),
            Normalization::Symmetric => 2.0 * (c - lo) / (hi - lo) - 1.0,
            Normalization::ShiftScale { subtract, divide } => (c - subtract) / divide,
        }
    }
}

/// Clips to `clip_range`, then normalizes. NaN voxels are treated as `lo`.
pub fn clip_and_normalize(volume: &Volume, cfg: &PreprocessConfig) -> Result<Volume> {
    cfg.validate()?;
    let data = volume.data().iter().map(|&x| cfg.map_intensity(x)).collect();
    Ok(Volume::new(volume.shape(), volume.spacing(), data)?.with_origin(volume.origin()))
}

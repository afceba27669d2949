//! Run configuration: one TOML file with a section per component.
//!
//! Omitted keys take the component defaults (the full training recipe);
//! [`RunConfig::desk`] is the small CPU setting used by the test suite and
//! shipped as `configs/desk.toml`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::DecoderConfig;
use crate::encoder::EncoderConfig;
use crate::infer::SlidingWindowConfig;
use crate::model::ModelConfig;
use crate::phantom::toml_error_key;
use crate::prompt::ApgConfig;
use crate::train::{FitOptions, FreezePolicy, LossConfig, OptimConfig};
use crate::volume::augment::AugmentConfig;
use crate::volume::preprocess::{PreprocessConfig, Preset};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub pos_neg_ratio: [u32; 2],
    pub augment: AugmentConfig,
    pub freeze_policy: FreezePolicy,
    /// 2D checkpoint to import; without one a surrogate is generated from the seed.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pos_neg_ratio: [1, 1],
            augment: AugmentConfig::default(),
            freeze_policy: FreezePolicy::Standard,
            init_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// NSD tolerance in mm, one value for all classes or one per class.
    pub tolerance_mm: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { tolerance_mm: vec![1.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub encoder: EncoderConfig,
    pub apg: ApgConfig,
    pub decoder: DecoderConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub sliding_window: SlidingWindowConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            output_dir: PathBuf::from("runs"),
            seed: 0,
            preprocess: Preset::Btcv.config(),
            encoder: EncoderConfig::default(),
            apg: ApgConfig::default(),
            decoder: DecoderConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            sliding_window: SlidingWindowConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// 32³ patches, 500 optimizer steps, validation every epoch.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.preprocess.target_spacing_mm = [1.0; 3];
        cfg.optim = OptimConfig {
            base_lr: 5e-3,
            epochs: 25,
            warmup_epochs: 1,
            steps_per_epoch: 20,
            ..OptimConfig::default()
        };
        cfg
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(toml_error_key(&e, text), e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// The effective configuration, defaults filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            apg: self.apg,
            decoder: self.decoder,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.preprocess.validate()?;
        self.model().validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.sliding_window.validate()?;
        if self.train.pos_neg_ratio == [0, 0] {
            return Err(Error::config("train.pos_neg_ratio", "at least one weight must be positive"));
        }
        if self.eval.tolerance_mm.is_empty() || self.eval.tolerance_mm.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(Error::config("eval.tolerance_mm", "tolerances must be positive"));
        }
        if let Some(p) = self.sliding_window.patch_size {
            if p != self.encoder.patch_size() {
                return Err(Error::config(
                    "sliding_window.patch_size",
                    format!("must equal the encoder patch size {:?}", self.encoder.patch_size()),
                ));
            }
        }
        Ok(())
    }

    pub fn fit_options(&self, out_dir: Option<PathBuf>) -> FitOptions {
        FitOptions {
            optim: self.optim,
            loss: self.loss,
            augment: self.train.augment,
            pos_neg_ratio: self.train.pos_neg_ratio,
            sliding_window: self.sliding_window,
            tolerance_mm: self.eval.tolerance_mm.clone(),
            freeze_policy: self.train.freeze_policy,
            seed: self.seed,
            out_dir,
        }
    }
}

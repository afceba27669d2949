//! Full segmentation model: encoder, optional prompt generator, decoder.

use std::path::Path;

use autoprosam_tape::{Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::decoder::{decode, decoder_param_defs, mlam_fuse, DecoderConfig};
use crate::encoder::{encoder_forward, encoder_param_defs, import_2d_checkpoint, EncoderConfig};
use crate::nn::Ctx;
use crate::params::{ParamDef, ParamStore};
use crate::prompt::{apg_forward, apg_param_defs, ApgConfig};
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub apg: ApgConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.apg.validate()?;
        self.decoder.validate()?;
        let m = self.apg.multiple();
        if self.decoder.apg_enabled && self.encoder.grid.iter().any(|g| g % m != 0) {
            return Err(Error::config(
                "apg.level_count",
                format!("token grid {:?} must be a multiple of {m} for {} levels", self.encoder.grid, self.apg.level_count),
            ));
        }
        Ok(())
    }

    pub fn with_ablation(mut self, apg: bool, mlam: bool) -> Self {
        self.decoder.apg_enabled = apg;
        self.decoder.mlam_enabled = mlam;
        self
    }

    /// Rejects sizes no real model has, before any layout arithmetic runs on
    /// them; checkpoint configs are untrusted input.
    pub fn check_bounds(&self) -> Result<()> {
        const LIMIT: usize = 1 << 16;
        let e = &self.encoder;
        let dims = [
            ("encoder.embed_dim", e.embed_dim),
            ("encoder.block_count", e.block_count),
            ("encoder.head_count", e.head_count),
            ("encoder.patch_kernel", e.patch_kernel),
            ("encoder.in_channels", e.in_channels),
            ("encoder.mlp_ratio", e.mlp_ratio),
            ("encoder.neck_channels", e.neck_channels),
            ("encoder.grid", e.grid.into_iter().max().unwrap_or(0)),
            ("encoder.window_size", e.window_size.into_iter().max().unwrap_or(0)),
            ("apg.base_channels", self.apg.base_channels),
            ("apg.output_channels", self.apg.output_channels.unwrap_or(0)),
            ("decoder.fusion_channels", self.decoder.fusion_channels),
        ];
        for (key, v) in dims {
            if v > LIMIT {
                return Err(Error::config(key, format!("{v} exceeds {LIMIT}")));
            }
        }
        if self.apg.level_count > 16 {
            return Err(Error::config("apg.level_count", "more than 16 levels"));
        }
        if !(e.adapter_ratio.is_finite() && e.adapter_ratio <= LIMIT as f64) {
            return Err(Error::config("encoder.adapter_ratio", "out of range"));
        }
        Ok(())
    }

    /// `C_p`.
    pub fn prompt_channels(&self) -> usize {
        self.apg.output_channels.unwrap_or(self.decoder.fusion_channels)
    }

    pub fn param_defs(&self) -> Vec<ParamDef> {
        let mut defs = encoder_param_defs(&self.encoder);
        if self.decoder.apg_enabled {
            defs.extend(apg_param_defs(&self.apg, self.encoder.embed_dim, self.prompt_channels()));
        }
        defs.extend(decoder_param_defs(&self.decoder, &self.encoder, self.prompt_channels()));
        defs
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Imports the encoder from a 2D checkpoint and initializes every
    /// from-scratch part from `seed`.
    pub fn from_2d_checkpoint(archive: &Archive, cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = import_2d_checkpoint(archive, &cfg.encoder, seed)?;
        let encoder_names = params.len();
        let rest: Vec<ParamDef> = cfg.param_defs().into_iter().skip(encoder_names).collect();
        params.extend_from_defs(&rest, seed)?;
        Ok(Self { cfg, params })
    }

    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        params.check_against(&cfg.param_defs())?;
        Ok(Self { cfg, params })
    }

    /// `(tunable, frozen)`.
    pub fn counts(&self) -> (usize, usize) {
        self.params.counts()
    }

    /// Tunable size of the prompt branch: the generator plus its fusion conv.
    pub fn prompt_branch_size(&self) -> usize {
        self.params.counts_with_prefix("apg.").0 + self.params.counts_with_prefix("decoder.prompt_fuse").0
    }

    /// Logits `[B, K + 1, D, H, W]` for an image `[B, 1, D, H, W]`.
    pub fn forward(&self, ctx: &mut Ctx, image: Var) -> Result<Var> {
        let cfg = &self.cfg;
        let pyramid = encoder_forward(ctx, &cfg.encoder, image)?;
        let prompt = if cfg.decoder.apg_enabled {
            Some(apg_forward(ctx, &cfg.apg, pyramid.last_block)?)
        } else {
            None
        };
        let fused = mlam_fuse(ctx, &cfg.decoder, &pyramid, prompt)?;
        decode(ctx, &cfg.decoder, &cfg.encoder, fused, image)
    }

    /// Inference-mode forward pass on one tensor.
    pub fn infer(&self, image: &Tensor) -> Result<Tensor> {
        let mut ctx = Ctx::new(&self.params, false);
        let x = ctx.input(image.clone());
        let y = self.forward(&mut ctx, x)?;
        Ok(ctx.value(y).clone())
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = self.params.to_archive();
        let cfg = serde_json::to_string(&self.cfg).expect("config serializes");
        a.set_meta("model_config", cfg).expect("single-line json");
        a.set_meta("config_hash", self.cfg.hash()).expect("valid meta");
        a.set_meta("apg_enabled", self.cfg.decoder.apg_enabled).expect("valid meta");
        a.set_meta("mlam_enabled", self.cfg.decoder.mlam_enabled).expect("valid meta");
        a
    }

    pub fn from_archive(archive: &Archive) -> Result<Self> {
        let json = archive
            .meta("model_config")
            .ok_or_else(|| Error::format("model_config", "checkpoint has no model configuration"))?;
        let cfg: ModelConfig = serde_json::from_str(json).map_err(|e| Error::format("model_config", e.to_string()))?;
        cfg.check_bounds()?;
        Self::from_params(cfg, ParamStore::from_archive(archive)?)
    }

    pub fn load(path: &Path) -> Result<(Self, Archive)> {
        let a = Archive::read(path)?;
        Ok((Self::from_archive(&a)?, a))
    }
}

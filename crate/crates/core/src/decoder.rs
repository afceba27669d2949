//! Mask decoder with multi-layer aggregation.
//!
//! The fused mask feature is `proj_final(final_map)`, plus the sum of `1×1×1`
//! projections of the four stage taps when aggregation is on. With the
//! prompt branch on, the prompt embedding is concatenated and a `3×3×3` conv
//! fuses back to `F` channels. Two `upsample -> conv3 -> LN -> GELU` stages
//! bring the map to input resolution (or one trilinear resize for kernels
//! that are not powers of two), the normalized image is concatenated, and a
//! final `3×3×3` conv emits `K + 1` logits.

use autoprosam_tape::{ConvSpec, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, FeaturePyramid};
use crate::nn::Ctx;
use crate::params::{Init, ParamDef};
use crate::volume::{LabelMap, Spacing};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    /// Two nearest-upsample stages for power-of-two kernels, else trilinear.
    #[default]
    Auto,
    Trilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// `F`.
    pub fusion_channels: usize,
    /// `K`, foreground classes; logits have `K + 1` channels.
    pub num_classes: usize,
    pub upsample_mode: UpsampleMode,
    pub mlam_enabled: bool,
    pub apg_enabled: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            fusion_channels: 8,
            num_classes: 1,
            upsample_mode: UpsampleMode::Auto,
            mlam_enabled: true,
            apg_enabled: true,
        }
    }
}

/// One upsampling stage: scale factors (or a resize to full resolution)
/// followed by a conv from `cin` to `cout` channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpStage {
    pub factors: Option<[usize; 3]>,
    pub cin: usize,
    pub cout: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fusion_channels == 0 {
            return Err(Error::config("decoder.fusion_channels", "must be at least 1"));
        }
        if self.num_classes == 0 || self.num_classes > 254 {
            return Err(Error::config("decoder.num_classes", "must be in 1..=254"));
        }
        Ok(())
    }

    /// `k = s1·s2` with `s1 = 2^ceil(log2(k)/2)` for powers of two.
    pub fn up_stages(&self, k: usize) -> Vec<UpStage> {
        let f = self.fusion_channels;
        // channel LN over a single channel is constant, so keep at least two
        let (c1, c2) = ((f / 2).max(2), (f / 4).max(2));
        if self.upsample_mode == UpsampleMode::Auto && k.is_power_of_two() {
            let log = k.trailing_zeros();
            let s1 = 1usize << log.div_ceil(2);
            let s2 = k / s1;
            vec![
                UpStage { factors: Some([s1; 3]), cin: f, cout: c1 },
                UpStage { factors: Some([s2; 3]), cin: c1, cout: c2 },
            ]
        } else {
            vec![UpStage { factors: None, cin: f, cout: c2 }]
        }
    }
}

fn conv_def(defs: &mut Vec<ParamDef>, prefix: &str, cout: usize, cin: usize, k: usize) {
    defs.push(ParamDef::tunable(
        format!("{prefix}.weight"),
        &[cout, cin, k, k, k],
        Init::He { fan_in: cin * k * k * k },
    ));
    defs.push(ParamDef::tunable(format!("{prefix}.bias"), &[cout], Init::Zeros));
}

/// All `decoder.*` parameters. `prompt_channels` is only used with the
/// prompt branch enabled.
pub fn decoder_param_defs(cfg: &DecoderConfig, enc: &EncoderConfig, prompt_channels: usize) -> Vec<ParamDef> {
    let f = cfg.fusion_channels;
    let mut defs = Vec::new();
    conv_def(&mut defs, "decoder.proj_final", f, enc.neck_channels, 1);
    if cfg.mlam_enabled {
        for i in 0..4 {
            conv_def(&mut defs, &format!("decoder.proj_stage{i}"), f, enc.embed_dim, 1);
        }
    }
    if cfg.apg_enabled {
        conv_def(&mut defs, "decoder.prompt_fuse", f, f + prompt_channels, 3);
    }
    let stages = cfg.up_stages(enc.patch_kernel);
    for (j, s) in stages.iter().enumerate() {
        conv_def(&mut defs, &format!("decoder.up{j}.conv"), s.cout, s.cin, 3);
        defs.push(ParamDef::tunable(format!("decoder.up{j}.norm.weight"), &[s.cout], Init::Ones));
        defs.push(ParamDef::tunable(format!("decoder.up{j}.norm.bias"), &[s.cout], Init::Zeros));
    }
    let last = stages.last().map_or(f, |s| s.cout);
    conv_def(&mut defs, "decoder.head", cfg.num_classes + 1, last + enc.in_channels, 3);
    defs
}

/// Fuses the pyramid (and optionally the prompt) into `[B, F, D', H', W']`.
pub fn mlam_fuse(ctx: &mut Ctx, cfg: &DecoderConfig, pyramid: &FeaturePyramid, prompt: Option<Var>) -> Result<Var> {
    let grid = ctx.graph.shape(pyramid.final_map)[2..].to_vec();
    let check = |ctx: &Ctx, v: Var, what: &str| {
        if ctx.graph.shape(v)[2..] != grid[..] {
            return Err(Error::Shape(format!("{what} {:?} is not congruent with final map grid {grid:?}", ctx.graph.shape(v))));
        }
        Ok(())
    };
    let point = ConvSpec::same([1, 1, 1]);
    let mut fused = ctx.conv(pyramid.final_map, "decoder.proj_final", point, true)?;
    if cfg.mlam_enabled {
        for (i, &s) in pyramid.stages.iter().enumerate() {
            check(ctx, s, &format!("stage map {i}"))?;
            let p = ctx.conv(s, &format!("decoder.proj_stage{i}"), point, true)?;
            fused = ctx.graph.add(fused, p)?;
        }
    }
    if cfg.apg_enabled {
        let prompt = prompt.ok_or_else(|| Error::Contract("prompt branch enabled but no prompt embedding given".into()))?;
        check(ctx, prompt, "prompt embedding")?;
        let cat = ctx.graph.concat(&[fused, prompt], 1)?;
        fused = ctx.conv(cat, "decoder.prompt_fuse", ConvSpec::same([3, 3, 3]), true)?;
    }
    Ok(fused)
}

/// Upsamples the fused map to the image resolution, concatenates the image
/// and returns `[B, K + 1, D, H, W]` logits.
pub fn decode(ctx: &mut Ctx, cfg: &DecoderConfig, enc: &EncoderConfig, fused: Var, image: Var) -> Result<Var> {
    let target: [usize; 3] = ctx.graph.shape(image)[2..].try_into().map_err(|_| Error::Shape("image must be 5-d".into()))?;
    let mut h = fused;
    for (j, s) in cfg.up_stages(enc.patch_kernel).iter().enumerate() {
        h = match s.factors {
            Some(f) => ctx.graph.upsample_nearest(h, f)?,
            None => ctx.graph.resize_trilinear(h, target)?,
        };
        h = ctx.conv_norm_act(h, &format!("decoder.up{j}.conv"), &format!("decoder.up{j}.norm"), ConvSpec::same([3, 3, 3]))?;
    }
    if ctx.graph.shape(h)[2..] != target[..] {
        return Err(Error::Shape(format!("upsampled map {:?} does not reach image size {target:?}", ctx.graph.shape(h))));
    }
    let cat = ctx.graph.concat(&[h, image], 1)?;
    ctx.conv(cat, "decoder.head", ConvSpec::same([3, 3, 3]), true)
}

/// Per-voxel argmax over the class axis of `[K + 1, D, H, W]` (or with a
/// leading batch of 1). Ties go to the lowest class index.
pub fn predict_labels(logits: &Tensor, spacing: Spacing) -> Result<LabelMap> {
    let s = logits.shape();
    let s = match s.len() {
        5 if s[0] == 1 => &s[1..],
        4 => s,
        _ => return Err(Error::Shape(format!("logits must be [K+1, D, H, W], got {s:?}"))),
    };
    let (k1, n) = (s[0], s[1] * s[2] * s[3]);
    if k1 < 2 || k1 > 256 {
        return Err(Error::Shape(format!("{k1} logit channels")));
    }
    let x = logits.data();
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric("NaN in logits".into()));
    }
    let labels = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..k1 {
                if x[c * n + i] > x[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelMap::new([s[1], s[2], s[3]], spacing, labels, (k1 - 1) as u8)
}

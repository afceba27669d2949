//! Automatic prompt generator: a small 3D U-Net mapping the last encoder
//! block's feature map to a prompt embedding on the same token grid.
//!
//! Level `l` has `base·2^l` channels. Going down, each level after the first
//! starts with a stride-2 `2×2×2` conv; going up, nearest ×2 upsampling and a
//! `3×3×3` conv precede concatenation with the matching skip. Every level
//! block is two `conv3 -> LN -> GELU` stages. A `1×1×1` conv projects to the
//! output channel count.

use autoprosam_tape::{ConvSpec, Var};
use serde::{Deserialize, Serialize};

use crate::nn::Ctx;
use crate::params::{Init, ParamDef};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApgConfig {
    /// Number of resolution levels; there are `level_count - 1` downsamplings.
    pub level_count: usize,
    pub base_channels: usize,
    /// `C_p`; defaults to the decoder fusion width.
    pub output_channels: Option<usize>,
}

impl Default for ApgConfig {
    fn default() -> Self {
        Self {
            level_count: 3,
            base_channels: 4,
            output_channels: None,
        }
    }
}

impl ApgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.level_count == 0 || self.level_count > 8 {
            return Err(Error::config("apg.level_count", "must be in 1..=8"));
        }
        if self.base_channels == 0 || self.output_channels == Some(0) {
            return Err(Error::config("apg.base_channels", "channel counts must be positive"));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Required divisor of every input spatial extent.
    pub fn multiple(&self) -> usize {
        1 << (self.level_count - 1)
    }
}

fn block_defs(defs: &mut Vec<ParamDef>, prefix: &str, cin: usize, cout: usize) {
    for (i, c) in [(1, cin), (2, cout)] {
        defs.push(ParamDef::tunable(
            format!("{prefix}.conv{i}.weight"),
            &[cout, c, 3, 3, 3],
            Init::He { fan_in: c * 27 },
        ));
        defs.push(ParamDef::tunable(format!("{prefix}.conv{i}.bias"), &[cout], Init::Zeros));
        defs.push(ParamDef::tunable(format!("{prefix}.norm{i}.weight"), &[cout], Init::Ones));
        defs.push(ParamDef::tunable(format!("{prefix}.norm{i}.bias"), &[cout], Init::Zeros));
    }
}

fn conv_defs(defs: &mut Vec<ParamDef>, prefix: &str, cout: usize, cin: usize, k: usize) {
    defs.push(ParamDef::tunable(
        format!("{prefix}.weight"),
        &[cout, cin, k, k, k],
        Init::He { fan_in: cin * k * k * k },
    ));
    defs.push(ParamDef::tunable(format!("{prefix}.bias"), &[cout], Init::Zeros));
}

/// All `apg.*` parameters for an input of `in_channels` and output `out_channels`.
pub fn apg_param_defs(cfg: &ApgConfig, in_channels: usize, out_channels: usize) -> Vec<ParamDef> {
    let mut defs = Vec::new();
    block_defs(&mut defs, "apg.enc0", in_channels, cfg.channels(0));
    for l in 1..cfg.level_count {
        conv_defs(&mut defs, &format!("apg.down{l}"), cfg.channels(l), cfg.channels(l - 1), 2);
        block_defs(&mut defs, &format!("apg.enc{l}"), cfg.channels(l), cfg.channels(l));
    }
    for l in (0..cfg.level_count - 1).rev() {
        conv_defs(&mut defs, &format!("apg.up{l}"), cfg.channels(l), cfg.channels(l + 1), 3);
        block_defs(&mut defs, &format!("apg.dec{l}"), 2 * cfg.channels(l), cfg.channels(l));
    }
    conv_defs(&mut defs, "apg.out", out_channels, cfg.channels(0), 1);
    defs
}

fn level_block(ctx: &mut Ctx, x: Var, prefix: &str) -> Result<Var> {
    let same = ConvSpec::same([3, 3, 3]);
    let h = ctx.conv_norm_act(x, &format!("{prefix}.conv1"), &format!("{prefix}.norm1"), same)?;
    ctx.conv_norm_act(h, &format!("{prefix}.conv2"), &format!("{prefix}.norm2"), same)
}

/// `[B, C, D', H', W'] -> [B, C_p, D', H', W']`.
pub fn apg_forward(ctx: &mut Ctx, cfg: &ApgConfig, x: Var) -> Result<Var> {
    let shape = ctx.graph.shape(x).to_vec();
    let m = cfg.multiple();
    if shape.len() != 5 || shape[2..].iter().any(|&s| s % m != 0) {
        return Err(Error::Shape(format!(
            "prompt generator input {shape:?}: spatial extents must be a multiple of {m}"
        )));
    }
    let mut skips = Vec::with_capacity(cfg.level_count);
    let mut h = level_block(ctx, x, "apg.enc0")?;
    skips.push(h);
    for l in 1..cfg.level_count {
        h = ctx.conv(h, &format!("apg.down{l}"), ConvSpec::strided([2, 2, 2]), true)?;
        h = level_block(ctx, h, &format!("apg.enc{l}"))?;
        skips.push(h);
    }
    for l in (0..cfg.level_count - 1).rev() {
        let u = ctx.graph.upsample_nearest(h, [2, 2, 2])?;
        let u = ctx.conv(u, &format!("apg.up{l}"), ConvSpec::same([3, 3, 3]), true)?;
        let cat = ctx.graph.concat(&[skips[l], u], 1)?;
        h = level_block(ctx, cat, &format!("apg.dec{l}"))?;
    }
    ctx.conv(h, "apg.out", ConvSpec::same([1, 1, 1]), true)
}

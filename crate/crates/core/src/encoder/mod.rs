//! The adapted image encoder.
//!
//! Dataflow: factorized patch embedding, decomposed positional encoding,
//! `L` blocks of (windowed attention block, depth adapter), then a 3D
//! convolutional bottleneck. Four block outputs are tapped for the decoder.
//!
//! Maps are channels-first `[B, C, D', H', W']`; inside the blocks tokens
//! are `[B, N, C]` with `N = D'·H'·W'` in row-major `(d, h, w)` order.

mod import;

use std::sync::atomic::{AtomicBool, Ordering};

use autoprosam_tape::{ConvSpec, Var, WindowSpec};
use serde::{Deserialize, Serialize};

pub use import::{encoder_param_defs, import_2d_checkpoint, inherited_entries, surrogate_2d_shapes};

use crate::nn::{Activation, Ctx};
use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// `C`.
    pub embed_dim: usize,
    /// `L`.
    pub block_count: usize,
    pub head_count: usize,
    /// `k`: patch kernel and stride along every axis.
    pub patch_kernel: usize,
    /// Attention window in tokens per axis `(d, h, w)`.
    pub window_size: [usize; 3],
    /// `r = N' / C`.
    pub adapter_ratio: f64,
    pub adapter_activation: Activation,
    /// 1-based block indices whose outputs are tapped; index 0 taps the
    /// embedded tokens. Defaults to `ceil(i·L/4)` for `i = 1..4`.
    pub stage_taps: Option<[usize; 4]>,
    /// Token grid `(D', H', W')`; the positional tables are sized from it.
    pub grid: [usize; 3],
    pub in_channels: usize,
    pub mlp_ratio: usize,
    /// Channel count of the bottleneck output.
    pub neck_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            block_count: 4,
            head_count: 4,
            patch_kernel: 8,
            window_size: [4, 4, 4],
            adapter_ratio: 0.25,
            adapter_activation: Activation::Gelu,
            stage_taps: None,
            grid: [4, 4, 4],
            in_channels: 1,
            mlp_ratio: 4,
            neck_channels: 16,
        }
    }
}

impl EncoderConfig {
    /// `N' = round(r·C)`.
    pub fn adapter_dim(&self) -> usize {
        (self.adapter_ratio * self.embed_dim as f64).round() as usize
    }

    pub fn taps(&self) -> [usize; 4] {
        self.stage_taps
            .unwrap_or_else(|| [1, 2, 3, 4].map(|i| (i * self.block_count).div_ceil(4)))
    }

    /// Input patch size in voxels: `grid · k`.
    pub fn patch_size(&self) -> [usize; 3] {
        self.grid.map(|g| g * self.patch_kernel)
    }

    pub fn tokens(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            grid: self.grid,
            window: self.window_size,
            heads: self.head_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, d: String| Err(Error::config(format!("encoder.{k}"), d));
        if self.embed_dim == 0 || self.head_count == 0 || self.embed_dim % self.head_count != 0 {
            return bad("head_count", format!("embed_dim {} must be a positive multiple of head_count {}", self.embed_dim, self.head_count));
        }
        if self.patch_kernel == 0 {
            return bad("patch_kernel", "must be positive".into());
        }
        if self.grid.contains(&0) || self.window_size.contains(&0) {
            return bad("grid", "grid and window_size components must be positive".into());
        }
        if !(self.adapter_ratio.is_finite() && self.adapter_ratio > 0.0) || self.adapter_dim() == 0 {
            return bad("adapter_ratio", format!("round({} * {}) must be at least 1", self.adapter_ratio, self.embed_dim));
        }
        if self.in_channels == 0 || self.mlp_ratio == 0 || self.neck_channels == 0 {
            return bad("in_channels", "in_channels, mlp_ratio and neck_channels must be positive".into());
        }
        let taps = self.taps();
        let strict = self.block_count >= 4;
        let ordered = taps.windows(2).all(|w| if strict { w[0] < w[1] } else { w[0] <= w[1] });
        if !ordered || taps[3] != self.block_count {
            return bad(
                "stage_taps",
                format!("{taps:?} must increase and end at block_count {}", self.block_count),
            );
        }
        Ok(())
    }
}

/// Four stage taps plus the bottleneck output, all on the token grid.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub stages: [Var; 4],
    /// Output of the last block (after its adapter), `[B, C, D', H', W']`.
    pub last_block: Var,
    /// Bottleneck output, `[B, neck_channels, D', H', W']`.
    pub final_map: Var,
}

fn block_prefix(i: usize) -> String {
    format!("encoder.block{i}")
}

/// Checks a `[B, in, D, H, W]` input against the configured patch size.
pub fn check_input(cfg: &EncoderConfig, shape: &[usize]) -> Result<()> {
    if shape.len() != 5 || shape[1] != cfg.in_channels {
        return Err(Error::Shape(format!("encoder input must be [B, {}, D, H, W], got {shape:?}", cfg.in_channels)));
    }
    let k = cfg.patch_kernel;
    if let Some(a) = (0..3).find(|&a| shape[2 + a] % k != 0) {
        return Err(Error::Shape(format!(
            "input extent {} on spatial axis {a} is not a multiple of the patch kernel {k}",
            shape[2 + a]
        )));
    }
    let grid = [shape[2] / k, shape[3] / k, shape[4] / k];
    if grid != cfg.grid {
        return Err(Error::Shape(format!("input gives token grid {grid:?}, encoder expects {:?}", cfg.grid)));
    }
    Ok(())
}

/// Planar `1×k×k` conv (stride `(1,k,k)`) followed by a depthwise `k×1×1`
/// conv (stride `(k,1,1)`). Returns `[B, C, D', H', W']`.
pub fn embed_patches(ctx: &mut Ctx, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    check_input(cfg, ctx.graph.shape(x))?;
    let k = cfg.patch_kernel;
    let planar = ctx.conv(x, "encoder.patch_embed.planar", ConvSpec::strided([1, k, k]), true)?;
    let depth = ConvSpec::strided([k, 1, 1]).with_groups(cfg.embed_dim);
    ctx.conv(planar, "encoder.patch_embed.depth", depth, false)
}

/// `table_2d[:, h, w] + table_depth[:, d]`.
pub fn positional_encoding(store: &ParamStore, cfg: &EncoderConfig, coords: [usize; 3]) -> Result<Vec<f64>> {
    let [d, h, w] = coords;
    let [gd, gh, gw] = cfg.grid;
    if d >= gd || h >= gh || w >= gw {
        return Err(Error::Index(format!("positional coordinate {coords:?} outside grid {:?}", cfg.grid)));
    }
    let t2 = store.tensor("encoder.pos_embed.table_2d")?.data();
    let td = store.tensor("encoder.pos_embed.table_depth")?.data();
    Ok((0..cfg.embed_dim)
        .map(|c| t2[(c * gh + h) * gw + w] + td[c * gd + d])
        .collect())
}

/// Adds the decomposed positional encoding to a `[B, C, D', H', W']` map.
pub fn add_positional(ctx: &mut Ctx, cfg: &EncoderConfig, x: Var) -> Result<Var> {
    let c = cfg.embed_dim;
    let [gd, gh, gw] = cfg.grid;
    let t2 = ctx.param("encoder.pos_embed.table_2d")?;
    let td = ctx.param("encoder.pos_embed.table_depth")?;
    let t2 = ctx.graph.reshape(t2, &[1, c, 1, gh, gw])?;
    let t2 = ctx.graph.upsample_nearest(t2, [gd, 1, 1])?;
    let td = ctx.graph.reshape(td, &[1, c, gd, 1, 1])?;
    let td = ctx.graph.upsample_nearest(td, [1, gh, gw])?;
    let mut pos = ctx.graph.add(t2, td)?;
    let batch = ctx.graph.shape(x)[0];
    if batch > 1 {
        pos = ctx.graph.concat(&vec![pos; batch], 0)?;
    }
    Ok(ctx.graph.add(x, pos)?)
}

static CLAMP_NOTED: AtomicBool = AtomicBool::new(false);

/// Pre-norm transformer block on `[B, N, C]` tokens with windowed attention.
pub fn attention_block(ctx: &mut Ctx, cfg: &EncoderConfig, x: Var, index: usize) -> Result<Var> {
    let spec = cfg.window_spec();
    let shape = ctx.graph.shape(x).to_vec();
    if shape.len() != 3 || shape[1] != spec.tokens() || shape[2] != cfg.embed_dim {
        return Err(Error::Shape(format!("block expects [B, {}, {}], got {shape:?}", spec.tokens(), cfg.embed_dim)));
    }
    if spec.is_clamped() && !CLAMP_NOTED.swap(true, Ordering::Relaxed) {
        log::info!("window {:?} exceeds token grid {:?}; clamped to {:?}", spec.window, spec.grid, spec.effective_window());
    }
    let p = block_prefix(index);
    let h = ctx.layer_norm(x, &format!("{p}.norm1"))?;
    let qkv = ctx.linear(h, &format!("{p}.attn.qkv"), true)?;
    let a = ctx.graph.window_attention(qkv, spec)?;
    let a = ctx.linear(a, &format!("{p}.attn.proj"), true)?;
    let x = ctx.graph.add(x, a)?;
    let h = ctx.layer_norm(x, &format!("{p}.norm2"))?;
    let h = ctx.linear(h, &format!("{p}.mlp.lin1"), true)?;
    let h = ctx.graph.gelu(h);
    let h = ctx.linear(h, &format!("{p}.mlp.lin2"), true)?;
    Ok(ctx.graph.add(x, h)?)
}

/// `X + DWConv3D(Act(X·W_down))·W_up` on `[B, N, C]` tokens.
pub fn depth_adapter(ctx: &mut Ctx, cfg: &EncoderConfig, x: Var, index: usize) -> Result<Var> {
    let p = format!("{}.adapter", block_prefix(index));
    let b = ctx.graph.shape(x)[0];
    let n = cfg.adapter_dim();
    let [gd, gh, gw] = cfg.grid;
    let h = ctx.linear(x, &format!("{p}.down"), false)?;
    let h = ctx.activation(h, cfg.adapter_activation);
    let h = ctx.graph.reshape(h, &[b, gd, gh, gw, n])?;
    let h = ctx.graph.permute(h, &[0, 4, 1, 2, 3])?;
    let h = ctx.conv(h, &format!("{p}.dwconv"), ConvSpec::same([3, 3, 3]).with_groups(n), false)?;
    let h = ctx.graph.permute(h, &[0, 2, 3, 4, 1])?;
    let h = ctx.graph.reshape(h, &[b, gd * gh * gw, n])?;
    let h = ctx.linear(h, &format!("{p}.up"), false)?;
    Ok(ctx.graph.add(x, h)?)
}

/// `conv1 -> LN -> conv3 -> LN` (kernel sizes 1³ and 3³), trained from scratch.
pub fn bottleneck(ctx: &mut Ctx, x: Var) -> Result<Var> {
    let h = ctx.conv(x, "encoder.bottleneck.conv1", ConvSpec::same([1, 1, 1]), true)?;
    let h = ctx.channel_norm(h, "encoder.bottleneck.norm1")?;
    let h = ctx.conv(h, "encoder.bottleneck.conv2", ConvSpec::same([3, 3, 3]), true)?;
    ctx.channel_norm(h, "encoder.bottleneck.norm2")
}

fn tokens_to_map(ctx: &mut Ctx, cfg: &EncoderConfig, t: Var) -> Result<Var> {
    let b = ctx.graph.shape(t)[0];
    let [gd, gh, gw] = cfg.grid;
    let m = ctx.graph.reshape(t, &[b, gd, gh, gw, cfg.embed_dim])?;
    Ok(ctx.graph.permute(m, &[0, 4, 1, 2, 3])?)
}

/// Runs the encoder up to (and including) the last block and returns the
/// per-block token outputs, index 0 being the embedded tokens.
pub fn encode_tokens(ctx: &mut Ctx, cfg: &EncoderConfig, x: Var) -> Result<Vec<Var>> {
    let map = embed_patches(ctx, cfg, x)?;
    let map = add_positional(ctx, cfg, map)?;
    let b = ctx.graph.shape(map)[0];
    let t = ctx.graph.permute(map, &[0, 2, 3, 4, 1])?;
    let mut t = ctx.graph.reshape(t, &[b, cfg.tokens(), cfg.embed_dim])?;
    let mut outputs = vec![t];
    for i in 0..cfg.block_count {
        t = attention_block(ctx, cfg, t, i)?;
        t = depth_adapter(ctx, cfg, t, i)?;
        outputs.push(t);
    }
    Ok(outputs)
}

pub fn encoder_forward(ctx: &mut Ctx, cfg: &EncoderConfig, x: Var) -> Result<FeaturePyramid> {
    let outputs = encode_tokens(ctx, cfg, x)?;
    let taps = cfg.taps();
    let mut stages = [outputs[0]; 4];
    for (slot, &tap) in taps.iter().enumerate() {
        stages[slot] = tokens_to_map(ctx, cfg, outputs[tap])?;
    }
    let last_block = tokens_to_map(ctx, cfg, *outputs.last().unwrap())?;
    let final_map = bottleneck(ctx, last_block)?;
    Ok(FeaturePyramid {
        stages,
        last_block,
        final_map,
    })
}

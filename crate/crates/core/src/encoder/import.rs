//! Encoder parameter layout and import from a 2D checkpoint.
//!
//! 2D archive names (all `encoder.`-prefixed):
//!
//! | 2D entry                          | shape           | 3D parameter                        |
//! |-----------------------------------|-----------------|-------------------------------------|
//! | `patch_embed.weight`              | `[C, in, k, k]` | `patch_embed.planar.weight` `[C, in, 1, k, k]` |
//! | `patch_embed.bias`                | `[C]`           | `patch_embed.planar.bias`           |
//! | `pos_embed`                       | `[C, H', W']`   | `pos_embed.table_2d`                |
//! | `block{i}.norm{1,2}.{weight,bias}`| `[C]`           | same name (tunable)                 |
//! | `block{i}.attn.qkv.{weight,bias}` | `[C, 3C]`, `[3C]` | same name                         |
//! | `block{i}.attn.proj.{weight,bias}`| `[C, C]`, `[C]` | same name                           |
//! | `block{i}.mlp.lin1.{weight,bias}` | `[C, mC]`, `[mC]` | same name                         |
//! | `block{i}.mlp.lin2.{weight,bias}` | `[mC, C]`, `[C]` | same name                          |
//!
//! Linear weights are stored `[in, out]`.

use autoprosam_tape::Tensor;

use super::EncoderConfig;
use crate::archive::Archive;
use crate::params::{Init, ParamDef, ParamStore};
use crate::{Error, Result};

/// Every encoder parameter of the 3D model with its policy and fresh init.
/// Inherited entries carry placeholder inits; the importer overwrites them.
pub fn encoder_param_defs(cfg: &EncoderConfig) -> Vec<ParamDef> {
    let c = cfg.embed_dim;
    let k = cfg.patch_kernel;
    let m = cfg.mlp_ratio * c;
    let n = cfg.adapter_dim();
    let neck = cfg.neck_channels;
    let [gd, gh, gw] = cfg.grid;
    let mut defs = vec![
        ParamDef::frozen("encoder.patch_embed.planar.weight", &[c, cfg.in_channels, 1, k, k], Init::Zeros),
        ParamDef::frozen("encoder.patch_embed.planar.bias", &[c], Init::Zeros),
        ParamDef::tunable("encoder.patch_embed.depth.weight", &[c, 1, k, 1, 1], Init::Delta),
        ParamDef::frozen("encoder.pos_embed.table_2d", &[c, gh, gw], Init::Zeros),
        ParamDef::tunable("encoder.pos_embed.table_depth", &[c, gd], Init::Zeros),
    ];
    for i in 0..cfg.block_count {
        let p = format!("encoder.block{i}");
        for norm in ["norm1", "norm2"] {
            defs.push(ParamDef::tunable(format!("{p}.{norm}.weight"), &[c], Init::Ones));
            defs.push(ParamDef::tunable(format!("{p}.{norm}.bias"), &[c], Init::Zeros));
        }
        for (name, fan_in, fan_out) in [("attn.qkv", c, 3 * c), ("attn.proj", c, c), ("mlp.lin1", c, m), ("mlp.lin2", m, c)] {
            defs.push(ParamDef::frozen(format!("{p}.{name}.weight"), &[fan_in, fan_out], Init::Zeros));
            defs.push(ParamDef::frozen(format!("{p}.{name}.bias"), &[fan_out], Init::Zeros));
        }
        defs.push(ParamDef::tunable(
            format!("{p}.adapter.down.weight"),
            &[c, n],
            Init::Normal {
                std: 1.0 / (c as f64).sqrt(),
            },
        ));
        defs.push(ParamDef::tunable(format!("{p}.adapter.dwconv.weight"), &[n, 1, 3, 3, 3], Init::Delta));
        defs.push(ParamDef::tunable(format!("{p}.adapter.up.weight"), &[n, c], Init::Zeros));
    }
    for (conv, norm, cin, k) in [("conv1", "norm1", c, 1), ("conv2", "norm2", neck, 3)] {
        let p = "encoder.bottleneck";
        defs.push(ParamDef::tunable(
            format!("{p}.{conv}.weight"),
            &[neck, cin, k, k, k],
            Init::He { fan_in: cin * k * k * k },
        ));
        defs.push(ParamDef::tunable(format!("{p}.{conv}.bias"), &[neck], Init::Zeros));
        defs.push(ParamDef::tunable(format!("{p}.{norm}.weight"), &[neck], Init::Ones));
        defs.push(ParamDef::tunable(format!("{p}.{norm}.bias"), &[neck], Init::Zeros));
    }
    defs
}

/// Names and shapes the 2D checkpoint must contain.
pub fn surrogate_2d_shapes(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    inherited_entries(cfg).into_iter().map(|(src, _, shape)| (src, shape)).collect()
}

/// `(2D entry, 3D parameter, 2D shape)` for everything copied on import.
pub fn inherited_entries(cfg: &EncoderConfig) -> Vec<(String, String, Vec<usize>)> {
    let c = cfg.embed_dim;
    let k = cfg.patch_kernel;
    let m = cfg.mlp_ratio * c;
    let mut out = vec![
        (
            "encoder.patch_embed.weight".to_string(),
            "encoder.patch_embed.planar.weight".to_string(),
            vec![c, cfg.in_channels, k, k],
        ),
        ("encoder.patch_embed.bias".into(), "encoder.patch_embed.planar.bias".into(), vec![c]),
        ("encoder.pos_embed".into(), "encoder.pos_embed.table_2d".into(), vec![c, cfg.grid[1], cfg.grid[2]]),
    ];
    for i in 0..cfg.block_count {
        let p = format!("encoder.block{i}");
        let mut same = |suffix: &str, shape: Vec<usize>| {
            let name = format!("{p}.{suffix}");
            out.push((name.clone(), name, shape));
        };
        for norm in ["norm1", "norm2"] {
            same(&format!("{norm}.weight"), vec![c]);
            same(&format!("{norm}.bias"), vec![c]);
        }
        for (name, fan_in, fan_out) in [("attn.qkv", c, 3 * c), ("attn.proj", c, c), ("mlp.lin1", c, m), ("mlp.lin2", m, c)] {
            same(&format!("{name}.weight"), vec![fan_in, fan_out]);
            same(&format!("{name}.bias"), vec![fan_out]);
        }
    }
    out
}

/// Builds the encoder parameter store: inherited weights are copied from
/// the 2D archive, adaptation parameters are initialized from `seed`
/// (depth kernel and adapter convs as deltas, depth table and `W_up` zero).
pub fn import_2d_checkpoint(archive: &Archive, cfg: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let inherited = inherited_entries(cfg);
    for (src, _, shape) in &inherited {
        let e = archive.get(src).ok_or_else(|| Error::Import {
            entry: src.clone(),
            detail: "missing from checkpoint".into(),
        })?;
        if &e.shape != shape {
            return Err(Error::Import {
                entry: src.clone(),
                detail: format!("expected shape {shape:?}, found {:?}", e.shape),
            });
        }
    }
    let mut store = ParamStore::new();
    for def in encoder_param_defs(cfg) {
        let value = match inherited.iter().find(|(_, dst, _)| *dst == def.name) {
            Some((src, ..)) => Tensor::from_vec(&def.shape, archive.get(src).expect("validated").data.clone())?,
            None => crate::params::materialize(&def, seed),
        };
        store.insert(def.name, value, def.frozen)?;
    }
    Ok(store)
}

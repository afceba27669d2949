//! Shared fixtures, independent reference implementations and the checks
//! behind the acceptance suite.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Arc;

use autoprosam::archive::Archive;
use autoprosam::config::RunConfig;
use autoprosam::data::load_split;
use autoprosam::decoder::{decode, decoder_param_defs, mlam_fuse, DecoderConfig};
use autoprosam::encoder::{
    depth_adapter, encode_tokens, encoder_param_defs, import_2d_checkpoint, inherited_entries, positional_encoding,
    EncoderConfig, FeaturePyramid,
};
use autoprosam::eval::{evaluate, Case};
use autoprosam::infer::{sliding_window_infer, window_starts, window_weights, Blending, Segmenter, SlidingWindowConfig};
use autoprosam::metrics::{dice_score, nsd_score};
use autoprosam::model::{Model, ModelConfig};
use autoprosam::nn::Ctx;
use autoprosam::params::ParamStore;
use autoprosam::phantom::{generate_phantom, generate_surrogate_2d_checkpoint, write_dataset, DatasetSpec, PhantomSpec};
use autoprosam::prompt::{apg_forward, apg_param_defs, ApgConfig};
use autoprosam::train::{count_params, fit, lr_at, seg_loss, Dataset, FitOptions, LossConfig, OptimConfig};
use autoprosam::volume::augment::AugmentConfig;
use autoprosam::volume::manifest::Split;
use autoprosam::volume::preprocess::{clip_and_normalize, Normalization, Preset};
use autoprosam::volume::{LabelMap, Volume};
use autoprosam_tape::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Tiny model: 8³ patches, 2³ token grid, two blocks.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            embed_dim: 8,
            block_count: 2,
            head_count: 2,
            patch_kernel: 4,
            window_size: [2, 2, 2],
            grid: [2, 2, 2],
            neck_channels: 4,
            ..EncoderConfig::default()
        },
        apg: ApgConfig {
            level_count: 2,
            base_channels: 2,
            output_channels: None,
        },
        decoder: DecoderConfig {
            fusion_channels: 4,
            ..DecoderConfig::default()
        },
    }
}

pub fn tiny_model(seed: u64) -> Model {
    let cfg = tiny_model_config();
    let ck = generate_surrogate_2d_checkpoint(&cfg.encoder, seed);
    Model::from_2d_checkpoint(&ck, cfg, seed).unwrap()
}

/// Preprocessed single-sphere phantom case.
pub fn sphere_case(grid: [usize; 3], radius: [f64; 2], noise: f64, seed: u64) -> Case {
    let mut spec = PhantomSpec::new(grid, 1, seed);
    spec.noise_sigma = noise;
    spec.radius_range_vox = radius;
    let (v, l) = generate_phantom(&spec).unwrap();
    let mut pre = Preset::Btcv.config();
    pre.target_spacing_mm = [1.0; 3];
    Case {
        id: format!("case{seed}"),
        image: clip_and_normalize(&v, &pre).unwrap(),
        labels: Some(l),
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `name -> sha256` for every file under `dir`.
pub fn hash_tree(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(rel, hash_bytes(&std::fs::read(&p).unwrap()));
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// 2D reference encoder, written with plain loops over the checkpoint arrays.

fn entry<'a>(a: &'a Archive, name: &str) -> &'a [f64] {
    &a.get(name).unwrap_or_else(|| panic!("{name} missing")).data
}

fn ref_layer_norm(x: &[f64], c: usize, g: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(c).zip(out.chunks_mut(c)) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for i in 0..c {
            o[i] = (row[i] - mean) * inv * g[i] + b[i];
        }
    }
    out
}

fn ref_linear(x: &[f64], cin: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let cout = b.len();
    let mut out = Vec::with_capacity(x.len() / cin * cout);
    for row in x.chunks(cin) {
        for o in 0..cout {
            let mut s = b[o];
            for i in 0..cin {
                s += row[i] * w[i * cout + o];
            }
            out.push(s);
        }
    }
    out
}

fn ref_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn ref_window_attention(qkv: &[f64], grid: [usize; 2], win: [usize; 2], c: usize, heads: usize) -> Vec<f64> {
    let hd = c / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let n = grid[0] * grid[1];
    let mut out = vec![0.0; n * c];
    for wy in 0..grid[0] / win[0] {
        for wx in 0..grid[1] / win[1] {
            let toks: Vec<usize> = (0..win[0])
                .flat_map(|y| (0..win[1]).map(move |x| (wy * win[0] + y) * grid[1] + wx * win[1] + x))
                .collect();
            for h in 0..heads {
                for &i in &toks {
                    let q = &qkv[i * 3 * c + h * hd..i * 3 * c + (h + 1) * hd];
                    let scores: Vec<f64> = toks
                        .iter()
                        .map(|&j| {
                            let k = &qkv[j * 3 * c + c + h * hd..j * 3 * c + c + (h + 1) * hd];
                            q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale
                        })
                        .collect();
                    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for (p, &j) in e.iter().zip(&toks) {
                        for d in 0..hd {
                            out[i * c + h * hd + d] += p / z * qkv[j * 3 * c + 2 * c + h * hd + d];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Token outputs `[embedded, block 1, ..., block L]`, each `[H'·W', C]`,
/// of a 2D ViT encoder on a `[in, H, W]` image.
pub fn reference_encoder_2d(a: &Archive, cfg: &EncoderConfig, image: &[f64], hw: [usize; 2]) -> Vec<Vec<f64>> {
    let (c, k, cin) = (cfg.embed_dim, cfg.patch_kernel, cfg.in_channels);
    let grid = [hw[0] / k, hw[1] / k];
    let w = entry(a, "encoder.patch_embed.weight");
    let b = entry(a, "encoder.patch_embed.bias");
    let pos = entry(a, "encoder.pos_embed");
    let mut t = vec![0.0; grid[0] * grid[1] * c];
    for gy in 0..grid[0] {
        for gx in 0..grid[1] {
            for o in 0..c {
                let mut s = b[o];
                for i in 0..cin {
                    for y in 0..k {
                        for x in 0..k {
                            s += w[((o * cin + i) * k + y) * k + x] * image[(i * hw[0] + gy * k + y) * hw[1] + gx * k + x];
                        }
                    }
                }
                t[(gy * grid[1] + gx) * c + o] = s + pos[(o * grid[0] + gy) * grid[1] + gx];
            }
        }
    }
    let win = [cfg.window_size[1].min(grid[0]), cfg.window_size[2].min(grid[1])];
    let mut outs = vec![t.clone()];
    for blk in 0..cfg.block_count {
        let p = format!("encoder.block{blk}");
        let e = |s: &str| entry(a, &format!("{p}.{s}"));
        let h = ref_layer_norm(&t, c, e("norm1.weight"), e("norm1.bias"));
        let qkv = ref_linear(&h, c, e("attn.qkv.weight"), e("attn.qkv.bias"));
        let att = ref_window_attention(&qkv, grid, win, c, cfg.head_count);
        let proj = ref_linear(&att, c, e("attn.proj.weight"), e("attn.proj.bias"));
        t.iter_mut().zip(&proj).for_each(|(x, y)| *x += y);
        let h = ref_layer_norm(&t, c, e("norm2.weight"), e("norm2.bias"));
        let m = ref_linear(&h, c, e("mlp.lin1.weight"), e("mlp.lin1.bias"));
        let m: Vec<f64> = m.into_iter().map(ref_gelu).collect();
        let m = ref_linear(&m, cfg.mlp_ratio * c, e("mlp.lin2.weight"), e("mlp.lin2.bias"));
        t.iter_mut().zip(&m).for_each(|(x, y)| *x += y);
        outs.push(t.clone());
    }
    outs
}

pub fn rel_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------------------
// Finite differences.

/// Worst relative error between tape gradients and central differences
/// over a deterministic sample of coordinates of each named parameter.
pub fn grad_check(store: &mut ParamStore, names: &[String], per_param: usize, f: &dyn Fn(&mut Ctx) -> Var) -> (f64, usize) {
    let analytic = {
        let mut ctx = Ctx::new(store, true);
        let out = f(&mut ctx);
        ctx.gradients(out).unwrap()
    };
    let eval = |store: &ParamStore| {
        let mut ctx = Ctx::new(store, false);
        let out = f(&mut ctx);
        ctx.value(out).item()
    };
    let h = 1e-5;
    let (mut worst, mut checked) = (0.0f64, 0);
    for name in names {
        let g = analytic.get(name).unwrap_or_else(|| panic!("no gradient for {name}"));
        let n = g.numel();
        let picks: BTreeSet<usize> = (0..per_param.min(n)).map(|i| i * n / per_param.min(n) + (n / per_param.min(n)) / 2).map(|i| i.min(n - 1)).collect();
        for i in picks {
            let orig = store.tensor(name).unwrap().data()[i];
            store.tensor_mut(name).unwrap().data_mut()[i] = orig + h;
            let up = eval(store);
            store.tensor_mut(name).unwrap().data_mut()[i] = orig - h;
            let down = eval(store);
            store.tensor_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = g.data()[i];
            let scale = a.abs().max(numeric.abs());
            if scale > 1e-7 {
                worst = worst.max((a - numeric).abs() / scale);
            }
            checked += 1;
        }
    }
    (worst, checked)
}

fn weighted_sum(ctx: &mut Ctx, y: Var, seed: u64) -> Var {
    let r = ctx.input(random_tensor(ctx.graph.shape(y), seed));
    let p = ctx.graph.mul(y, r).unwrap();
    ctx.graph.sum(p)
}

fn randomize(store: &mut ParamStore, prefix: &str, scale: f64, seed: u64) {
    let names: Vec<String> = store.names().filter(|n| n.contains(prefix)).map(String::from).collect();
    for (i, n) in names.iter().enumerate() {
        let t = store.tensor_mut(n).unwrap();
        let r = random_tensor(t.shape(), seed + i as u64);
        t.data_mut().iter_mut().zip(r.data()).for_each(|(a, b)| *a = b * scale);
    }
}

// ---------------------------------------------------------------------------
// Metric oracles.

/// Dice evaluated directly on indicator vectors.
pub fn oracle_dice(pred: &[u8], gt: &[u8], class: u8) -> f64 {
    let p: Vec<f64> = pred.iter().map(|&v| (v == class) as u8 as f64).collect();
    let g: Vec<f64> = gt.iter().map(|&v| (v == class) as u8 as f64).collect();
    let inter: f64 = p.iter().zip(&g).map(|(a, b)| a * b).sum();
    let (sp, sg): (f64, f64) = (p.iter().sum(), g.iter().sum());
    if sp + sg == 0.0 {
        100.0
    } else {
        2.0 * inter / (sp + sg) * 100.0
    }
}

fn oracle_surface(mask: &[bool], shape: [usize; 3]) -> Vec<[usize; 3]> {
    let at = |d: isize, h: isize, w: isize| -> bool {
        if d < 0 || h < 0 || w < 0 || d >= shape[0] as isize || h >= shape[1] as isize || w >= shape[2] as isize {
            return false;
        }
        mask[(d as usize * shape[1] + h as usize) * shape[2] + w as usize]
    };
    let mut out = Vec::new();
    for d in 0..shape[0] as isize {
        for h in 0..shape[1] as isize {
            for w in 0..shape[2] as isize {
                let faces = [(-1, 0, 0), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)];
                if at(d, h, w) && faces.iter().any(|&(a, b, c)| !at(d + a, h + b, w + c)) {
                    out.push([d as usize, h as usize, w as usize]);
                }
            }
        }
    }
    out
}

/// Exhaustive all-pairs surface agreement.
pub fn oracle_nsd(pred: &LabelMap, gt: &LabelMap, class: u8, tol: f64) -> f64 {
    let shape = gt.shape();
    let sp = gt.spacing();
    let a = oracle_surface(&pred.data().iter().map(|&v| v == class).collect::<Vec<_>>(), shape);
    let b = oracle_surface(&gt.data().iter().map(|&v| v == class).collect::<Vec<_>>(), shape);
    if a.is_empty() && b.is_empty() {
        return 100.0;
    }
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let d2 = |p: [usize; 3], q: [usize; 3]| -> f64 {
        (0..3).map(|i| ((p[i] as f64 - q[i] as f64) * sp[i]).powi(2)).sum()
    };
    let near = |from: &[[usize; 3]], to: &[[usize; 3]]| from.iter().filter(|&&p| to.iter().any(|&q| d2(p, q) <= tol * tol)).count();
    (near(&a, &b) + near(&b, &a)) as f64 / (a.len() + b.len()) as f64 * 100.0
}

/// Random label map made of a few boxes and spheres plus salt noise.
pub fn random_label_map(r: &mut ChaCha8Rng, shape: [usize; 3], spacing: [f64; 3]) -> LabelMap {
    let n: usize = shape.iter().product();
    let mut data = vec![0u8; n];
    for _ in 0..r.gen_range(0..4) {
        let c = [0, 1, 2].map(|a| r.gen_range(0..shape[a]) as f64);
        let rad = r.gen_range(0.5..4.0);
        for d in 0..shape[0] {
            for h in 0..shape[1] {
                for w in 0..shape[2] {
                    let q = [d as f64 - c[0], h as f64 - c[1], w as f64 - c[2]];
                    if q.iter().map(|v| v * v).sum::<f64>() <= rad * rad {
                        data[(d * shape[1] + h) * shape[2] + w] = 1;
                    }
                }
            }
        }
    }
    for _ in 0..r.gen_range(0..6) {
        data[r.gen_range(0..n)] = 1;
    }
    LabelMap::new(shape, spacing, data, 1).unwrap()
}

// ---------------------------------------------------------------------------
// Acceptance checks.

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

/// 3D encoder at D' = 1 against the 2D reference on the centre depth slice.
pub fn inheritance_identity() -> Check {
    let cfg = EncoderConfig {
        embed_dim: 16,
        block_count: 3,
        head_count: 2,
        patch_kernel: 4,
        window_size: [4, 4, 4],
        grid: [1, 8, 8],
        ..EncoderConfig::default()
    };
    let ck = generate_surrogate_2d_checkpoint(&cfg, 11);
    let store = import_2d_checkpoint(&ck, &cfg, 11).map_err(|e| e.to_string())?;
    let k = cfg.patch_kernel;
    let (h, w) = (cfg.grid[1] * k, cfg.grid[2] * k);
    let x = random_tensor(&[1, 1, k, h, w], 5);
    let mut ctx = Ctx::new(&store, false);
    let xv = ctx.input(x.clone());
    let outs = encode_tokens(&mut ctx, &cfg, xv).map_err(|e| e.to_string())?;
    let slice = &x.data()[(k / 2) * h * w..(k / 2 + 1) * h * w];
    let reference = reference_encoder_2d(&ck, &cfg, slice, [h, w]);
    let mut worst = 0.0f64;
    for (i, (v, r)) in outs.iter().zip(&reference).enumerate() {
        let e = rel_error(ctx.value(*v).data(), r);
        ensure(e <= 1e-5, || format!("stage {i}: relative error {e:.3e} > 1e-5"))?;
        worst = worst.max(e);
    }
    ensure(outs.len() == reference.len(), || "stage count differs".into())?;
    Ok(format!("{} stages, worst relative error {worst:.2e}", outs.len()))
}

/// Adapter is the identity and the positional encoding depth-invariant at init.
pub fn init_identities() -> Check {
    let cfg = ModelConfig::default();
    let model = Model::from_2d_checkpoint(&generate_surrogate_2d_checkpoint(&cfg.encoder, 3), cfg.clone(), 3)
        .map_err(|e| e.to_string())?;
    let enc = &cfg.encoder;
    let x = random_tensor(&[2, enc.tokens(), enc.embed_dim], 9);
    for i in 0..enc.block_count {
        let mut ctx = Ctx::new(&model.params, false);
        let xv = ctx.input(x.clone());
        let y = depth_adapter(&mut ctx, enc, xv, i).map_err(|e| e.to_string())?;
        let same = ctx.value(y).data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("adapter {i} is not the identity at init"))?;
    }
    let [gd, gh, gw] = enc.grid;
    for h in 0..gh {
        for w in 0..gw {
            let first = positional_encoding(&model.params, enc, [0, h, w]).map_err(|e| e.to_string())?;
            for d in 1..gd {
                let p = positional_encoding(&model.params, enc, [d, h, w]).map_err(|e| e.to_string())?;
                ensure(p == first, || format!("positional encoding differs across depth at ({d}, {h}, {w})"))?;
            }
        }
    }
    Ok(format!("{} adapters bitwise identity; PE equal on all {gd} depth slices", enc.block_count))
}

/// Names the freezing policy makes tunable, derived from the parameter list.
pub fn expected_tunable(defs: &[String], inherited: &BTreeSet<String>) -> BTreeSet<String> {
    defs.iter()
        .filter(|n| {
            n.starts_with("decoder.")
                || n.starts_with("apg.")
                || n.starts_with("encoder.bottleneck.")
                || n.as_str() == "encoder.patch_embed.depth.weight"
                || n.as_str() == "encoder.pos_embed.table_depth"
                || n.contains(".adapter.")
                || (n.starts_with("encoder.block") && n.contains(".norm"))
        })
        .inspect(|n| assert!(!inherited.contains(*n) || n.contains(".norm"), "{n} is both inherited and adaptation"))
        .cloned()
        .collect()
}

pub fn tiny_dataset(train: u64, val: u64) -> Dataset {
    Dataset {
        train: (0..train).map(|s| sphere_case([12, 12, 12], [2.0, 4.0], 10.0, s)).collect(),
        val: (100..100 + val).map(|s| sphere_case([12, 12, 12], [2.0, 4.0], 10.0, s)).collect(),
    }
}

pub fn tiny_fit_options(epochs: usize, steps: usize, seed: u64) -> FitOptions {
    FitOptions {
        optim: OptimConfig {
            base_lr: 5e-3,
            epochs,
            warmup_epochs: 1,
            steps_per_epoch: steps,
            ..OptimConfig::default()
        },
        seed,
        ..FitOptions::default()
    }
}

/// Frozen weights survive training bit for bit; the tunable set is exactly the policy.
pub fn freezing() -> Check {
    let mut model = tiny_model(2);
    let imported = model.params.clone();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut opts = tiny_fit_options(3, 4, 1);
    opts.out_dir = Some(dir.path().to_path_buf());
    let out = fit(&tiny_dataset(2, 1), &mut model, &opts, None).map_err(|e| e.to_string())?;
    let steps = opts.optim.epochs * opts.optim.steps_per_epoch;
    ensure(steps >= 10, || "fewer than 10 steps".into())?;
    let frozen = imported.frozen_names();
    let mut stores = vec![("final model".to_string(), model.params.clone())];
    for c in &out.checkpoints {
        let on_disk = Archive::read(c.path.as_ref().unwrap()).map_err(|e| e.to_string())?;
        stores.push((format!("checkpoint epoch {}", c.epoch), ParamStore::from_archive(&on_disk).map_err(|e| e.to_string())?));
    }
    for (what, store) in &stores {
        for n in &frozen {
            let a = imported.tensor(n).unwrap().data();
            let b = store.tensor(n).unwrap().data();
            ensure(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()), || format!("{n} changed in {what}"))?;
        }
    }
    let changed = imported
        .tunable_names()
        .iter()
        .filter(|n| imported.tensor(n).unwrap() != model.params.tensor(n).unwrap())
        .count();
    ensure(changed > 0, || "no tunable parameter moved".into())?;
    for prefix in ["encoder.block", "encoder.bottleneck", "apg."] {
        let moved = imported
            .tunable_names()
            .iter()
            .any(|n| n.starts_with(prefix) && imported.tensor(n).unwrap() != model.params.tensor(n).unwrap());
        ensure(moved, || format!("no tunable `{prefix}*` parameter moved"))?;
    }
    let names: Vec<String> = model.cfg.param_defs().into_iter().map(|d| d.name).collect();
    let inherited: BTreeSet<String> = inherited_entries(&model.cfg.encoder).into_iter().map(|e| e.1).collect();
    let want = expected_tunable(&names, &inherited);
    let have: BTreeSet<String> = model.params.tunable_names().into_iter().map(String::from).collect();
    ensure(want == have, || {
        format!("tunable set differs: missing {:?}, extra {:?}", want.difference(&have).collect::<Vec<_>>(), have.difference(&want).collect::<Vec<_>>())
    })?;
    let want_frozen: BTreeSet<String> = inherited.iter().filter(|n| !n.contains(".norm")).cloned().collect();
    let have_frozen: BTreeSet<String> = frozen.iter().map(|s| s.to_string()).collect();
    ensure(want_frozen == have_frozen, || "frozen set differs from the inherited non-norm weights".into())?;
    Ok(format!(
        "{steps} steps, {} frozen tensors bit-identical in model and {} checkpoints, {} tunable tensors match policy",
        frozen.len(),
        out.checkpoints.len(),
        have.len()
    ))
}

pub fn grad_check_seg_loss() -> (f64, usize) {
    let mut store = ParamStore::new();
    store.insert("logits", random_tensor(&[1, 3, 4, 4, 4], 21), false).unwrap();
    let mut r = rng(4);
    let labels: Arc<Vec<u8>> = Arc::new((0..64).map(|_| r.gen_range(0..3)).collect());
    let f = move |ctx: &mut Ctx| {
        let z = ctx.param("logits").unwrap();
        let p = ctx.graph.softmax(z, 1);
        seg_loss(&mut ctx.graph, p, labels.clone(), &LossConfig::default()).unwrap()
    };
    grad_check(&mut store, &["logits".to_string()], 192, &f)
}

pub fn grad_check_adapter() -> (f64, usize) {
    let cfg = tiny_model_config().encoder;
    let mut store = ParamStore::new();
    store.extend_from_defs(&encoder_param_defs(&cfg), 1).unwrap();
    randomize(&mut store, "adapter.up", 0.5, 30);
    randomize(&mut store, "adapter.dwconv", 0.5, 40);
    let x = random_tensor(&[1, cfg.tokens(), cfg.embed_dim], 8);
    let f = move |ctx: &mut Ctx| {
        let xv = ctx.input(x.clone());
        let y = depth_adapter(ctx, &cfg, xv, 0).unwrap();
        weighted_sum(ctx, y, 77)
    };
    let names: Vec<String> = ["down", "dwconv", "up"].iter().map(|s| format!("encoder.block0.adapter.{s}.weight")).collect();
    grad_check(&mut store, &names, 12, &f)
}

pub fn grad_check_apg() -> (f64, usize) {
    let cfg = ApgConfig {
        level_count: 2,
        base_channels: 2,
        output_channels: Some(3),
    };
    let mut store = ParamStore::new();
    store.extend_from_defs(&apg_param_defs(&cfg, 4, 3), 5).unwrap();
    randomize(&mut store, "norm", 0.5, 60);
    let names: Vec<String> = store.names().map(String::from).collect();
    let x = random_tensor(&[1, 4, 4, 4, 4], 12);
    let f = move |ctx: &mut Ctx| {
        let xv = ctx.input(x.clone());
        let y = apg_forward(ctx, &cfg, xv).unwrap();
        weighted_sum(ctx, y, 78)
    };
    grad_check(&mut store, &names, 4, &f)
}

pub fn grad_check_decoder() -> (f64, usize) {
    let mc = tiny_model_config();
    let (enc, dec) = (mc.encoder.clone(), mc.decoder);
    let cp = mc.prompt_channels();
    let mut store = ParamStore::new();
    store.extend_from_defs(&decoder_param_defs(&dec, &enc, cp), 6).unwrap();
    let names: Vec<String> = store.names().map(String::from).collect();
    let g = enc.grid;
    let map = |c: usize, s: u64| random_tensor(&[1, c, g[0], g[1], g[2]], s);
    let stages: Vec<Tensor> = (0..4).map(|i| map(enc.embed_dim, 100 + i)).collect();
    let (last, fin, prompt) = (map(enc.embed_dim, 110), map(enc.neck_channels, 111), map(cp, 112));
    let image = random_tensor(&[1, 1, 8, 8, 8], 113);
    let mut r = rng(5);
    let labels: Arc<Vec<u8>> = Arc::new((0..512).map(|_| r.gen_range(0..2)).collect());
    let f = move |ctx: &mut Ctx| {
        let s: Vec<Var> = stages.iter().map(|t| ctx.input(t.clone())).collect();
        let pyramid = FeaturePyramid {
            stages: [s[0], s[1], s[2], s[3]],
            last_block: ctx.input(last.clone()),
            final_map: ctx.input(fin.clone()),
        };
        let p = ctx.input(prompt.clone());
        let img = ctx.input(image.clone());
        let fused = mlam_fuse(ctx, &dec, &pyramid, Some(p)).unwrap();
        let logits = decode(ctx, &dec, &enc, fused, img).unwrap();
        let probs = ctx.graph.softmax(logits, 1);
        seg_loss(&mut ctx.graph, probs, labels.clone(), &LossConfig::default()).unwrap()
    };
    grad_check(&mut store, &names, 4, &f)
}

/// Whole tiny model under the training loss, adaptation parameters only.
pub fn grad_check_model() -> (f64, usize) {
    let model = tiny_model(4);
    let shell = Model {
        cfg: model.cfg.clone(),
        params: ParamStore::new(),
    };
    let mut store = model.params.clone();
    randomize(&mut store, "adapter.up", 0.3, 90);
    randomize(&mut store, "table_depth", 0.1, 95);
    let names: Vec<String> = [
        "encoder.patch_embed.depth.weight",
        "encoder.pos_embed.table_depth",
        "encoder.block0.norm1.weight",
        "encoder.block1.adapter.down.weight",
        "encoder.block1.adapter.dwconv.weight",
        "encoder.block0.adapter.up.weight",
        "encoder.bottleneck.conv2.weight",
        "apg.enc0.conv1.weight",
        "decoder.prompt_fuse.weight",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let x = random_tensor(&[1, 1, 8, 8, 8], 14);
    let mut r = rng(6);
    let labels: Arc<Vec<u8>> = Arc::new((0..512).map(|_| r.gen_range(0..2)).collect());
    let f = move |ctx: &mut Ctx| {
        let xv = ctx.input(x.clone());
        let logits = shell.forward(ctx, xv).unwrap();
        let probs = ctx.graph.softmax(logits, 1);
        seg_loss(&mut ctx.graph, probs, labels.clone(), &LossConfig::default()).unwrap()
    };
    grad_check(&mut store, &names, 3, &f)
}

pub fn gradient_checks() -> Check {
    let mut parts = Vec::new();
    for (what, (err, n)) in [
        ("seg_loss", grad_check_seg_loss()),
        ("adapter", grad_check_adapter()),
        ("apg", grad_check_apg()),
        ("decoder", grad_check_decoder()),
        ("model", grad_check_model()),
    ] {
        ensure(err < 1e-3, || format!("{what}: relative error {err:.3e} over {n} coordinates"))?;
        parts.push(format!("{what} {err:.1e}/{n}"));
    }
    Ok(format!("worst relative error per part: {}", parts.join(", ")))
}

pub fn metric_oracles() -> Check {
    let mut r = rng(2024);
    let taus = [0.5, 1.0, 1.5, 2.0, 3.0];
    let spacings = [[1.0, 1.0, 1.0], [1.5, 1.0, 1.0], [2.0, 0.5, 0.75], [0.8, 0.8, 0.8]];
    let cases = 60;
    for i in 0..cases {
        let shape = [r.gen_range(1..=16), r.gen_range(1..=16), r.gen_range(1..=16)];
        let spacing = spacings[r.gen_range(0..spacings.len())];
        let gt = random_label_map(&mut r, shape, spacing);
        let pred = random_label_map(&mut r, shape, spacing);
        let tau = taus[r.gen_range(0..taus.len())];
        let d = dice_score(&pred, &gt, 1).map_err(|e| e.to_string())?;
        let want = oracle_dice(pred.data(), gt.data(), 1);
        ensure(d == want, || format!("case {i}: dice {d} vs oracle {want}"))?;
        let n = nsd_score(&pred, &gt, 1, tau, spacing).map_err(|e| e.to_string())?;
        let want = oracle_nsd(&pred, &gt, 1, tau);
        ensure(n == want, || format!("case {i} {shape:?} tau {tau}: nsd {n} vs oracle {want}"))?;
    }
    Ok(format!("{cases} random cases up to 16³, Dice and NSD bit-equal to the oracles"))
}

/// Segmenter returning a constant per channel.
pub struct ConstantSegmenter {
    pub patch: [usize; 3],
    pub values: Vec<f64>,
}

impl Segmenter for ConstantSegmenter {
    fn patch_size(&self) -> [usize; 3] {
        self.patch
    }
    fn out_channels(&self) -> usize {
        self.values.len()
    }
    fn predict(&self, _patch: &Tensor) -> autoprosam::Result<Tensor> {
        let n: usize = self.patch.iter().product();
        let data = self.values.iter().flat_map(|&v| std::iter::repeat(v).take(n)).collect();
        Ok(Tensor::from_vec(&[1, self.values.len(), self.patch[0], self.patch[1], self.patch[2]], data)?)
    }
}

/// Normalized blending weight summed over windows, per voxel.
pub fn normalized_weight_totals(shape: [usize; 3], patch: [usize; 3], cfg: &SlidingWindowConfig) -> Vec<f64> {
    let w = window_weights(patch, cfg);
    let starts = [0, 1, 2].map(|a| window_starts(shape[a], patch[a], cfg.overlap_ratio));
    let n: usize = shape.iter().product();
    let mut den = vec![0.0; n];
    let mut windows = Vec::new();
    for &d in &starts[0] {
        for &h in &starts[1] {
            for &x in &starts[2] {
                windows.push([d, h, x]);
            }
        }
    }
    let idx = |s: [usize; 3], l: [usize; 3]| ((s[0] + l[0]) * shape[1] + s[1] + l[1]) * shape[2] + s[2] + l[2];
    let local = |i: usize| [i / (patch[1] * patch[2]), (i / patch[2]) % patch[1], i % patch[2]];
    for s in &windows {
        for (i, wi) in w.iter().enumerate() {
            den[idx(*s, local(i))] += wi;
        }
    }
    let mut total = vec![0.0; n];
    for s in &windows {
        for (i, wi) in w.iter().enumerate() {
            let j = idx(*s, local(i));
            total[j] += wi / den[j];
        }
    }
    total
}

pub fn sliding_window() -> Check {
    let model = tiny_model(8);
    let x = random_tensor(&[1, 1, 8, 8, 8], 31);
    let direct = model.infer(&x).map_err(|e| e.to_string())?;
    let vol = Volume::new([8, 8, 8], [1.0; 3], x.data().to_vec()).unwrap();
    let stitched = sliding_window_infer(&vol, &model, &SlidingWindowConfig::default()).map_err(|e| e.to_string())?;
    ensure(stitched.data() == direct.data(), || "single-window output differs from the direct forward pass".into())?;
    ensure(window_starts(64, 32, 0.75) == [0, 8, 16, 24, 32], || format!("{:?}", window_starts(64, 32, 0.75)))?;
    let mut r = rng(77);
    for _ in 0..200 {
        let (p, extra) = (r.gen_range(1..40), r.gen_range(0..100));
        let o = [0.0, 0.25, 0.5, 0.75, 0.9][r.gen_range(0..5)];
        let n = p + extra;
        // stride patch·(1 - overlap), rounded down
        let stride = ((p as f64 * (1.0 - o) + 1e-9).floor() as usize).max(1);
        let mut want: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + p < n).collect();
        want.push(n - p);
        if extra == 0 {
            want = vec![0];
        }
        ensure(window_starts(n, p, o) == want, || format!("starts for n={n} p={p} o={o}"))?;
    }
    let mut worst = 0.0f64;
    for blending in [Blending::Constant, Blending::Gaussian] {
        let cfg = SlidingWindowConfig {
            blending,
            ..SlidingWindowConfig::default()
        };
        for shape in [[16, 16, 16], [21, 37, 50], [9, 30, 17]] {
            for t in normalized_weight_totals(shape, [8, 12, 16], &cfg) {
                worst = worst.max((t - 1.0).abs());
            }
            let seg = ConstantSegmenter {
                patch: [8, 12, 16],
                values: vec![1.0, -2.5],
            };
            let vol = Volume::filled(shape, [1.0; 3], 0.0).unwrap();
            let out = sliding_window_infer(&vol, &seg, &cfg).map_err(|e| e.to_string())?;
            let n: usize = shape.iter().product();
            for (c, v) in [(0, 1.0), (1, -2.5)] {
                for &o in &out.data()[c * n..(c + 1) * n] {
                    worst = worst.max((o - v).abs() / v.abs());
                }
            }
        }
    }
    ensure(worst < 1e-6, || format!("blending weights deviate from 1 by {worst:.3e}"))?;
    Ok(format!("single window exact, 200 stride layouts, max |Σw - 1| = {worst:.1e}"))
}

pub fn ablation_structure() -> Check {
    let base = ModelConfig::default();
    let mut counts = BTreeMap::new();
    for (apg, mlam) in [(true, true), (true, false), (false, true), (false, false)] {
        let cfg = base.clone().with_ablation(apg, mlam);
        let m = Model::from_2d_checkpoint(&generate_surrogate_2d_checkpoint(&cfg.encoder, 1), cfg, 1).map_err(|e| e.to_string())?;
        counts.insert((apg, mlam), count_params(&m));
    }
    let t = |k| counts[&k].0;
    let frozen: BTreeSet<usize> = counts.values().map(|c| c.1).collect();
    ensure(frozen.len() == 1, || "frozen count changes across ablations".into())?;
    ensure(t((true, true)) > t((true, false)) && t((true, true)) > t((false, true)), || format!("{counts:?}"))?;
    ensure(t((true, false)) > t((false, false)) && t((false, true)) > t((false, false)), || format!("{counts:?}"))?;
    Ok(format!(
        "tunable on/on {} > apg-only {} , mlam-only {} > off/off {}; frozen {}",
        t((true, true)),
        t((true, false)),
        t((false, true)),
        t((false, false)),
        counts[&(true, true)].1
    ))
}

pub fn desk_dataset() -> Dataset {
    Dataset {
        train: (0..4).map(|s| sphere_case([32, 32, 32], [4.0, 8.0], 20.0, s)).collect(),
        val: (10..12).map(|s| sphere_case([32, 32, 32], [4.0, 8.0], 20.0, s)).collect(),
    }
}

pub fn desk_convergence() -> Check {
    let cfg = RunConfig::desk();
    let ck = generate_surrogate_2d_checkpoint(&cfg.encoder, cfg.seed);
    let mut model = Model::from_2d_checkpoint(&ck, cfg.model(), cfg.seed).map_err(|e| e.to_string())?;
    let data = desk_dataset();
    let opts = cfg.fit_options(None);
    let steps = opts.optim.epochs * opts.optim.steps_per_epoch;
    ensure(steps <= 500, || format!("{steps} steps"))?;
    let out = fit(&data, &mut model, &opts, None).map_err(|e| e.to_string())?;
    let best = Model::from_archive(&out.best_checkpoint().archive).map_err(|e| e.to_string())?;
    let eval = evaluate(&data.val, &best, &cfg.sliding_window, &[1.0]).map_err(|e| e.to_string())?;
    let agg = eval.aggregate.ok_or("no validation cases")?;
    let (dice, nsd) = (agg.mean_dice / 100.0, agg.mean_nsd / 100.0);
    ensure(dice >= 0.85 && nsd >= 0.80, || format!("validation Dice {dice:.4}, NSD {nsd:.4} after {steps} steps"))?;
    Ok(format!("{steps} steps, best epoch {}: validation Dice {dice:.4}, NSD(1 mm) {nsd:.4}", out.best_checkpoint().epoch))
}

pub fn recipe_fidelity() -> Check {
    let cfg = OptimConfig::default();
    let at_warmup_end = lr_at(cfg.warmup_epochs, 0, &cfg);
    let at_last = lr_at(cfg.epochs - 1, 0, &cfg);
    ensure((at_warmup_end - 5e-4).abs() <= 1e-9 * 5e-4, || format!("lr at warmup end {at_warmup_end}"))?;
    ensure((at_last - 5e-4 / 100.0).abs() <= 1e-9 * 5e-6, || format!("lr at last epoch {at_last}"))?;
    let rows = [
        (Preset::Btcv, [1.5, 1.0, 1.0], [-125.0, 275.0], 0.0, 1.0),
        (Preset::Amos, [1.5, 1.0, 1.0], [-991.0, 362.0], (-991.0 - 50.0) / 141.0, (362.0 - 50.0) / 141.0),
        (Preset::CtOrg, [2.0, 2.0, 2.0], [-1000.0, 1000.0], -1.0, 1.0),
        (Preset::Pelvic, [1.5, 1.5, 1.5], [-50.0, 150.0], 0.0, 1.0),
    ];
    for (preset, spacing, clip, lo, hi) in rows {
        let c = preset.config();
        ensure(c.target_spacing_mm == spacing && c.clip_range == clip, || format!("{preset:?} table row"))?;
        let v = Volume::new([1, 1, 4], [1.0; 3], vec![clip[0] - 1000.0, clip[0], clip[1], clip[1] + 1000.0]).unwrap();
        let out = clip_and_normalize(&v, &c).map_err(|e| e.to_string())?;
        ensure(out.data() == [lo, lo, hi, hi], || format!("{preset:?}: {:?} vs [{lo}, {hi}]", out.data()))?;
    }
    let amos = Preset::Amos.config();
    ensure(amos.map_intensity(191.0) == 1.0, || "AMOS 191 -> 1".into())?;
    ensure(
        matches!(amos.normalization, Normalization::ShiftScale { subtract, divide } if subtract == 50.0 && divide == 141.0),
        || "AMOS normalization".into(),
    )?;
    Ok(format!("lr {at_warmup_end:e} at warmup end, {at_last:e} at the last epoch; 4 preprocessing rows exact"))
}

/// Synth, train and evaluate a tiny task into `dir`; returns file hashes.
pub fn tiny_pipeline(dir: &Path) -> BTreeMap<String, String> {
    let spec = DatasetSpec::parse(
        "train_cases = 2\nval_cases = 1\ntest_cases = 1\n[phantom]\ngrid_shape = [12, 12, 12]\nnoise_sigma = 10.0\nradius_range_vox = [2.0, 4.0]\nseed = 4\n",
    )
    .unwrap();
    let manifest = write_dataset(&spec, &dir.join("data")).unwrap();
    let mut pre = Preset::Btcv.config();
    pre.target_spacing_mm = [1.0; 3];
    let data = Dataset {
        train: load_split(&manifest, Split::Train, &pre).unwrap(),
        val: load_split(&manifest, Split::Val, &pre).unwrap(),
    };
    let mut model = tiny_model(5);
    let mut opts = tiny_fit_options(3, 4, 9);
    opts.augment = AugmentConfig::default();
    opts.out_dir = Some(dir.join("run"));
    let out = fit(&data, &mut model, &opts, None).unwrap();
    let best = Model::from_archive(&out.best_checkpoint().archive).unwrap();
    let test = load_split(&manifest, Split::Test, &pre).unwrap();
    let eval = evaluate(&test, &best, &SlidingWindowConfig::default(), &[1.0]).unwrap();
    std::fs::write(dir.join("eval.json"), serde_json::to_string(&eval).unwrap()).unwrap();
    hash_tree(dir)
}

pub fn determinism() -> Check {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ha = tiny_pipeline(a.path());
    let hb = tiny_pipeline(b.path());
    ensure(ha == hb, || {
        let diff: Vec<&String> = ha.keys().filter(|k| ha.get(*k) != hb.get(*k)).collect();
        format!("artifacts differ: {diff:?}")
    })?;
    let ckpts = ha.keys().filter(|k| k.ends_with(".ckpt")).count();
    Ok(format!("{} artifacts hash-identical across two runs ({ckpts} checkpoints, log, metrics)", ha.len()))
}

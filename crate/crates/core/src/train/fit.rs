use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use autoprosam_tape::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{seg_loss, LossConfig};
use super::optim::{apply_freeze_policy, AdamW, FreezePolicy};
use super::schedule::{lr_at, OptimConfig};
use super::select_best;
use crate::archive::Archive;
use crate::eval::{evaluate, Case};
use crate::infer::SlidingWindowConfig;
use crate::model::Model;
use crate::nn::Ctx;
use crate::params::{named_rng, ParamStore};
use crate::volume::augment::{augment, AugmentConfig};
use crate::volume::patches::{sample_patches, PatchSpec};
use crate::{Error, Result};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_FILE: &str = "best.ckpt";
pub const FINAL_FILE: &str = "final.ckpt";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Case>,
    pub val: Vec<Case>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    /// Foreground : background patch centres, alternated by step.
    pub pos_neg_ratio: [u32; 2],
    pub sliding_window: SlidingWindowConfig,
    pub tolerance_mm: Vec<f64>,
    pub freeze_policy: FreezePolicy,
    pub seed: u64,
    /// Where the log and checkpoints go; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            pos_neg_ratio: [1, 1],
            sliding_window: SlidingWindowConfig::default(),
            tolerance_mm: vec![1.0],
            freeze_policy: FreezePolicy::Standard,
            seed: 0,
            out_dir: None,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps completed so far.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean training loss over the epoch.
    pub loss: f64,
    pub val_dice: Option<f64>,
    pub val_nsd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub val_dice: Option<f64>,
    pub path: Option<PathBuf>,
    pub archive: Archive,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitOutcome {
    pub records: Vec<EpochRecord>,
    pub checkpoints: Vec<CheckpointRecord>,
    /// Index into `checkpoints` chosen by [`select_best`].
    pub best: usize,
}

impl FitOutcome {
    pub fn best_checkpoint(&self) -> &CheckpointRecord {
        &self.checkpoints[self.best]
    }
}

fn is_foreground(i: usize, ratio: [u32; 2]) -> bool {
    let [p, n] = ratio;
    (i % (p + n) as usize) < p as usize
}

fn draw_patch(case: &Case, foreground: bool, size: [usize; 3], cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<(Vec<f64>, Vec<u8>)> {
    let labels = case
        .labels
        .as_ref()
        .ok_or_else(|| Error::Contract(format!("training case {} has no labels", case.id)))?;
    let has_fg = labels.data().iter().any(|&l| l > 0);
    let ratio = if foreground && has_fg { [1, 0] } else { [0, 1] };
    let spec = PatchSpec {
        patch_size: size,
        pos_neg_ratio: ratio,
        count: 1,
    };
    let patch = sample_patches(&case.image, labels, &spec, rng.gen())?.remove(0);
    let (img, lab) = augment(&patch.image, &patch.labels, cfg, rng)?;
    if img.shape() != size {
        return Err(Error::Shape(format!("augmented patch {:?} differs from {size:?}", img.shape())));
    }
    Ok((img.into_data(), lab.data().to_vec()))
}

fn write_bytes(path: &Path, archive: &Archive) -> Result<()> {
    archive.write(path)
}

struct ResumeState {
    start_epoch: usize,
    optimizer: AdamW,
    best: Option<(usize, f64)>,
}

fn resume_state(model: &mut Model, archive: &Archive) -> Result<ResumeState> {
    let hash = archive.meta("config_hash").unwrap_or_default();
    if hash != model.cfg.hash() {
        return Err(Error::Contract("resume checkpoint was written with a different model configuration".into()));
    }
    let epoch: usize = archive
        .meta("epoch")
        .and_then(|e| e.parse().ok())
        .ok_or_else(|| Error::format("epoch", "resume checkpoint has no epoch"))?;
    let best = match (archive.meta("best_epoch"), archive.meta("best_val_dice")) {
        (Some(e), Some(d)) if e != "none" => Some((
            e.parse().map_err(|_| Error::format("best_epoch", "not an integer"))?,
            d.parse().map_err(|_| Error::format("best_val_dice", "not a number"))?,
        )),
        _ => None,
    };
    model.params = ParamStore::from_archive(archive)?;
    model.params.check_against(&model.cfg.param_defs())?;
    Ok(ResumeState {
        start_epoch: epoch + 1,
        optimizer: AdamW::load_from(archive)?,
        best,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |v| v.to_string())
}

/// Trains `model` in place. With `resume`, continues after the epoch stored
/// in that checkpoint and appends to the existing log.
pub fn fit(dataset: &Dataset, model: &mut Model, opts: &FitOptions, resume: Option<&Archive>) -> Result<FitOutcome> {
    opts.optim.validate()?;
    opts.loss.validate()?;
    opts.sliding_window.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    if opts.pos_neg_ratio == [0, 0] {
        return Err(Error::config("train.pos_neg_ratio", "at least one weight must be positive"));
    }
    let cfg = &opts.optim;
    let policy = opts.freeze_policy;
    let patch = model.cfg.encoder.patch_size();
    let state = match resume {
        Some(a) => resume_state(model, a)?,
        None => ResumeState {
            start_epoch: 0,
            optimizer: AdamW::new(),
            best: None,
        },
    };
    let mut opt = state.optimizer;
    let mut best = state.best;
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut log = match &opts.out_dir {
        Some(dir) => {
            let path = dir.join(LOG_FILE);
            let file = if resume.is_some() {
                OpenOptions::new().create(true).append(true).open(&path)
            } else {
                File::create(&path)
            };
            Some((file.map_err(|e| Error::io(&path, e))?, path))
        }
        None => None,
    };

    let mut records = Vec::new();
    let mut checkpoints: Vec<CheckpointRecord> = Vec::new();
    for epoch in state.start_epoch..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for step in 0..cfg.steps_per_epoch {
            lr = lr_at(epoch, step, cfg);
            let global = epoch * cfg.steps_per_epoch + step;
            let mut rng = named_rng(opts.seed, &format!("fit.epoch{epoch}.step{step}"));
            let mut images = Vec::with_capacity(cfg.batch_size * patch.iter().product::<usize>());
            let mut labels = Vec::with_capacity(images.capacity());
            for b in 0..cfg.batch_size {
                let case = &dataset.train[rng.gen_range(0..dataset.train.len())];
                let fg = is_foreground(global * cfg.batch_size + b, opts.pos_neg_ratio);
                let (img, lab) = draw_patch(case, fg, patch, &opts.augment, &mut rng)?;
                images.extend(img);
                labels.extend(lab);
            }
            let x = Tensor::from_vec(&[cfg.batch_size, 1, patch[0], patch[1], patch[2]], images)?;
            let numeric = |what: &str| Error::Numeric(format!("{what} at epoch {epoch}, step {step}, lr {lr:e}"));
            let (loss, grads) = {
                let mut ctx = Ctx::new(&model.params, true).with_frozen_grads(policy == FreezePolicy::AllTunable);
                let xv = ctx.input(x);
                let logits = model.forward(&mut ctx, xv)?;
                if ctx.value(logits).data().iter().any(|v| !v.is_finite()) {
                    return Err(numeric("non-finite logits"));
                }
                let probs = ctx.graph.softmax(logits, 1);
                let loss = seg_loss(&mut ctx.graph, probs, Arc::new(labels), &opts.loss)?;
                let value = ctx.value(loss).item();
                if !value.is_finite() {
                    return Err(numeric("non-finite loss"));
                }
                (value, ctx.gradients(loss)?)
            };
            let grads = apply_freeze_policy(&model.params, grads, policy)?;
            if grads.values().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(numeric("non-finite gradient"));
            }
            opt.step(&mut model.params, &grads, lr, cfg, policy)?;
            loss_sum += loss;
        }

        let last = epoch + 1 == cfg.epochs;
        let validate = !dataset.val.is_empty() && ((epoch + 1) % cfg.val_every == 0 || last);
        let (val_dice, val_nsd) = if validate {
            let out = evaluate(&dataset.val, &*model, &opts.sliding_window, &opts.tolerance_mm)?;
            match out.aggregate {
                Some(a) => (Some(a.mean_dice), Some(a.mean_nsd)),
                None => (None, None),
            }
        } else {
            (None, None)
        };
        let record = EpochRecord {
            epoch,
            step: (epoch + 1) * cfg.steps_per_epoch,
            lr,
            loss: loss_sum / cfg.steps_per_epoch as f64,
            val_dice,
            val_nsd,
        };
        log::info!(
            "epoch {epoch} loss {:.5} lr {lr:.3e} val dice {}",
            record.loss,
            val_dice.map_or_else(|| "-".to_string(), |d| format!("{d:.2}"))
        );
        if let Some((file, path)) = &mut log {
            let line = serde_json::to_string(&record).expect("record serializes");
            writeln!(file, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
        }
        records.push(record);

        let improved = match (val_dice, best) {
            (Some(d), Some((_, b))) => d >= b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            best = Some((epoch, val_dice.expect("improvement implies a score")));
        }
        if improved || last {
            let mut archive = model.to_archive();
            archive.set_meta("epoch", epoch)?;
            archive.set_meta("val_dice", fmt_opt(val_dice))?;
            archive.set_meta("best_epoch", best.map_or_else(|| "none".to_string(), |b| b.0.to_string()))?;
            archive.set_meta("best_val_dice", fmt_opt(best.map(|b| b.1)))?;
            archive.set_meta("seed", opts.seed)?;
            archive.set_meta("freeze_policy", format!("{policy:?}"))?;
            opt.save_into(&mut archive)?;
            let path = match &opts.out_dir {
                Some(dir) => {
                    let p = dir.join(format!("epoch_{epoch:04}.ckpt"));
                    write_bytes(&p, &archive)?;
                    Some(p)
                }
                None => None,
            };
            checkpoints.push(CheckpointRecord {
                epoch,
                val_dice,
                path,
                archive,
            });
        }
    }

    if checkpoints.is_empty() {
        return Err(Error::Contract(format!("nothing to train: resume epoch is already {}", cfg.epochs)));
    }
    let scored: Vec<f64> = checkpoints.iter().filter_map(|c| c.val_dice).collect();
    let best_idx = if scored.len() == checkpoints.len() {
        select_best(&checkpoints, &scored)
    } else if scored.is_empty() {
        checkpoints.len() - 1
    } else {
        // the final checkpoint can lack a score only when validation is off
        let idx: Vec<usize> = (0..checkpoints.len()).filter(|&i| checkpoints[i].val_dice.is_some()).collect();
        idx[select_best(&idx, &scored)]
    };
    if let Some(dir) = &opts.out_dir {
        write_bytes(&dir.join(BEST_FILE), &checkpoints[best_idx].archive)?;
        write_bytes(&dir.join(FINAL_FILE), &checkpoints[checkpoints.len() - 1].archive)?;
    }
    Ok(FitOutcome {
        records,
        checkpoints,
        best: best_idx,
    })
}

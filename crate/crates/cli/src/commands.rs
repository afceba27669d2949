use std::fs;
use std::path::{Path, PathBuf};

use autoprosam::archive::Archive;
use autoprosam::config::RunConfig;
use autoprosam::data::{load_case, load_split};
use autoprosam::eval::{evaluate, render_table, segment, EvalOutcome};
use autoprosam::infer::SlidingWindowConfig;
use autoprosam::model::Model;
use autoprosam::phantom::{generate_surrogate_2d_checkpoint, write_dataset, DatasetSpec};
use autoprosam::train::{count_params, fit, Dataset};
use autoprosam::volume::io::{save_labels, save_volume};
use autoprosam::volume::manifest::{read_manifest, render_manifest, ManifestEntry, Split};
use autoprosam::{Error, Result};

use crate::{Common, OUTPUT_ENV};

/// 2 configuration, 3 data, 4 numeric.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Config file (or the desk preset) with command-line overrides applied.
fn run_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    if let Ok(dir) = std::env::var(OUTPUT_ENV) {
        cfg.output_dir = PathBuf::from(dir);
    }
    if let Some(dir) = &c.out {
        cfg.output_dir = dir.clone();
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if c.no_apg {
        cfg.decoder.apg_enabled = false;
    }
    if c.no_mlam {
        cfg.decoder.mlam_enabled = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn manifest(cfg: &RunConfig) -> Result<&Path> {
    cfg.manifest
        .as_deref()
        .ok_or_else(|| Error::config("manifest", "no dataset manifest configured"))
}

fn dump_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    mkdir(dir)?;
    write(&dir.join("config.toml"), &cfg.to_toml())
}

fn build_model(cfg: &RunConfig) -> Result<Model> {
    let archive = match &cfg.train.init_checkpoint {
        Some(p) => Archive::read(p)?,
        None => generate_surrogate_2d_checkpoint(&cfg.encoder, cfg.seed),
    };
    Model::from_2d_checkpoint(&archive, cfg.model(), cfg.seed)
}

fn flag(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

pub fn synth(spec: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec).map_err(|e| Error::io(spec, e))?;
    let spec = DatasetSpec::parse(&text)?;
    let manifest = write_dataset(&spec, out)?;
    println!("wrote {} cases; manifest {}", spec.cases().count(), manifest.display());
    Ok(())
}

pub fn preprocess(c: &Common) -> Result<()> {
    let cfg = run_config(c)?;
    let out = cfg.output_dir.join("preprocessed");
    mkdir(&out)?;
    let mut entries = Vec::new();
    for entry in read_manifest(manifest(&cfg)?)? {
        let case = load_case(&entry, &cfg.preprocess)?;
        let image = out.join(format!("{}.vol", case.id));
        let label = out.join(format!("{}_seg.vol", case.id));
        save_volume(&image, &case.image, None)?;
        if let Some(l) = &case.labels {
            save_labels(&label, l)?;
        }
        entries.push(ManifestEntry {
            image,
            label,
            split: entry.split,
        });
    }
    write(&out.join("manifest.tsv"), &render_manifest(&entries, &out))?;
    dump_config(&cfg, &out)?;
    println!("preprocessed {} cases into {}", entries.len(), out.display());
    Ok(())
}

fn print_params(model: &Model) {
    let (tunable, frozen) = count_params(model);
    println!(
        "params: tunable {tunable}, frozen {frozen} (apg {}, mlam {})",
        flag(model.cfg.decoder.apg_enabled),
        flag(model.cfg.decoder.mlam_enabled)
    );
}

fn train_into(cfg: &RunConfig, dir: &Path, resume: Option<&Path>) -> Result<Model> {
    let m = manifest(cfg)?;
    let dataset = Dataset {
        train: load_split(m, Split::Train, &cfg.preprocess)?,
        val: load_split(m, Split::Val, &cfg.preprocess)?,
    };
    let mut model = build_model(cfg)?;
    print_params(&model);
    dump_config(cfg, dir)?;
    let resume = resume.map(Archive::read).transpose()?;
    let outcome = fit(&dataset, &mut model, &cfg.fit_options(Some(dir.to_path_buf())), resume.as_ref())?;
    let best = outcome.best_checkpoint();
    println!(
        "best checkpoint: epoch {} (val dice {})",
        best.epoch,
        best.val_dice.map_or_else(|| "n/a".to_string(), |d| format!("{d:.2}"))
    );
    Model::from_archive(&best.archive)
}

pub fn train(c: &Common, resume: Option<&Path>) -> Result<()> {
    let cfg = run_config(c)?;
    train_into(&cfg, &cfg.output_dir, resume)?;
    Ok(())
}

/// Loads a checkpoint and refuses it if its ablation flags differ from the
/// requested ones.
fn load_checked(cfg: &RunConfig, path: &Path) -> Result<Model> {
    let (model, _) = Model::load(path)?;
    let (want, have) = (&cfg.decoder, &model.cfg.decoder);
    if want.apg_enabled != have.apg_enabled || want.mlam_enabled != have.mlam_enabled {
        return Err(Error::config(
            "decoder",
            format!(
                "checkpoint has apg {} / mlam {} but apg {} / mlam {} was requested",
                flag(have.apg_enabled),
                flag(have.mlam_enabled),
                flag(want.apg_enabled),
                flag(want.mlam_enabled)
            ),
        ));
    }
    Ok(model)
}

fn sliding_window(cfg: &RunConfig) -> SlidingWindowConfig {
    // the model fixes the window size
    SlidingWindowConfig {
        patch_size: None,
        ..cfg.sliding_window
    }
}

pub fn infer(c: &Common, checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    let cfg = run_config(c)?;
    let model = load_checked(&cfg, checkpoint)?;
    let entry = ManifestEntry {
        image: input.to_path_buf(),
        label: PathBuf::new(),
        split: Split::Test,
    };
    let case = load_case(&entry, &cfg.preprocess)?;
    let labels = segment(&case.image, &model, &sliding_window(&cfg))?;
    save_labels(output, &labels)?;
    println!("wrote {}", output.display());
    Ok(())
}

fn write_reports(outcome: &EvalOutcome, dir: &Path) -> Result<()> {
    mkdir(dir)?;
    let mut lines = String::new();
    for r in &outcome.reports {
        lines += &serde_json::to_string(r).expect("report serializes");
        lines.push('\n');
    }
    write(&dir.join("metrics.jsonl"), &lines)?;
    let agg = serde_json::to_string_pretty(&outcome.aggregate).expect("aggregate serializes");
    write(&dir.join("aggregate.json"), &agg)?;
    write(&dir.join("metrics.txt"), &render_table(outcome))
}

pub fn eval(c: &Common, checkpoint: &Path, split: &str) -> Result<()> {
    let cfg = run_config(c)?;
    let split: Split = split.parse()?;
    let model = load_checked(&cfg, checkpoint)?;
    let cases = load_split(manifest(&cfg)?, split, &cfg.preprocess)?;
    let outcome = evaluate(&cases, &model, &sliding_window(&cfg), &cfg.eval.tolerance_mm)?;
    let dir = cfg.output_dir.join(format!("eval_{split}"));
    write_reports(&outcome, &dir)?;
    print!("{}", render_table(&outcome));
    Ok(())
}

pub fn ablate(c: &Common) -> Result<()> {
    let base = run_config(c)?;
    let test = load_split(manifest(&base)?, Split::Test, &base.preprocess)?;
    let mut rows = Vec::new();
    for (apg, mlam) in [(true, true), (false, true), (true, false), (false, false)] {
        let mut cfg = base.clone();
        cfg.decoder.apg_enabled = apg;
        cfg.decoder.mlam_enabled = mlam;
        let dir = base.output_dir.join(format!("apg_{}_mlam_{}", flag(apg), flag(mlam)));
        let model = train_into(&cfg, &dir, None)?;
        let outcome = evaluate(&test, &model, &sliding_window(&cfg), &cfg.eval.tolerance_mm)?;
        write_reports(&outcome, &dir.join("eval_test"))?;
        let (dice, nsd) = outcome.aggregate.map_or((f64::NAN, f64::NAN), |a| (a.mean_dice, a.mean_nsd));
        rows.push((apg, mlam, count_params(&model).0, dice, nsd));
    }
    let mut table = format!("{:<5} {:<5} {:>10} {:>9} {:>9}\n", "apg", "mlam", "tunable", "dice %", "nsd %");
    for (apg, mlam, tunable, dice, nsd) in rows {
        table += &format!("{:<5} {:<5} {tunable:>10} {dice:>9.2} {nsd:>9.2}\n", flag(apg), flag(mlam));
    }
    write(&base.output_dir.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn params(c: &Common) -> Result<()> {
    let cfg = run_config(c)?;
    let model = build_model(&cfg)?;
    print_params(&model);
    println!("prompt branch: {}", model.prompt_branch_size());
    Ok(())
}

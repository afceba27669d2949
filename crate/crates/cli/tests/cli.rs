use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SPEC: &str = "train_cases = 2\nval_cases = 1\ntest_cases = 1\n\n[phantom]\ngrid_shape = [12, 12, 12]\nnoise_sigma = 10.0\nradius_range_vox = [2.0, 4.0]\nseed = 3\n";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_autoprosam"));
    c.env_remove("AUTOPROSAM_OUTPUT_DIR").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesizes a tiny dataset and writes a matching small-model config.
fn setup(dir: &Path) -> PathBuf {
    let spec = dir.join("spec.toml");
    std::fs::write(&spec, SPEC).unwrap();
    let o = run(&["synth", "--spec", s(&spec), "--out", s(&dir.join("data"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = format!(
        "manifest = {:?}\noutput_dir = {:?}\n\n[preprocess]\ntarget_spacing_mm = [1.0, 1.0, 1.0]\nclip_range = [-125.0, 275.0]\n\n[preprocess.normalization]\nmode = \"unit_interval\"\n\n\
         [encoder]\nembed_dim = 8\nblock_count = 2\nhead_count = 2\npatch_kernel = 4\nwindow_size = [2, 2, 2]\ngrid = [2, 2, 2]\nneck_channels = 4\n\n\
         [apg]\nlevel_count = 2\nbase_channels = 2\n\n[decoder]\nfusion_channels = 4\n\n[optim]\nbase_lr = 0.005\nepochs = 3\nwarmup_epochs = 1\nsteps_per_epoch = 3\n",
        dir.join("data/manifest.tsv"),
        dir.join("run"),
    );
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn train_eval_infer_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let run_dir = tmp.path().join("run");

    let o = run(&["train", "-c", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["best.ckpt", "final.ckpt", "train_log.jsonl", "config.toml"] {
        assert!(run_dir.join(f).exists(), "{f} missing");
    }
    let ckpt = run_dir.join("best.ckpt");

    let o = run(&["eval", "-c", s(&cfg), "--checkpoint", s(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let eval_dir = run_dir.join("eval_test");
    for f in ["metrics.jsonl", "aggregate.json", "metrics.txt"] {
        assert!(eval_dir.join(f).exists(), "{f} missing");
    }
    assert!(stdout(&o).contains("mean"));

    let out = tmp.path().join("pred.nii.gz");
    let input = tmp.path().join("data/case003.vol");
    let o = run(&["infer", "-c", s(&cfg), "--checkpoint", s(&ckpt), "--input", s(&input), "--output", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let (pred, _) = autoprosam::volume::io::load_volume(&out).unwrap();
    assert_eq!(pred.shape(), [12, 12, 12]);
    assert!(pred.data().iter().all(|&v| v == 0.0 || v == 1.0));

    // a checkpoint trained with the prompt branch cannot be run without it
    let o = run(&["eval", "-c", s(&cfg), "--checkpoint", s(&ckpt), "--no-apg"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn params_reports_ablation_counts() {
    let on = stdout(&run(&["params"]));
    let off = stdout(&run(&["params", "--no-apg", "--no-mlam"]));
    assert!(on.contains("tunable 50810, frozen 52896"), "{on}");
    assert!(off.contains("tunable 12726, frozen 52896"), "{off}");
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "[optim]\nbase_lr = -1.0\n").unwrap();
    let o = run(&["params", "-c", s(&bad)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("optim.base_lr"));

    let cfg = setup(tmp.path());
    let missing = tmp.path().join("nope.ckpt");
    let o = run(&["eval", "-c", s(&cfg), "--checkpoint", s(&missing)]);
    assert_eq!(code(&o), 3);

    let o = run(&["train"]);
    assert_eq!(code(&o), 2, "no manifest configured");
}

#[test]
fn output_directory_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = setup(tmp.path());
    let env_dir = tmp.path().join("from_env");
    let flag_dir = tmp.path().join("from_flag");
    let o = bin().args(["preprocess", "-c", s(&cfg)]).env("AUTOPROSAM_OUTPUT_DIR", &env_dir).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(env_dir.join("preprocessed/manifest.tsv").exists());
    let o = bin()
        .args(["preprocess", "-c", s(&cfg), "--out", s(&flag_dir)])
        .env("AUTOPROSAM_OUTPUT_DIR", &env_dir)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(flag_dir.join("preprocessed/manifest.tsv").exists());
}

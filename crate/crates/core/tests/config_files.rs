use std::path::PathBuf;

use autoprosam::config::RunConfig;
use autoprosam::Error;

fn repo_file(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn shipped_desk_config_matches_preset() {
    let cfg = RunConfig::load(&repo_file("configs/desk.toml")).unwrap();
    assert_eq!(cfg, RunConfig::desk());
}

#[test]
fn shipped_btcv_config_uses_the_full_recipe() {
    let cfg = RunConfig::load(&repo_file("configs/btcv.toml")).unwrap();
    let d = RunConfig::default();
    assert_eq!(cfg.encoder.patch_size(), [128; 3]);
    assert_eq!((cfg.optim, cfg.preprocess, cfg.loss, cfg.sliding_window), (d.optim, d.preprocess, d.loss, d.sliding_window));
    assert_eq!(cfg.decoder.num_classes, 13);
}

#[test]
fn dump_parses_back() {
    let mut cfg = RunConfig::desk();
    cfg.seed = 17;
    cfg.eval.tolerance_mm = vec![1.0, 2.5];
    cfg.decoder.apg_enabled = false;
    assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
}

#[test]
fn errors_name_the_offending_key() {
    let cases = [
        ("[optim]\nbase_lr = -1.0\n", "optim.base_lr"),
        ("[sliding_window]\noverlap_ratio = 1.0\n", "sliding_window.overlap_ratio"),
        ("[train]\npos_neg_ratio = [0, 0]\n", "train.pos_neg_ratio"),
        ("[eval]\ntolerance_mm = [0.0]\n", "eval.tolerance_mm"),
        ("[optim]\nlearning_rate = 1.0\n", "optim.learning_rate"),
        ("[optim]\nbase_lr = \"fast\"\n", "optim"),
    ];
    for (text, key) in cases {
        match RunConfig::parse(text) {
            Err(Error::Config { key: k, .. }) => assert!(k.contains(key), "{text:?} reported `{k}`"),
            other => panic!("{text:?} gave {other:?}"),
        }
    }
}

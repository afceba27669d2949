mod support;

use autoprosam::archive::Archive;
use autoprosam::train::{fit, select_best, FreezePolicy};
use autoprosam::Error;

#[test]
fn best_checkpoint_prefers_later_ties() {
    assert_eq!(select_best(&["a", "b", "c"], &[0.5, 0.9, 0.9]), 2);
    assert_eq!(select_best(&["a", "b", "c"], &[0.9, 0.5, 0.1]), 0);
    assert_eq!(select_best(&["a", "b"], &[]), 1);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let data = support::tiny_dataset(2, 1);
    let dir = tempfile::tempdir().unwrap();

    let mut full = support::tiny_model(1);
    let mut opts = support::tiny_fit_options(4, 3, 5);
    opts.out_dir = Some(dir.path().join("full"));
    fit(&data, &mut full, &opts, None).unwrap();

    let mut first = support::tiny_model(1);
    let mut short = opts.clone();
    short.out_dir = Some(dir.path().join("split"));
    let partial = fit(&data, &mut first, &short, None).unwrap();
    // restart from the first checkpoint of the same run
    let first_ck = &partial.checkpoints[0];
    assert!(first_ck.epoch + 1 < opts.optim.epochs);
    let ck = first_ck.archive.clone();
    let mut resumed = support::tiny_model(1);
    fit(&data, &mut resumed, &short, Some(&ck)).unwrap();
    assert_eq!(resumed.params, full.params);
}

#[test]
fn all_tunable_policy_moves_inherited_weights() {
    let data = support::tiny_dataset(1, 1);
    let mut m = support::tiny_model(2);
    let before = m.params.clone();
    let mut opts = support::tiny_fit_options(2, 2, 0);
    opts.freeze_policy = FreezePolicy::AllTunable;
    fit(&data, &mut m, &opts, None).unwrap();
    let moved = before.frozen_names().iter().any(|n| before.tensor(n).unwrap() != m.params.tensor(n).unwrap());
    assert!(moved);
}

#[test]
fn checkpoints_on_disk_match_records() {
    let data = support::tiny_dataset(1, 1);
    let dir = tempfile::tempdir().unwrap();
    let mut m = support::tiny_model(2);
    let mut opts = support::tiny_fit_options(3, 2, 0);
    opts.out_dir = Some(dir.path().to_path_buf());
    let out = fit(&data, &mut m, &opts, None).unwrap();
    for c in &out.checkpoints {
        assert_eq!(&Archive::read(c.path.as_ref().unwrap()).unwrap(), &c.archive);
    }
    let best = Archive::read(&dir.path().join("best.ckpt")).unwrap();
    assert_eq!(best, out.best_checkpoint().archive);
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), out.records.len());
}

#[test]
fn exploding_learning_rate_is_reported() {
    let data = support::tiny_dataset(1, 1);
    let mut m = support::tiny_model(2);
    let mut opts = support::tiny_fit_options(3, 3, 0);
    opts.optim.base_lr = 1e200;
    match fit(&data, &mut m, &opts, None) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("epoch"), "{msg}"),
        other => panic!("expected a numeric error, got {:?}", other.map(|o| o.records.len())),
    }
}

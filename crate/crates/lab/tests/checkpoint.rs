mod common;

use common::*;
use meta_attack_core::learner::{evaluate_episodes, held_out_seeds, MetaLearner};
use meta_attack_core::model::ParamSet;
use meta_attack_core::Tensor;
use meta_attack_lab::checkpoint::{build_learner, decode_params, encode_params, sha256_hex, Checkpoint};
use meta_attack_lab::run::{self, init_seed, task_set, train_seed};
use meta_attack_lab::LabError;

fn two_entries() -> ParamSet {
    ParamSet::new(vec![
        ("w".into(), Tensor::new(vec![2, 1], vec![1.0, -0.5]).unwrap()),
        ("scale".into(), Tensor::scalar(2.0)),
    ])
}

// Bytes and hash produced independently with Python's struct and hashlib.
const TWO_ENTRIES_HEX: &str = "4d50415201000000020000000100000077020000000200000001000000000000000000f03f000000000000e0bf050000007363616c65000000000000000000000040";
const TWO_ENTRIES_SHA256: &str = "bb0077f325b5bc4e0189b1040078ff073677d23ef8458115741443f872f1f1c7";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[test]
fn binary_layout_matches_reference_bytes() {
    let bytes = encode_params(&two_entries());
    assert_eq!(hex(&bytes), TWO_ENTRIES_HEX);
    assert_eq!(sha256_hex(&bytes), TWO_ENTRIES_SHA256);
    assert_eq!(decode_params(&bytes).unwrap(), two_entries());
}

#[test]
fn corrupt_parameter_files_are_rejected() {
    let bytes = encode_params(&two_entries());
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(decode_params(&bad_magic).unwrap_err().contains("magic"));
    assert!(decode_params(&bytes[..bytes.len() - 3]).unwrap_err().contains("truncated"));
    let mut long = bytes.clone();
    long.push(0);
    assert!(decode_params(&long).unwrap_err().contains("trailing"));
    let mut version = bytes;
    version[4] = 9;
    assert!(decode_params(&version).unwrap_err().contains("version"));
}

#[test]
fn tampered_checkpoint_fails_its_hash() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_json();
    cfg["training"]["epochs"] = 0.into();
    let config = config_from(&cfg, dir.path());
    let path = train(&config, dir.path());
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(LabError::Checkpoint { .. })));
}

#[test]
fn zero_epochs_saves_the_fresh_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_json();
    cfg["training"]["epochs"] = 0.into();
    let config = config_from(&cfg, dir.path());
    let ck = Checkpoint::load(&train(&config, dir.path())).unwrap();
    let fresh = build_learner(&config.learner, 16, &config.shape, None, init_seed(config.seed)).unwrap();
    assert_eq!(&ck.params, fresh.theta());
    let curve = std::fs::read_to_string(dir.path().join("train").join(run::CURVE_FILE)).unwrap();
    assert_eq!(curve, "epoch,mean_loss,held_out_accuracy\n");
}

#[test]
fn retraining_reproduces_checkpoint_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let config = config_from(&tiny_json(), dir.path());
    let a = run::metatrain(&config, &dir.path().join("a")).unwrap();
    let b = run::metatrain(&config, &dir.path().join("b")).unwrap();
    for (x, y) in [(&a.checkpoint, &b.checkpoint), (&a.curve, &b.curve)] {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    let side = |p: &std::path::Path| std::fs::read(p.with_extension("json")).unwrap();
    assert_eq!(side(&a.checkpoint), side(&b.checkpoint));
}

#[test]
fn curve_accuracy_matches_independent_reevaluation() {
    let dir = tempfile::tempdir().unwrap();
    let config = config_from(&tiny_json(), dir.path());
    let out = run::metatrain(&config, dir.path()).unwrap();
    let learner = Checkpoint::load(&out.checkpoint).unwrap().learner().unwrap();
    let tasks = task_set(&config).unwrap();
    let seeds = held_out_seeds(train_seed(config.seed), config.training.eval_episodes);
    let again = evaluate_episodes(&learner, tasks.held_out.as_ref(), seeds).unwrap();

    let text = std::fs::read_to_string(&out.curve).unwrap();
    let last = text.lines().last().unwrap();
    let logged: f64 = last.rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(logged, again);
    assert_eq!(text.lines().count(), config.training.epochs + 1);
}

#[test]
fn attack_rejects_a_checkpoint_of_another_learner() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_json();
    cfg["training"]["epochs"] = 0.into();
    let config = config_from(&cfg, dir.path());
    let path = train(&config, dir.path());

    let mut other = tiny_json();
    other["learner"]["finetune_steps"] = 3.into();
    let other = config_from(&other, dir.path());
    let err = run::attack(&other, &path, &dir.path().join("out"), &Default::default()).unwrap_err();
    assert!(matches!(err, LabError::Mismatch(_)), "{err}");

    let mut wider = tiny_json();
    wider["shape"]["way"] = 4.into();
    let wider = config_from(&wider, dir.path());
    assert!(run::attack(&wider, &path, &dir.path().join("out2"), &Default::default()).is_err());
}

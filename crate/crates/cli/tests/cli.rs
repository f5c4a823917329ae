use std::path::Path;
use std::process::{Command, Output};

fn splat(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splat"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

const TINY: &[&str] = &[
    "--set",
    "n_source_det=6",
    "--set",
    "n_source_seg=6",
    "--set",
    "n_target_train=4",
    "--set",
    "n_target_eval=4",
    "--set",
    "n_source_eval=4",
    "--set",
    "detector_iters=2",
    "--set",
    "batch_size=2",
];

#[test]
fn help_lists_subcommands() {
    let out = splat(Path::new("."), &["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["gen-data", "train-source", "train-transformer", "pseudo-label", "bench", "run"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn malformed_override_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = splat(dir.path(), &["--set", "detector_iters", "gen-data"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("KEY=VALUE"));
    let out = splat(dir.path(), &["--set", "no_such_key=1", "gen-data"]);
    assert!(!out.status.success());
}

#[test]
fn missing_data_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = splat(dir.path(), &["train-source"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn gen_data_then_train_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = TINY.to_vec();
    args.push("gen-data");
    assert!(splat(dir.path(), &args).status.success());
    assert!(dir.path().join("data/source-det").is_dir());

    let mut args = TINY.to_vec();
    args.push("train-source");
    let out = splat(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("source-style mAP"));

    let mut args = TINY.to_vec();
    args.extend(["eval", "--checkpoint", "runs/seed0/source_detector"]);
    let out = splat(dir.path(), &args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("mAP,"));
}

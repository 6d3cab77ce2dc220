use std::path::Path;
use std::process::{Command, Output};

fn sanet(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sanet"))
        .args(args)
        .current_dir(dir)
        .env("SANET_RUN_DIR", dir.join("runs"))
        .output()
        .expect("spawn sanet")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_one_line_error(o: &Output, needle: &str) {
    assert_eq!(o.status.code(), Some(1), "stderr: {}", stderr(o));
    let err = stderr(o);
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error:")).collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].contains(needle), "{:?} lacks {needle:?}", lines[0]);
}

#[test]
fn inspect_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk"), b"not a sanet file at all").unwrap();
    assert_one_line_error(&sanet(&["inspect", "junk"], dir.path()), "unknown magic");
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[train]\nlearning_rat = 0.1\n").unwrap();
    assert_one_line_error(&sanet(&["gen-data", "--config", "c.toml"], dir.path()), "learning_rat");
}

#[test]
fn invalid_config_value_is_named() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.toml"), "[eval]\nfolds = 1\n").unwrap();
    assert_one_line_error(&sanet(&["kfold", "--config", "c.toml", "--data", "missing.sand"], dir.path()), "eval.folds");
}

#[test]
fn gen_data_writes_into_hashed_run_dir_and_inspects() {
    let dir = tempfile::tempdir().unwrap();
    let out = sanet(&["gen-data", "--samples", "12"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let path = Path::new(report["path"].as_str().unwrap()).to_path_buf();
    assert!(path.exists());
    let run = path.parent().unwrap();
    assert_eq!(run.file_name().unwrap().len(), 16);
    assert!(run.join("config.toml").exists());

    let out = sanet(&["inspect", path.to_str().unwrap()], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let info: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(info["kind"], "dataset");
}

#[test]
fn eval_reports_corrupt_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(sanet(&["gen-data", "--samples", "4", "--out", "d.sand"], d).status.success());
    std::fs::write(d.join("m.sanc"), b"SANC").unwrap();
    assert_one_line_error(&sanet(&["eval", "--checkpoint", "m.sanc", "--data", "d.sand"], d), "m.sanc");
}

#[test]
fn capture_background_writes_images() {
    let dir = tempfile::tempdir().unwrap();
    let out = sanet(&["capture-background", "--out-dir", "bg"], dir.path());
    assert!(out.status.success(), "{}", stderr(&out));
    let ppm = std::fs::read(dir.path().join("bg/background_v0.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n160 120\n255\n"));
    assert_eq!(ppm.len(), "P6\n160 120\n255\n".len() + 160 * 120 * 3);
}

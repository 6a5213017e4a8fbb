use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nucseg::io::read_json;
use nucseg::pipeline::train::tiny_model_config;
use nucseg::pipeline::{DataConfig, RunRecord, TrainConfig};
use nucseg_cli::RunConfig;

fn tiny_config(root: &Path) -> PathBuf {
    let cfg = RunConfig {
        data: DataConfig {
            scenes: 8,
            height: 64,
            width: 64,
            nuclei_per_scene: 6,
            patch: 64,
            overlap: 0,
            ..DataConfig::default()
        },
        train: TrainConfig {
            epochs_teacher: 2,
            epochs_student: 2,
            t_box: 0.3,
            rois_per_image: 4,
            model: tiny_model_config(),
            ..TrainConfig::default()
        },
        ..RunConfig::default()
    };
    let path = root.join("config.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn nucseg(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nucseg"))
        .current_dir(root)
        .env("RUST_LOG", "warn")
        .arg("--config")
        .arg(root.join("config.toml"))
        .arg("--data")
        .arg(root.join("data"))
        .arg("--out")
        .arg(root.join("runs"))
        .args(args)
        .output()
        .unwrap()
}

fn last_line(out: &Output) -> PathBuf {
    let s = String::from_utf8_lossy(&out.stdout);
    PathBuf::from(s.lines().last().unwrap_or_default().trim())
}

#[test]
fn gen_data_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_config(tmp.path());
    assert_eq!(nucseg(tmp.path(), &["gen-data"]).status.code(), Some(0));
    assert_eq!(nucseg(tmp.path(), &["gen-data"]).status.code(), Some(6));
    assert_eq!(nucseg(tmp.path(), &["gen-data", "--force"]).status.code(), Some(0));
}

#[test]
fn stage_without_its_input_is_a_missing_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_config(tmp.path());
    assert_eq!(nucseg(tmp.path(), &["train"]).status.code(), Some(3));
    assert!(nucseg(tmp.path(), &["gen-data"]).status.success());
    let out = nucseg(tmp.path(), &["train", "--stage", "pseudo"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn bad_arguments_and_config_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_config(tmp.path());
    assert_eq!(nucseg(tmp.path(), &["ablate", "--axis", "width"]).status.code(), Some(2));
    std::fs::write(tmp.path().join("config.toml"), "[train]\nlr = \"fast\"\n").unwrap();
    assert_eq!(nucseg(tmp.path(), &["gen-data"]).status.code(), Some(4));
}

#[test]
fn full_run_writes_one_record_and_reproduces() {
    let tmp = tempfile::tempdir().unwrap();
    tiny_config(tmp.path());
    assert!(nucseg(tmp.path(), &["gen-data"]).status.success());

    let out = nucseg(tmp.path(), &["train"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = last_line(&out);
    for f in ["teacher.nsck", "student.nsck", "pseudo/index.json", "run_record.json"] {
        assert!(dir.join(f).exists(), "missing {f}");
    }
    let records: Vec<_> = walk(&tmp.path().join("runs"))
        .into_iter()
        .filter(|p| p.file_name().is_some_and(|n| n == "run_record.json"))
        .collect();
    assert_eq!(records.len(), 1);
    let first: RunRecord = read_json(&dir.join("run_record.json")).unwrap();

    let again = tmp.path().join("again");
    let out = nucseg(tmp.path(), &["train", "--run", again.to_str().unwrap()]);
    assert!(out.status.success());
    let second: RunRecord = read_json(&again.join("run_record.json")).unwrap();
    assert_eq!(first.test, second.test);
    assert_eq!(first.student_checksum, second.student_checksum);

    let out = nucseg(tmp.path(), &["eval", "--split", "val", "--model", "teacher", "--run", dir.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(dir.join("metrics_teacher_val.json").exists());
}

fn walk(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap().flatten() {
        let p = e.path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

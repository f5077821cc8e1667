use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn terra(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_terra-ssl"))
        .arg("--config")
        .arg(smoke_config())
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let gen = terra(out, &["gen-data"]);
    assert_eq!(gen.status.code(), Some(0), "{}", stderr(&gen));
    assert!(stdout(&gen).contains("segmentation: 4 scenes, 16 tiles"), "{}", stdout(&gen));
    assert!(out.join("data/pretext/manifest.tsv").is_file());
    assert!(out.join("data/config.toml").is_file());

    let oracle = terra(out, &["eval", "--oracle"]);
    assert_eq!(oracle.status.code(), Some(0), "{}", stderr(&oracle));
    assert!(stdout(&oracle).contains("IoU 1.0000 bIoU 1.0000 Score 1.0000"), "{}", stdout(&oracle));

    let missing = terra(out, &["finetune", "--init", "terrain"]);
    assert_eq!(missing.status.code(), Some(2), "{}", stderr(&missing));

    let pre = terra(out, &["pretrain", "--init", "terrain"]);
    assert_eq!(pre.status.code(), Some(0), "{}", stderr(&pre));
    let run = out.join("runs/pretrain-terrain");
    for f in ["config.toml", "metrics.tsv", "val_loss.svg", "best/checkpoint.txt", "last/checkpoint.txt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }

    let ft = terra(out, &["finetune", "--init", "terrain", "--label-fraction", "0.5", "--seed", "1"]);
    assert_eq!(ft.status.code(), Some(0), "{}", stderr(&ft));
    let run = out.join("runs/finetune-terrain-f0.5-s1");
    for f in ["config.toml", "metrics.tsv", "summary.tsv", "gallery.png", "best/checkpoint.txt"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let snapshot = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(snapshot.contains("label_fraction = 0.5"));

    let rnd = terra(out, &["finetune", "--init", "random", "--label-fraction", "0.5", "--seed", "1"]);
    assert_eq!(rnd.status.code(), Some(0), "{}", stderr(&rnd));

    let ev = terra(out, &["eval", "--init", "terrain", "--label-fraction", "0.5", "--seed", "1"]);
    assert_eq!(ev.status.code(), Some(0), "{}", stderr(&ev));
    assert!(stdout(&ev).starts_with("test: IoU"));

    let rep = terra(out, &["report"]);
    assert_eq!(rep.status.code(), Some(0), "{}", stderr(&rep));
    let table = std::fs::read_to_string(out.join("report/table.txt")).unwrap();
    assert!(table.contains("terrain") && table.contains("random"), "{table}");
    for f in ["table.tsv", "train_loss.svg", "val_loss.svg", "val_iou.svg", "val_biou.svg"] {
        assert!(out.join("report").join(f).is_file(), "missing {f}");
    }
}

#[test]
fn malformed_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[pretrain]\nlearning_rate = 0.1\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_terra-ssl"))
        .args(["--config"])
        .arg(&cfg)
        .arg("gen-data")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn usage_errors_and_help() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(terra(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(terra(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(terra(dir.path(), &["pretrain", "--init", "random"]).status.code(), Some(1));
    assert_eq!(terra(dir.path(), &["finetune", "--label-fraction", "1.5"]).status.code(), Some(1));
}

#[test]
fn report_without_runs_is_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let o = terra(dir.path(), &["report"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("runs"), "{}", stderr(&o));
}

#[test]
fn bad_noise_spec_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("noise.toml");
    std::fs::write(&spec, "p_remove_building = 1.5\n").unwrap();
    let o = terra(dir.path(), &["gen-data", "--noise", spec.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("p_remove_building"));
}

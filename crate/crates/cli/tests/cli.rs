use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[model]
dim = 16
depth = 1
heads = 2
out_dim = 32
summariser_heads = 2

[augment]
n_local = 2

[train]
epochs = 2
warmup_epochs = 1

[probe]
epochs = 2

[segment]
epochs = 1
folds = 2
"#;

fn volta(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volta"))
        .current_dir(dir)
        .env_remove("VOLTA_OUTPUT_ROOT")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", out.status.code(), stdout(out), stderr(out));
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

#[test]
fn gen_data_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for tmp in [&a, &b] {
        ok(&volta(tmp.path(), &["gen-data", "-o", "data", "--set", "data.count=4"]));
    }
    let manifest = fs::read_to_string(a.path().join("data/manifest.csv")).unwrap();
    let rows: Vec<&str> = manifest.lines().collect();
    assert_eq!(rows[0], "path,class,labels");
    assert_eq!(rows.len(), 5);
    assert_eq!(dir_bytes(&a.path().join("data")), dir_bytes(&b.path().join("data")));
}

#[test]
fn gen_data_with_zero_count_writes_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&volta(tmp.path(), &["gen-data", "-o", "empty", "--set", "data.count=0"]));
    let manifest = fs::read_to_string(tmp.path().join("empty/manifest.csv")).unwrap();
    assert_eq!(manifest.trim(), "path,class,labels");
}

#[test]
fn output_root_variable_is_honoured() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_volta"))
        .current_dir(tmp.path())
        .env("VOLTA_OUTPUT_ROOT", tmp.path().join("root"))
        .args(["gen-data", "-o", "run", "--set", "data.count=1"])
        .output()
        .unwrap();
    ok(&out);
    assert!(tmp.path().join("root/run/manifest.csv").exists());
    assert!(tmp.path().join("root/run/config.resolved.toml").exists());
}

#[test]
fn pretrain_probe_and_segment_from_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    fs::write(p.join("small.toml"), SMALL).unwrap();
    ok(&volta(p, &["gen-data", "-o", "data", "--set", "data.count=10", "--set", "data.format=nifti"]));
    let dir = ["-c", "small.toml", "--set", "data.source=directory", "--set", "data.directory=data"];

    let out = volta(p, &[&["pretrain", "-o", "run"], &dir[..]].concat());
    ok(&out);
    assert!(stdout(&out).contains("pretrained 2 epochs"));
    let log = fs::read_to_string(p.join("run/train_log.jsonl")).unwrap();
    assert!(log.lines().count() >= 2);

    let inspected = volta(p, &["inspect", "run/last.ckpt"]);
    ok(&inspected);
    assert!(stdout(&inspected).contains("teacher.embed.weight [64, 16]"));

    ok(&volta(p, &[&["probe", "-o", "probe", "--set", "encoder=run/last.ckpt"], &dir[..]].concat()));
    let sweep = fs::read_to_string(p.join("probe/probe_sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 6);
    assert!(p.join("probe/probe_report.json").exists());

    let mismatch = volta(
        p,
        &[&["probe", "-o", "bad", "--set", "encoder=run/last.ckpt", "--set", "model.dim=24"], &dir[..]].concat(),
    );
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(stderr(&mismatch).contains("[64, 24]") && stderr(&mismatch).contains("[64, 16]"), "{}", stderr(&mismatch));

    ok(&volta(p, &[&["segment", "-o", "seg"], &dir[..]].concat()));
    let report = fs::read_to_string(p.join("seg/seg_report.txt")).unwrap();
    assert!(report.contains("class 1: Dice") && report.contains("class 2: Dice"));
}

#[test]
fn inspect_reports_nifti_headers_without_touching_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&volta(tmp.path(), &["gen-data", "-o", "d", "--set", "data.count=1", "--set", "data.format=nifti"]));
    let path = tmp.path().join("d/phantom_0000_labels.nii");
    let before = fs::read(&path).unwrap();
    let out = volta(tmp.path(), &["inspect", "d/phantom_0000_labels.nii"]);
    ok(&out);
    let text = stdout(&out);
    assert!(text.contains("dim [3, 16, 16, 16"), "{text}");
    assert!(text.contains("datatype 2"), "{text}");
    assert_eq!(fs::read(&path).unwrap(), before);
}

#[test]
fn corrupt_inputs_exit_with_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("junk.bin"), vec![0u8; 400]).unwrap();
    let out = volta(tmp.path(), &["inspect", "junk.bin"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("junk.bin"));

    let mut ckpt = b"VOLTACKP".to_vec();
    ckpt.extend_from_slice(&[1, 0, 0, 0, 0xff]);
    fs::write(tmp.path().join("cut.ckpt"), ckpt).unwrap();
    assert_eq!(volta(tmp.path(), &["inspect", "cut.ckpt"]).status.code(), Some(2));

    let missing = volta(tmp.path(), &["probe", "--set", "data.source=directory", "--set", "data.directory=nowhere"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(stderr(&missing).contains("manifest"));
}

#[test]
fn configuration_errors_exit_with_usage_code() {
    let tmp = tempfile::tempdir().unwrap();
    let unknown = volta(tmp.path(), &["gen-data", "--set", "train.epoch=3"]);
    assert_eq!(unknown.status.code(), Some(1));
    assert!(stderr(&unknown).contains("epoch"));
    assert_eq!(volta(tmp.path(), &["gen-data", "--set", "model.heads=3"]).status.code(), Some(1));
    assert_eq!(volta(tmp.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(volta(tmp.path(), &["pretrain", "-c", "missing.toml"]).status.code(), Some(1));
}

#[test]
fn numerical_failures_exit_with_code_three() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("small.toml"), SMALL).unwrap();
    let out =
        volta(tmp.path(), &["pretrain", "-c", "small.toml", "--set", "data.count=2", "--set", "model.init_std=1e200"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[model]
input_size = 16

[stream]
image_size = 16
pretrain_classes = 4
pretrain_train = 64
n_object = 1
n_nonobject = 1
downstream_classes = [3]
downstream_train = [40]
n_val = 8
n_test = 20

[pretrain]
steps = 5

[[methods]]
base = "dense_finetune"

[[methods]]
base = "pruned"
plan = { granularity = "filter", signal = "magnitude", target = 0.5 }

[run]
protocol = "transfer"
budget_grid = [2, 4]
seeds = [0, 1]

[prune]
granularity = "channel"
signal = "magnitude"
target = 0.5
"#;

fn prunebench(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prunebench"))
        .args(args)
        .current_dir(dir)
        .env("PRUNEBENCH_LOG", "error")
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
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(prunebench(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(prunebench(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(prunebench(dir.path(), &["curve", "--format", "png"]).status.code(), Some(1));
}

#[test]
fn misspelled_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[pretrain]\nstepz = 3\n").unwrap();
    let o = prunebench(dir.path(), &["pretrain", "--config", "c.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stepz"), "{}", stderr(&o));
}

#[test]
fn negative_target_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[prune]\ngranularity = \"filter\"\nsignal = \"random\"\ntarget = -0.2\n").unwrap();
    let o = prunebench(dir.path(), &["prune", "--config", "c.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("target"), "{}", stderr(&o));
}

#[test]
fn missing_input_file_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.toml"), "[input]\ncheckpoint = \"nope.ckpt\"\n").unwrap();
    let o = prunebench(dir.path(), &["prune", "--config", "c.toml"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.ckpt"));
}

#[test]
fn corrupt_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.ckpt"), b"XXXX").unwrap();
    fs::write(
        dir.path().join("c.toml"),
        "[input]\ncheckpoint = \"bad.ckpt\"\n[prune]\ngranularity = \"filter\"\nsignal = \"random\"\ntarget = 0.2\n",
    )
    .unwrap();
    let o = prunebench(dir.path(), &["prune", "--config", "c.toml"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn empty_records_report() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("r.csv"), "").unwrap();
    let o = prunebench(dir.path(), &["report", "--records", "r.csv"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "no records\n");
}

#[test]
fn pipeline_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("c.toml"), SMALL).unwrap();
    let ok = |args: &[&str]| {
        let o = prunebench(d, args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        o
    };

    ok(&["gen-stream", "--config", "c.toml"]);
    assert!(d.join("out/stream/stream.toml").exists());
    assert!(d.join("out/stream/obj00/test-images.idx3-ubyte").exists());

    ok(&["pretrain", "--config", "c.toml"]);
    let first = fs::read(d.join("out/pretrained.ckpt")).unwrap();
    ok(&["pretrain", "--config", "c.toml", "--out", "again"]);
    assert_eq!(fs::read(d.join("again/pretrained.ckpt")).unwrap(), first);

    let with_ckpt = format!("{SMALL}\n[input]\ncheckpoint = \"out/pretrained.ckpt\"\n");
    fs::write(d.join("c2.toml"), with_ckpt).unwrap();
    let pruned = stdout(&ok(&["prune", "--config", "c2.toml"]));
    assert!(pruned.contains("achieved 0.5000"), "{pruned}");
    let manifest = fs::read_to_string(d.join("out/prune.toml")).unwrap();
    assert!(manifest.contains("[[keep_sets]]"));

    let flops = stdout(&ok(&["flops", "--config", "c2.toml"]));
    assert!(flops.contains("block0.conv1") && flops.contains("== pruned_filter_magnitude_0.5 =="));
    let csv = fs::read_to_string(d.join("out/flops.csv")).unwrap();
    assert!(csv.starts_with("layer,forward,backward_input,backward_weight\n"));

    ok(&["run", "--config", "c2.toml", "--threads", "2"]);
    let a = fs::read(d.join("out/records.csv")).unwrap();
    ok(&["run", "--config", "c2.toml", "--threads", "1", "--out", "again"]);
    assert_eq!(fs::read(d.join("again/records.csv")).unwrap(), a);
    // 2 methods x 2 tasks x 2 seeds x 2 checkpoints, plus the header
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 17);

    ok(&["curve", "--config", "c2.toml", "--format", "svg"]);
    assert!(d.join("out/curves.svg").exists() && !d.join("out/curves.csv").exists());
    ok(&["curve", "--config", "c2.toml"]);
    let curves = fs::read_to_string(d.join("out/curves.csv")).unwrap();
    assert!(curves.starts_with("protocol,kind,method,flops,mean_accuracy,stderr,n\n"));

    let report = stdout(&ok(&["report", "--config", "c2.toml"]));
    assert!(report.contains("== transfer / object ==") && report.contains("low_margin"));

    ok(&["run", "--config", "c2.toml", "--seed", "3", "--out", "seeded"]);
    let seeded = fs::read_to_string(d.join("seeded/records.csv")).unwrap();
    assert!(seeded.lines().skip(1).all(|l| l.contains("-s3,")));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use moe_core::io::{read_checkpoint, read_dataset};

const TINY: &str = r#"
[run]
preset = "setting1-fast"
test_n = 32

[data]
n = 64

[arch]
experts = 2
filters = 2

[train]
iterations = 10
eval_every = 5
"#;

fn moelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moelab"))
        .args(args)
        .output()
        .expect("spawn moelab")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_writes_readable_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = dir.path().join("data");
    let o = moelab(&["generate", "--config", &config, "--seed", "3", "--out", s(&out), "--csv"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let train = read_dataset(&out.join("train.bin")).unwrap();
    let test = read_dataset(&out.join("test.bin")).unwrap();
    assert_eq!((train.len(), test.len()), (64, 32));
    assert_eq!((train.d, train.patches, train.clusters), (50, 4, 4));
    assert!(out.join("train.csv").exists());

    let again = dir.path().join("again");
    moelab(&["generate", "--config", &config, "--seed", "3", "--out", s(&again)]);
    assert_eq!(
        fs::read(out.join("train.bin")).unwrap(),
        fs::read(again.join("train.bin")).unwrap()
    );
}

#[test]
fn malformed_config_exits_1_without_files() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[data\nn = 3");
    let out = dir.path().join("out");
    let o = moelab(&["generate", "--config", &config, "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!out.exists());

    let o = moelab(&["generate", "--preset", "setting9"]);
    assert_eq!(o.status.code(), Some(1));
    let o = moelab(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn unwritable_output_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let o = moelab(&["generate", "--config", &config, "--out", s(&blocker.join("sub"))]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_is_reproducible_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = moelab(&["train", "--config", &config, "--seed", "1", "--out", s(out), "--deterministic", "true"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics, fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert!(metrics.starts_with("t,loss,train_acc,test_acc,entropy,load_1,load_2,gnorm_1,gnorm_2\n"));
    assert_eq!(metrics.lines().count(), 1 + 3);
    let (model, t) = read_checkpoint(&a.join("checkpoint.bin")).unwrap();
    assert_eq!((t, model.num_experts(), model.bank.filters()), (10, 2, 2));
    let report = fs::read_to_string(a.join("report.txt")).unwrap();
    assert!(report.contains("dispatch_entropy = "));
}

#[test]
fn sweep_summarizes_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), TINY);
    let out = dir.path().join("sweep");
    let o = moelab(&["sweep", "--config", &config, "--seeds", "2", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(out.join("metrics_seed0.csv").exists() && out.join("metrics_seed1.csv").exists());
    assert!(String::from_utf8_lossy(&o.stdout).contains("test_accuracy = "));

    let o = moelab(&["sweep", "--config", &config, "--seeds", "1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = moelab(&["verify", "gap", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("verify_report.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("gap_no_route,"));
    assert_eq!(moelab(&["verify", "nonsense"]).status.code(), Some(1));
    assert_eq!(
        moelab(&["verify", "smoothing", "--samples", "10"]).status.code(),
        Some(1)
    );
}

#[test]
fn plotdata_merges_logs() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("lin.csv");
    fs::write(&log, "t,loss,train_acc,test_acc,entropy,load_1\n0,0.69,0.5,0.5,1.3,4\n50,0.6,0.6,0.6,1.2,4\n").unwrap();
    let o = moelab(&["plotdata", s(&log), &format!("cubic={}", s(&log))]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.contains("lin,50,1.2"));
    assert!(text.contains("cubic,0,1.3"));

    assert_eq!(moelab(&["plotdata"]).status.code(), Some(1));
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "a,b\n1,2\n").unwrap();
    assert_eq!(moelab(&["plotdata", s(&bad)]).status.code(), Some(1));
}

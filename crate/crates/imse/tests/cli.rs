use std::path::Path;
use std::process::{Command, Output};

fn imse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_imse")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn bad_flag_prints_usage_and_exits_2() {
    let o = imse(&["params", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(imse(&[]).status.code(), Some(2));
}

#[test]
fn unknown_preset_is_an_error() {
    let o = imse(&["params", "--preset", "huge"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown preset"));
}

fn column(table: &str, name: &str) -> usize {
    let line = table.lines().find(|l| l.starts_with(name)).unwrap();
    line.split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn params_table_sums_and_json_agrees() {
    let table = imse(&["params", "--preset", "tiny"]);
    assert!(table.status.success());
    let t = stdout(&table);
    let parts: usize = ["embedding", "attention", "resampling", "head"].iter().map(|n| column(&t, n)).sum();
    assert_eq!(column(&t, "total"), parts);
    assert_eq!(parts, 3514);

    let json = imse(&["params", "--preset", "tiny", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&json)).unwrap();
    for name in ["embedding", "attention", "resampling", "head", "total"] {
        assert_eq!(v["counts"][name].as_u64().unwrap() as usize, column(&t, name), "{name}");
    }
}

#[test]
fn base_preset_shows_published_total_as_context() {
    let t = stdout(&imse(&["params"]));
    let total = t.lines().find(|l| l.starts_with("total")).unwrap();
    assert!(total.contains("0.427M"), "{total}");
    assert!(t.contains("context only"));
}

#[test]
fn gradcheck_on_tiny_passes() {
    let o = imse(&["gradcheck", "--samples", "30"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("max relative error"));
}

#[test]
fn gradcheck_exits_nonzero_over_tolerance() {
    let o = imse(&["gradcheck", "--samples", "5", "--preset", "smoke", "--tolerance", "0"]);
    assert_eq!(o.status.code(), Some(3));
}

fn train_csv(dir: &Path, seed: &str) -> (String, Output) {
    let ckpt = dir.join(format!("toy{seed}.ckpt"));
    let o = imse(&[
        "train-toy",
        "--preset",
        "smoke",
        "--epochs",
        "3",
        "--items",
        "4",
        "--val-items",
        "2",
        "--seed",
        seed,
        "--deterministic",
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ckpt.exists());
    (stdout(&o), o)
}

#[test]
fn train_toy_csv_has_header_and_epochs_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let (csv, _) = train_csv(dir.path(), "7");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,train_loss,val_sisnr_db"));
    let epochs: Vec<usize> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(epochs, vec![1, 2, 3]);
    assert!(!csv.contains(";"));

    let (again, _) = train_csv(dir.path(), "7");
    assert_eq!(again, csv);
    let (other, _) = train_csv(dir.path(), "8");
    assert_ne!(other, csv);
}

#[test]
fn bench_csv_has_documented_header() {
    let o = imse(&["bench", "--sizes", "32,64", "--reps", "3"]);
    assert!(o.status.success());
    let csv = stdout(&o);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "N,mode,median_ns,per_token_ns");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("32,linear,"));
    assert!(lines[2].starts_with("32,quadratic,"));
}

#[test]
fn config_file_versions_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.toml");
    std::fs::write(&good, "version = 1\n[model]\npreset = \"smoke\"\n").unwrap();
    let o = imse(&["--config", good.to_str().unwrap(), "params", "--json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["preset"], "smoke");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "version = 9\n").unwrap();
    let o = imse(&["--config", bad.to_str().unwrap(), "params"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("version 9"));
}

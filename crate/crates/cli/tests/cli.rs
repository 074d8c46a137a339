use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BASE: &str = "\
master_seed = 11
[problem]
n = 300
d = 12
[federation]
clients = 10
sample = 10
blocks = 5
rounds = 15
[local]
eta = 0.1
steps = 5
batch = 20
";

fn fedblocks(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedblocks"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn run_to(config: &str, out: &Path) -> Vec<u8> {
    let o = fedblocks(&["run", config, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    fs::read(out.join("ledger.csv")).unwrap()
}

#[test]
fn run_is_byte_identical_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.ini", BASE);
    let a = run_to(&cfg, &dir.path().join("one"));
    let b = run_to(&cfg, &dir.path().join("two"));
    assert_eq!(a, b);
    let text = String::from_utf8(a).unwrap();
    assert!(text.starts_with("round,train_loss,train_acc,grad_norm,up_floats,down_floats,ms\n"));
    assert_eq!(text.lines().count(), 17);
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "a.ini", &format!("{BASE}[partition]\nrho = 0.5\n"));
    let a = run_to(&cfg, &dir.path().join("one"));
    let o = fedblocks(&["run", &cfg, "--out", dir.path().join("two").to_str().unwrap(), "--seed", "12"]);
    assert!(o.status.success());
    let b = fs::read(dir.path().join("two/ledger.csv")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn fedavg_and_single_block_fedbcgd_write_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let common = BASE.replace("blocks = 5", "blocks = 1").replace("sample = 10", "sample = 4");
    let avg = write_config(dir.path(), "avg.ini", &format!("{common}rule = fedavg\n[server]\nlambda = 0\n"));
    let bcgd = write_config(dir.path(), "bcgd.ini", &format!("{common}rule = fedbcgd\n[server]\nlambda = 0\n"));
    let a = run_to(&avg, &dir.path().join("avg"));
    let b = run_to(&bcgd, &dir.path().join("bcgd"));
    assert_eq!(a, b);
}

#[test]
fn validate_reports_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), "good.ini", BASE);
    let o = fedblocks(&["validate", &good]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("lambda=0.8"));

    let bad = write_config(dir.path(), "bad.ini", &BASE.replace("blocks = 5", "blocks = 3"));
    let o = fedblocks(&["validate", &bad]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("S mod N"));

    let typo = write_config(dir.path(), "typo.ini", &format!("{BASE}colour = red\n"));
    let o = fedblocks(&["validate", &typo]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 14"));

    let o = fedblocks(&["run", dir.path().join("missing.ini").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn sweep_writes_one_csv_per_value_and_isolates_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "s.ini", &BASE.replace("rounds = 15", "rounds = 3"));
    let out = dir.path().join("sweep");
    let o = fedblocks(&["sweep", &cfg, "--axis", "N", "--values", "1,3,5,10", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("N=3: failed"), "{stdout}");
    for v in ["1", "5", "10"] {
        assert!(out.join(format!("sweep_N_{v}.csv")).exists(), "{v}");
    }
    assert!(!out.join("sweep_N_3.csv").exists());

    let o = fedblocks(&["sweep", &cfg, "--axis", "lambda", "--values", "", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());

    let o = fedblocks(&["sweep", &cfg, "--axis", "colour", "--values", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

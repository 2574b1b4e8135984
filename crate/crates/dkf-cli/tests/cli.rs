use std::fs;
use std::path::Path;
use std::process::Command;

use dkf::config::ModelConfig;

fn dkf(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dkf")).args(args).output().expect("spawn dkf")
}

fn ok(args: &[&str]) -> String {
    let out = dkf(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

const SMALL_MODEL: &str = r#"s0_scale = 1.0

[dynamics]
kind = "elliptic"
rows = 4
cols = 3
mu = -1.0
beta_h = 0.25
beta_v = 0.25
dt = 0.1
noise_sites = [0, 4, 8, 11]
q = 1.0

[sensors]
kind = "span"
count = 4
span = 3
r = 1.0
seed = 3
"#;

fn small_model(dir: &Path) -> String {
    let p = dir.join("small.toml");
    let cfg = ModelConfig::from_toml(SMALL_MODEL).unwrap();
    cfg.save(&p).unwrap();
    p.to_str().unwrap().to_string()
}

fn data_rows(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

#[test]
fn generate_writes_round_trippable_model() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(dir.path());
    let out = dir.path().join("gen");
    ok(&["generate", "--model", &model, "--out", out.to_str().unwrap(), "--l", "3", "--k-max", "5", "--steady-window", "2"]);
    let text = fs::read_to_string(out.join("model.toml")).unwrap();
    assert_eq!(ModelConfig::from_toml(&text).unwrap().to_toml(), text);
    let explicit = ModelConfig::load(&out.join("model_explicit.toml")).unwrap();
    let a = explicit.build().unwrap();
    let b = ModelConfig::from_toml(SMALL_MODEL).unwrap().build().unwrap();
    assert_eq!(a, b);
    let states = fs::read_to_string(out.join("states.csv")).unwrap();
    assert!(states.starts_with("#meta,config_hash="));
    let rows = data_rows(&states);
    assert!(rows[0].starts_with("k,x_0,x_1"));
    assert_eq!(rows.len(), 6);
    assert!(out.join("decomposition.json").exists());
    assert!(out.join("experiment.toml").exists());
}

#[test]
fn run_writes_trace_curves() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(dir.path());
    let out = dir.path().join("run");
    let o = out.to_str().unwrap();
    let common = ["--model", &model, "--out", o, "--trials", "4", "--k-max", "6", "--steady-window", "3"];
    ok(&[&["run", "--filter", "cif"][..], &common].concat());
    let cif = fs::read_to_string(out.join("trace_cif.csv")).unwrap();
    assert_eq!(data_rows(&cif)[0], "k,trace");
    assert_eq!(data_rows(&cif).len(), 7);

    let stdout = ok(&[&["run", "--filter", "lif", "--l-values", "3", "--log"][..], &common].concat());
    assert!(stdout.contains("L=3"));
    let steps = fs::read_to_string(out.join("lif_steps_L3.csv")).unwrap();
    assert_eq!(
        data_rows(&steps)[0],
        "k,trace_S_filtered,trace_S_predicted,consensus_iters,dici_iters,messages"
    );
    let log = fs::read_to_string(out.join("messages_L3.csv")).unwrap();
    assert_eq!(data_rows(&log)[0], "round,phase,src,dst,hops,scalars");
    assert!(data_rows(&log).len() > 1);
}

#[test]
fn experiments_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = dir.path().to_str().unwrap();
    ok(&["exp-contraction", "--out", o, "--trials", "20", "--n", "12", "--bins", "10"]);
    let c = fs::read_to_string(dir.path().join("contraction.csv")).unwrap();
    let rows = data_rows(&c);
    assert_eq!(rows[0], "trial,alpha");
    for r in &rows[1..] {
        let a: f64 = r.split(',').nth(1).unwrap().parse().unwrap();
        assert!(a > 0.0 && a < 1.0);
    }
    ok(&["exp-error-bound", "--out", o, "--trials", "5", "--n", "12", "--l", "2", "--iterations", "10"]);
    let e = fs::read_to_string(dir.path().join("error_bound.csv")).unwrap();
    assert_eq!(data_rows(&e)[0], "iter,max_diff,min_diff,mean_diff");
    assert_eq!(data_rows(&e).len(), 11);
}

#[test]
fn sweep_on_small_model() {
    let dir = tempfile::tempdir().unwrap();
    let model = small_model(dir.path());
    let o = dir.path().join("sweep");
    ok(&[
        "exp-dici-sweep", "--model", &model, "--out", o.to_str().unwrap(), "--trials", "3", "--k-max", "8", "--steady-window", "3", "--l", "3",
        "--budgets", "1,5",
    ]);
    let s = fs::read_to_string(o.join("dici_sweep.csv")).unwrap();
    let rows = data_rows(&s);
    assert_eq!(rows, ["t,trace", rows[1], rows[2]]);
    assert!(rows[1].starts_with("1,") && rows[2].starts_with("5,"));
}

#[test]
fn bad_inputs_fail() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "s0_scale = 1.0\nbogus = 3\n").unwrap();
    let out = dkf(&["generate", "--model", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
    let out = dkf(&["exp-contraction", "--out", dir.path().to_str().unwrap(), "--gamma", "-1"]);
    assert!(!out.status.success());
}

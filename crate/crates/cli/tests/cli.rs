use std::path::Path;
use std::process::{Command, Output};

fn scorecomp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scorecomp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn tiny(out: &Path) -> Vec<String> {
    [
        "--out",
        &out.to_string_lossy(),
        "--runs",
        "2",
        "--seed",
        "3",
        "--grid",
        "score:Reverse,score:HMC-4-curve,energy:LA",
        "--w2-convention",
        "mean",
        "--set",
        "samples=100",
        "--set",
        "timesteps=10",
        "--set",
        "mcmc.steps=2",
        "--set",
        "train.steps=100",
        "--set",
        "train.dataset_size=500",
        "--set",
        "arch.hidden=16",
        "--set",
        "arch.inner=16",
        "--set",
        "arch.blocks=1",
        "--set",
        "arch.time_dim=4",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

fn run(base: &[String], extra: &[&str]) -> Output {
    let mut args: Vec<&str> = base.iter().map(String::as_str).collect();
    args.extend_from_slice(extra);
    scorecomp(&args)
}

#[test]
fn train_sample_eval_table_plot() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("exp");
    let base = tiny(&out);

    let o = run(&base, &["train"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("run_01/models/energy_gmm.ckpt").exists());
    assert!(out.join("config.txt").exists());

    let o = run(&base, &["sample", "--run", "0"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("run_00/samples/score_HMC-4-curve.csv").exists());
    assert!(!out.join("run_01/samples").exists());

    let o = run(&base, &["sample"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = run(&base, &["eval"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.contains("HMC-4-curve"), "{table}");
    let results = std::fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 1 + 2 * 3);

    let o = run(&base, &["table"]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8(o.stdout).unwrap(), table);

    let o = run(&base, &["plot", "--run", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("plots/run_01/energy_LA.svg").exists());
    assert!(out.join("plots/run_01/reference.svg").exists());

    let o = run(&base, &["config"]);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("w2_convention=mean"), "{text}");
    assert!(text.contains("seed=3"));
}

#[test]
fn failures_exit_nonzero_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_string_lossy().to_string();
    for args in [
        vec!["--out", &out, "--grid", "score:Direct-ish", "config"],
        vec!["--out", &out, "--grid", "score:LA", "config"],
        vec!["--out", &out, "--set", "composition=mixture", "config"],
        vec!["--out", &out, "--w2-convention", "median", "config"],
        vec!["--out", &out, "--set", "nonsense", "config"],
        vec!["--out", &out, "table"],
        vec!["--out", &out, "sample", "--run", "0"],
        vec!["--out", &out, "--runs", "2", "train", "--run", "5"],
        vec!["--config", "/definitely/missing.cfg", "config"],
    ] {
        let o = scorecomp(&args);
        assert!(!o.status.success(), "{args:?} should fail");
        let err = String::from_utf8_lossy(&o.stderr);
        assert!(err.contains("error"), "{args:?}: {err}");
    }
}

#[test]
fn config_file_is_read_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    std::fs::write(&cfg, "# small\nseed=9\nruns=3\nmcmc.damping=0.25\n").unwrap();
    let o = scorecomp(&["--config", &cfg.to_string_lossy(), "--runs", "4", "config"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(
        text.contains("seed=9") && text.contains("runs=4") && text.contains("mcmc.damping=0.25"),
        "{text}"
    );
}

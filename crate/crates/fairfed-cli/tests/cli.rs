//! End-to-end checks of the `fairfed` binary: subcommands, config-file
//! precedence, determinism and exit codes.

use std::process::Command;

fn fairfed() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fairfed"))
}

#[test]
fn gen_writes_synthetic_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data.csv");
    let status = fairfed()
        .args(["gen", "--n", "200", "--seed", "5"])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("x1,x2,a,y"));
    assert_eq!(text.lines().count(), 201);
}

#[test]
fn oracle_reports_baselines() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("oracle.csv");
    let status = fairfed()
        .args([
            "oracle", "--alpha", "0.3,0.6", "--mc-n", "20000", "--seed", "1",
        ])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 3); // header + one row per alpha
    assert!(text.lines().nth(1).unwrap().starts_with("oracle,"));
}

#[test]
fn cdp_sweep_is_deterministic_and_aggregated() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rows.csv");
    let run = || {
        let status = fairfed()
            .args([
                "cdp", "--n", "400", "--eps", "2", "--alpha", "0.3", "--reps", "2", "--seed", "9",
                "--test-n", "200", "--h", "0.2",
            ])
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(&out).unwrap()
    };
    let first = run();
    let second = run();
    assert_eq!(first, second);
    let agg = dir.path().join("rows.agg.csv");
    assert!(agg.exists());
    let text = std::fs::read_to_string(agg).unwrap();
    assert!(text.lines().count() >= 2);
}

#[test]
fn config_file_supplies_defaults_and_flags_override() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("fairfed.toml");
    let out_cfg = dir.path().join("from_config.csv");
    std::fs::write(
        &config,
        format!(
            "[experiment]\nalphas = [0.3]\nepsilons = [2.0]\nsizes = [400]\nreps = 1\nseed = 4\ntest_n = 150\nout = {:?}\n\n[federation]\nh = 0.2\ngrid_resolution = 12\n",
            out_cfg
        ),
    )
    .unwrap();
    let status = fairfed()
        .arg("--config")
        .arg(&config)
        .args(["cdp"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out_cfg.exists());

    // a command-line flag beats the config file
    let out_flag = dir.path().join("from_flag.csv");
    let status = fairfed()
        .arg("--config")
        .arg(&config)
        .args(["cdp"])
        .arg("--out")
        .arg(&out_flag)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out_flag.exists());
}

#[test]
fn bad_arguments_fail_with_nonzero_exit() {
    // total size does not divide across sites
    let status = fairfed()
        .args([
            "fdp", "--sites", "3", "--n", "100", "--eps", "1", "--alpha", "0.3", "--reps", "1",
        ])
        .status()
        .unwrap();
    assert!(!status.success());

    // unknown sweep mode
    let status = fairfed()
        .args(["sweep", "--mode", "nope", "--n", "100"])
        .status()
        .unwrap();
    assert!(!status.success());
}

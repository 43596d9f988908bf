//! End-to-end command tests: exit codes, error wording, file outputs and
//! byte-level determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_hbcal")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin())
        .args(args)
        .output()
        .expect("spawn hbcal")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

const SMALL_SYSTEM: &str = r#"
[system]
n_t = 8
n_r = 8
m_t = 2
m_r = 2
k_paths = 2
cal_snr_db = 20.0
data_snr_db = 30.0
"#;

#[test]
fn help_lists_all_commands() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["calibrate", "sweep", "crlb", "overhead", "replay"] {
        assert!(text.contains(cmd), "missing {} in help", cmd);
    }
}

#[test]
fn calibrate_runs_and_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.toml", SMALL_SYSTEM);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let res = run(&[
            "calibrate",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "7",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(
            res.status.success(),
            "stderr: {}",
            String::from_utf8_lossy(&res.stderr)
        );
        assert!(out.join("scenario.json").exists());
        assert!(out.join("estimates.json").exists());
    }
    for f in ["scenario.json", "estimates.json"] {
        let a = fs::read(out_a.join(f)).unwrap();
        let b = fs::read(out_b.join(f)).unwrap();
        assert_eq!(a, b, "{} differs between identical runs", f);
    }
}

#[test]
fn calibrate_rejects_short_analog_pilots_naming_the_inequality() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.toml",
        &format!("{}\nq_da = 3\n", SMALL_SYSTEM.trim_end()),
    );
    let res = run(&[
        "calibrate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(
        err.contains("q_da = 3 < n_t - k_paths + 1 = 7"),
        "stderr: {}",
        err
    );
}

#[test]
fn malformed_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.toml",
        &format!("{}\nantenna_count = 12\n", SMALL_SYSTEM.trim_end()),
    );
    let res = run(&[
        "overhead",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1));
    let err = String::from_utf8_lossy(&res.stderr);
    assert!(err.contains("antenna_count"), "stderr: {}", err);
}

#[test]
fn overhead_prints_comparison_values_and_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.toml",
        r#"
[system]
n_t = 32
n_r = 32
m_t = 8
m_r = 8
k_paths = 4
"#,
    );
    let res = run(&[
        "overhead",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert!(res.status.success());
    let text = String::from_utf8_lossy(&res.stdout);
    assert!(text.contains("8192"));
    assert!(text.contains("1032"));

    let res = run(&[
        "overhead",
        "--config",
        cfg.to_str().unwrap(),
        "--format",
        "json",
        "--out",
        dir.path().join("oj").to_str().unwrap(),
    ]);
    assert!(res.status.success());
    let parsed: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("oj/overhead.json")).unwrap()).unwrap();
    assert_eq!(parsed["crc_overhead"], 8192);
    assert_eq!(parsed["hac_overhead"], 1032);
}

#[test]
fn sweep_writes_csv_with_documented_header_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "cfg.toml",
        r#"
[system]
n_t = 16
n_r = 16
m_t = 4
m_r = 4
k_paths = 2
cal_snr_db = 20.0
data_snr_db = 30.0

[experiment]
kind = "rate-vs-data-snr"
values = [10.0, 30.0]
trials = 2
methods = ["Perfect", "None"]
n_streams = 2
"#,
    );
    let start = std::time::Instant::now();
    let out_a = dir.path().join("a");
    let res = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        out_a.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert!(start.elapsed().as_secs() < 60, "sweep smoke run too slow");

    let csv = fs::read_to_string(out_a.join("results.csv")).unwrap();
    assert!(csv.starts_with("sweep_value,method,metric,mean,std_error,trials_used\n"));
    assert!(out_a.join("results_meta.json").exists());

    let out_b = dir.path().join("b");
    let res = run(&[
        "sweep",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "3",
        "--out",
        out_b.to_str().unwrap(),
    ]);
    assert!(res.status.success());
    assert_eq!(
        fs::read(out_a.join("results.csv")).unwrap(),
        fs::read(out_b.join("results.csv")).unwrap()
    );
}

#[test]
fn replay_reproduces_estimates_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.toml", SMALL_SYSTEM);
    let out = dir.path().join("cal");
    let res = run(&[
        "calibrate",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "11",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(res.status.success());

    let replay_out = dir.path().join("replayed");
    let res = run(&[
        "replay",
        "--config",
        out.join("scenario.json").to_str().unwrap(),
        "--out",
        replay_out.to_str().unwrap(),
    ]);
    assert!(
        res.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert_eq!(
        fs::read(out.join("estimates.json")).unwrap(),
        fs::read(replay_out.join("estimates.json")).unwrap()
    );
}

#[test]
fn crlb_command_writes_report_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "cfg.toml", SMALL_SYSTEM);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let res = run(&[
            "crlb",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "5",
            "--format",
            "json",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(
            res.status.success(),
            "stderr: {}",
            String::from_utf8_lossy(&res.stderr)
        );
    }
    assert_eq!(
        fs::read(out_a.join("crlb.json")).unwrap(),
        fs::read(out_b.join("crlb.json")).unwrap()
    );
    let parsed: serde_json::Value =
        serde_json::from_slice(&fs::read(out_a.join("crlb.json")).unwrap()).unwrap();
    assert!(parsed["crlb_t1"].as_array().unwrap().len() == 2);
    // Receive digital bounds are identically zero.
    for v in parsed["crlb_u1"].as_array().unwrap() {
        assert_eq!(v.as_f64().unwrap(), 0.0);
    }
}

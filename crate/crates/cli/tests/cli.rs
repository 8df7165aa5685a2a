use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn protofed(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_protofed"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn protofed")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

const SMALL: &str = "[rounds]\nrounds = 1\nepochs = 1\n[data]\ntrain_windows = 210\n";

#[test]
fn run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = protofed(&["--mode", "fedhpb", "--rho", "20", "--rounds", "2", "--epochs", "2", "--seed", "1", "-o", "run"], dir.path());
    ok(&out);
    for f in ["manifest.json", "metrics.csv", "trajectory.csv", "report.json", "summary.json"] {
        assert!(dir.path().join("run").join(f).is_file(), "{f} missing");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["rounds"]["seed"], 1);
    assert_eq!(manifest["config"]["data"]["train_ratio"], 20);
    assert!(manifest["version"].is_string());
}

#[test]
fn identical_invocations_give_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    for name in ["a", "b"] {
        ok(&protofed(&["--config", "small.toml", "--rounds", "2", "--seed", "4", "-o", name], dir.path()));
    }
    for f in ["metrics.csv", "trajectory.csv"] {
        let a = fs::read(dir.path().join("a").join(f)).unwrap();
        let b = fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn zero_rho_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = protofed(&["--rho", "0", "-o", "bad"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("ratio"));
    assert!(!dir.path().join("bad").exists());
}

#[test]
fn unknown_flag_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!protofed(&["--second-term", "cosine"], dir.path()).status.success());
    assert!(!protofed(&["--transport", "udp"], dir.path()).status.success());
}

#[test]
fn config_file_merges_over_preset_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), format!("{SMALL}[model]\nactivation = \"silu\"\n")).unwrap();
    ok(&protofed(&["--config", "small.toml", "--epochs", "2", "--clients", "2", "-o", "run"], dir.path()));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/manifest.json")).unwrap()).unwrap();
    let c = &manifest["config"];
    assert_eq!(c["model"]["activation"], "silu");
    assert_eq!(c["model"]["lstm_hidden"], 8);
    assert_eq!(c["data"]["train_windows"], 210);
    assert_eq!(c["rounds"]["epochs"], 2);
    assert_eq!(c["rounds"]["clients"], 2);
}

#[test]
fn sweep_rows_match_sub_runs() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    ok(&protofed(&["sweep", "--axis", "rho", "--config", "small.toml", "--clients", "2", "-o", "sw"], dir.path()));
    let mut reader = csv::Reader::from_path(dir.path().join("sw/sweep_summary.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    let headers = reader.headers().unwrap().clone();
    let col = |n: &str| headers.iter().position(|h| h == n).unwrap();
    for (row, rho) in rows.iter().zip(["20", "50", "100"]) {
        assert_eq!(&row[col("value")], rho);
        let summary: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.path().join(format!("sw/rho_{rho}/summary.json"))).unwrap())
                .unwrap();
        let fb: f64 = row[col("m_fbeta")].parse().unwrap();
        let ba: f64 = row[col("m_ba")].parse().unwrap();
        assert_eq!(fb, summary["m_fbeta"].as_f64().unwrap());
        assert_eq!(ba, summary["m_ba"].as_f64().unwrap());
    }
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

#[test]
fn multi_process_tcp_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    let common = ["--config", "small.toml", "--clients", "2", "--seed", "5"];
    ok(&protofed(&[&common[..], &["-o", "inproc"]].concat(), dir.path()));

    let port = free_port().to_string();
    let spawn = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_protofed"))
            .args(args)
            .args(common)
            .current_dir(dir.path())
            .env("PROTOFED_PORT", &port)
            .env("RUST_LOG", "warn")
            .stdout(Stdio::null())
            .spawn()
            .unwrap()
    };
    let server = spawn(&["serve", "--host", "127.0.0.1", "-o", "tcp"]);
    let clients: Vec<_> = ["0", "1"].iter().map(|id| spawn(&["client", "--id", id])).collect();
    for c in clients {
        assert!(c.wait_with_output().unwrap().status.success());
    }
    assert!(server.wait_with_output().unwrap().status.success());
    let a = fs::read_to_string(dir.path().join("inproc/metrics.csv")).unwrap();
    let b = fs::read_to_string(dir.path().join("tcp/metrics.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn generated_csvs_load_back() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    ok(&protofed(&["gen-data", "--config", "small.toml", "--clients", "2", "-o", "data"], dir.path()));
    let files = ["data/client_0.csv", "data/client_1.csv"];
    for f in files {
        assert!(dir.path().join(f).is_file());
    }
    ok(&protofed(&["--config", "small.toml", "--csv", &files.join(","), "-o", "fromcsv"], dir.path()));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("fromcsv/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["clients"].as_array().unwrap().len(), 2);
}

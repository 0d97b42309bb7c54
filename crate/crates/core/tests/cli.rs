use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_timegnn"))
}

fn write_csv(path: &Path, rows: usize) {
    let mut text = String::from("date,a,b,c\n");
    for t in 0..rows {
        let x = t as f64 * 0.2;
        text.push_str(&format!("2020-01-{t},{:.6},{:.6},{:.6}\n", x.sin(), x.cos(), (0.5 * x).sin() + 0.01 * t as f64));
    }
    std::fs::write(path, text).unwrap();
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.env_remove("TIMEGNN_CONFIG").output().unwrap();
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json_line(out: &Output) -> Value {
    let text = String::from_utf8(out.stdout.clone()).unwrap();
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn error_line(out: &Output) -> Value {
    let text = String::from_utf8(out.stderr.clone()).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1, "{text}");
    serde_json::from_str(lines[0]).unwrap()
}

#[test]
fn train_eval_predict_dump_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_csv(&data, 200);
    let ckpt = dir.path().join("m.ckpt");
    let metrics = dir.path().join("metrics.json");
    let graphs = dir.path().join("graphs.json");
    let out = run(bin().args(["train", "--window", "10", "--batch", "8", "--d", "6", "--epochs", "2"]).args([
        "--data".as_ref(),
        data.as_os_str(),
        "--checkpoint".as_ref(),
        ckpt.as_os_str(),
        "--metrics".as_ref(),
        metrics.as_os_str(),
        "--dump-graphs".as_ref(),
        graphs.as_os_str(),
    ]));
    let summary = json_line(&out);
    assert!(summary["test_mae"]["mean"].as_f64().unwrap().is_finite(), "{summary}");
    assert_eq!(summary["runs"], 1);

    let m: Value = serde_json::from_str(&std::fs::read_to_string(&metrics).unwrap()).unwrap();
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert!(m["config"]["model"]["d"] == 6);

    let dumped: Value = serde_json::from_str(&std::fs::read_to_string(&graphs).unwrap()).unwrap();
    assert!(!dumped.as_array().unwrap().is_empty());

    let eval = json_line(&run(bin().args(["eval", "--segment", "test"]).args([
        "--checkpoint".as_ref(),
        ckpt.as_os_str(),
        "--data".as_ref(),
        data.as_os_str(),
    ])));
    assert!(eval["mae"].as_f64().unwrap().is_finite());
    assert_eq!(eval["config_hash"], m["config_hash"]);

    let pred = json_line(&run(bin().args(["predict"]).args([
        "--checkpoint".as_ref(),
        ckpt.as_os_str(),
        "--data".as_ref(),
        data.as_os_str(),
    ])));
    assert_eq!(pred["values"].as_array().unwrap().len(), 3);
    assert_eq!(pred["channels"], serde_json::json!(["a", "b", "c"]));

    let dump = json_line(&run(bin().args(["dump-graphs", "--limit", "2"]).args([
        "--checkpoint".as_ref(),
        ckpt.as_os_str(),
        "--data".as_ref(),
        data.as_os_str(),
    ])));
    let windows = dump.as_array().unwrap();
    assert_eq!(windows.len(), 2);
    for w in windows {
        for e in w["edges"].as_array().unwrap() {
            let (i, j) = (e[0].as_u64().unwrap(), e[1].as_u64().unwrap());
            assert!(i < j && j < 10);
            let a = e[3].as_f64().unwrap();
            assert!(a == 0.0 || a == 1.0);
        }
    }
}

#[test]
fn predict_needs_a_full_window() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_csv(&data, 120);
    let ckpt = dir.path().join("m.ckpt");
    run(bin().args(["train", "--window", "10", "--d", "4", "--epochs", "1", "--steps", "1"]).args([
        "--data".as_ref(),
        data.as_os_str(),
        "--checkpoint".as_ref(),
        ckpt.as_os_str(),
        "--metrics".as_ref(),
        dir.path().join("m.json").as_os_str(),
    ]));
    let short = dir.path().join("short.csv");
    write_csv(&short, 5);
    let out = bin()
        .args(["predict"])
        .args(["--checkpoint".as_ref(), ckpt.as_os_str(), "--data".as_ref(), short.as_os_str()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_line(&out)["error"]["kind"], "data");
}

#[test]
fn bench_emits_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("b.csv");
    let out = run(bin()
        .args(["bench", "--windows", "8,16", "--m", "2", "--reps", "3", "--no-epoch", "--d", "4"])
        .args(["--csv".as_ref(), csv.as_os_str()]));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("dataset,m,tau,"));
    let text = std::fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].contains(",8,") && rows[1].ends_with(",ok"));
    assert!(rows[2].contains(",120,ok"));
}

#[test]
fn errors_are_single_json_lines() {
    let out = bin().args(["train", "--bogus"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_line(&out)["error"]["kind"], "usage");

    let out = bin()
        .env_remove("TIMEGNN_CONFIG")
        .args(["eval", "--checkpoint", "/nonexistent/x.ckpt", "--data", "/nonexistent/d.csv"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let kind = error_line(&out)["error"]["kind"].as_str().unwrap().to_string();
    assert_eq!(kind, "io");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "a,b\n1,2\n3,x\n").unwrap();
    let out = bin()
        .env_remove("TIMEGNN_CONFIG")
        .args(["train", "--window", "2", "--epochs", "1"])
        .args(["--data".as_ref(), bad.as_os_str()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = error_line(&out);
    let msg = err["error"]["message"].as_str().unwrap();
    assert!(msg.contains("row 3") && msg.contains("column 2"), "{msg}");
}

#[test]
fn config_file_via_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    write_csv(&data, 120);
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        format!(
            "[data]\npath = {:?}\nwindow = 6\n[model]\nd = 4\nsteps = 1\n[train]\nepochs = 1\n[output]\ncheckpoint = {:?}\nmetrics = {:?}\n",
            data,
            dir.path().join("c.ckpt"),
            dir.path().join("c.json")
        ),
    )
    .unwrap();
    let out = bin().env("TIMEGNN_CONFIG", &cfg).arg("train").output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("c.ckpt").exists());
    let header = timegnn::checkpoint::read_header(&dir.path().join("c.ckpt")).unwrap();
    assert_eq!(header.model.window, 6);
}

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn partsight(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_partsight"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn assets(dir: &Path) -> (PathBuf, PathBuf) {
    partsight_core::fixtures::write_masks(&dir.join("masks"), 3, 1, 48, 2).unwrap();
    partsight_core::fixtures::write_backgrounds(&dir.join("bg"), 2, 200, 120, 2).unwrap();
    (dir.join("masks"), dir.join("bg"))
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("synth.json");
    std::fs::write(&p, r#"{"output_width": 200, "output_height": 120, "scale_range": [0.8, 1.0]}"#).unwrap();
    p
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(partsight(&["--help"]).status.code(), Some(0));
    assert_eq!(partsight(&["--version"]).status.code(), Some(0));
    assert_eq!(partsight(&["synth", "generate", "--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    let out = partsight(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(partsight(&["eval", "run", "--preds", "x"]).status.code(), Some(1));
    assert_eq!(partsight(&["kb", "index", "--kb", "x", "--dim", "many", "--out", "y"]).status.code(), Some(1));
}

#[test]
fn input_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = partsight(&["kb", "index", "--kb", "/no/such/kb.json", "--out", s(&tmp.path().join("i.json"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    let bad = tmp.path().join("scenario.json");
    std::fs::write(&bad, r#"{"version": 1, "name": "x", "width": 0, "height": 10, "knowledge": {"entries": []}, "steps": []}"#).unwrap();
    assert_eq!(partsight(&["session", "simulate", s(&bad)]).status.code(), Some(2));

    let img = tmp.path().join("imgs");
    partsight_core::fixtures::write_backgrounds(&img, 1, 32, 32, 0).unwrap();
    let out = partsight(&[
        "detect", "run", "--provider", "external", "--images", s(&img), "--out", s(&tmp.path().join("p.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(2), "external provider without --command");
}

#[test]
fn external_detector_failure_is_internal() {
    let tmp = tempfile::tempdir().unwrap();
    let img = tmp.path().join("imgs");
    partsight_core::fixtures::write_backgrounds(&img, 1, 32, 32, 0).unwrap();
    let out = partsight(&[
        "detect", "run", "--provider", "external", "--command", "false", "--images", s(&img), "--out",
        s(&tmp.path().join("p.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn external_detector_output_is_clipped_and_recorded() {
    let tmp = tempfile::tempdir().unwrap();
    let img = tmp.path().join("imgs");
    partsight_core::fixtures::write_backgrounds(&img, 2, 40, 30, 0).unwrap();
    let script = tmp.path().join("det.sh");
    std::fs::write(
        &script,
        "#!/bin/sh\necho '{\"label\": \"gear\", \"bbox\": [-5, 2, 50, 20], \"confidence\": 0.8}'\n",
    )
    .unwrap();
    let preds = tmp.path().join("p.jsonl");
    let cmd = format!("sh {}", s(&script));
    let out = partsight(&["detect", "run", "--provider", "external", "--command", &cmd, "--images", s(&img), "--out", s(&preds)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines: Vec<Value> = std::fs::read_to_string(&preds)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["image_id"], "bg_00");
    assert_eq!(lines[0]["bbox"], serde_json::json!([0.0, 2.0, 40.0, 20.0]));
    assert!(tmp.path().join("p.jsonl.run.json").is_file());
}

#[test]
fn pipeline_writes_run_metadata() {
    let tmp = tempfile::tempdir().unwrap();
    let (masks, bg) = assets(tmp.path());
    let cfg = small_config(tmp.path());
    let data = tmp.path().join("data");
    let out = partsight(&[
        "synth", "generate", "--masks", s(&masks), "--backgrounds", s(&bg), "--count", "6", "--seed", "3", "--config",
        s(&cfg), "--out", s(&data),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let meta: Value = serde_json::from_slice(&std::fs::read(data.join("run.json")).unwrap()).unwrap();
    assert_eq!(meta["command"], "synth generate");
    assert_eq!(meta["seed"], 3);
    assert_eq!(meta["config"]["count"], 6);
    assert!(meta["inputs"]["masks"]["files"].as_u64().unwrap() >= 6);
    assert_eq!(meta["outputs"]["out"]["files"], 6 * 2 + 2);

    let preds = tmp.path().join("preds.jsonl");
    assert!(partsight(&["detect", "run", "--provider", "mock", "--images", s(&data), "--out", s(&preds)]).status.success());
    let report = tmp.path().join("report.json");
    let out = partsight(&["eval", "run", "--preds", s(&preds), "--labels", s(&data), "--out", s(&report)]);
    assert!(out.status.success());
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("mAP@0.5"), "{table}");
    let r: Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["overall"]["map50"], 1.0);
    assert!(tmp.path().join("report.json.run.json").is_file());

    let bar = tmp.path().join("bar");
    let out = partsight(&["bar", "refine", "--images", s(&data), "--detections", s(&preds), "--out", s(&bar)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(bar.join("run.json").is_file());
    assert!(bar.join("refine_manifest.json").is_file());

    let tta = tmp.path().join("tta.jsonl");
    assert!(partsight(&["detect", "run", "--provider", "mock", "--images", s(&data), "--tta", "--out", s(&tta)]).status.success());
    let both = partsight(&["detect", "run", "--provider", "mock", "--images", s(&data), "--tta", "--slice", "--out", s(&tta)]);
    assert_eq!(both.status.code(), Some(2));
}

#[test]
fn kb_query_prints_ranked_lines_and_metadata_on_stderr() {
    let tmp = tempfile::tempdir().unwrap();
    let index = tmp.path().join("index.json");
    let kb = scenarios().join("golden_kb.json");
    assert!(partsight(&["kb", "index", "--kb", s(&kb), "--out", s(&index)]).status.success());
    let out = partsight(&["kb", "query", "--index", s(&index), "--text", "gear_cover", "--top", "2"]);
    assert!(out.status.success());
    let lines: Vec<Value> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["rank"], 1);
    assert_eq!(lines[0]["part_id"], "GC-100");
    assert_eq!(lines[0]["distance"], 0.0);
    let meta: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).trim()).unwrap();
    assert_eq!(meta["command"], "kb query");
    assert!(meta["inputs"]["index"]["sha256"].is_string());
}

#[test]
fn golden_transcript_replays_byte_for_byte() {
    let golden = std::fs::read(scenarios().join("golden.transcript.json")).unwrap();
    let out = partsight(&["session", "simulate", s(&scenarios().join("golden.json"))]);
    assert!(out.status.success());
    assert_eq!(out.stdout, golden);
    let seq = partsight(&["--sequential", "session", "simulate", s(&scenarios().join("golden.json"))]);
    assert_eq!(seq.stdout, golden);
}

#[test]
fn corrupt_output_is_seed_determined() {
    let tmp = tempfile::tempdir().unwrap();
    let imgs = tmp.path().join("imgs");
    partsight_core::fixtures::write_backgrounds(&imgs, 2, 48, 32, 5).unwrap();
    let digest = |name: &str, seed: &str| {
        let out = tmp.path().join(name);
        assert!(partsight(&["corrupt", "apply", "--images", s(&imgs), "--seed", seed, "--out", s(&out)]).status.success());
        let meta: Value = serde_json::from_slice(&std::fs::read(out.join("run.json")).unwrap()).unwrap();
        assert_eq!(meta["outputs"]["out"]["files"], 2 * 11 + 1);
        meta["outputs"]["out"]["sha256"].as_str().unwrap().to_owned()
    };
    let a = digest("a", "1");
    assert_eq!(a, digest("b", "1"));
    assert_ne!(a, digest("c", "2"));
}

#[test]
fn serve_answers_health_over_tcp() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_partsight"))
        .args(["serve", "--addr", "127.0.0.1:0"])
        .stderr(Stdio::piped())
        .stdout(Stdio::null())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(child.stderr.take().unwrap());
    let mut addr = None;
    for _ in 0..4 {
        let mut line = String::new();
        if stderr.read_line(&mut line).unwrap() == 0 {
            break;
        }
        if let Some(a) = line.trim().strip_prefix("listening on http://") {
            addr = Some(a.to_owned());
            break;
        }
    }
    let addr = addr.expect("server announces its address");
    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(stream, "GET /health HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().ok();
    child.wait().ok();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    assert!(response.to_ascii_lowercase().contains("x-api-version: 1"));
    assert!(response.contains("\"status\":\"ok\""));
}

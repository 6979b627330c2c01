use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use layoutc_core::layout::{BBox, CanvasSpec, Layout, ObjectEntry};
use serde_json::{json, Value};

fn layoutc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_layoutc"))
        .args(args)
        .env_remove("LAYOUTC_API_KEY")
        .env_remove("LAYOUTC_ENDPOINT")
        .output()
        .unwrap()
}

fn summary(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/fixtures").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn layout(phrase: &str, boxes: &[[f64; 4]]) -> Layout {
    let boxes = boxes.iter().map(|b| BBox::new(b[0], b[1], b[2], b[3]).unwrap()).collect();
    Layout::new(CanvasSpec::default(), format!("a {phrase}"), vec![ObjectEntry::visual(phrase, boxes)])
}

fn write_jsonl(path: &Path, rows: &[Value]) {
    let text: String = rows.iter().map(|r| format!("{r}\n")).collect();
    fs::write(path, text).unwrap();
}

#[test]
fn random_verify_reports_zero_mismatches() {
    let out = layoutc(&["mask", "verify", "--seed", "7", "--cases", "1000", "--p", "8"]);
    assert!(out.status.success());
    let v = summary(&out);
    assert_eq!(v["mismatches"], 0);
}

#[test]
fn parse_tennis_fixture() {
    let out = layoutc(&["layout", "parse", s(&fixture("tennis_response.txt"))]);
    assert!(out.status.success());
    let v = summary(&out);
    assert_eq!(v["command"], "layout parse");
    assert_eq!(v["layouts"][0]["entries"], 4);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(layoutc(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(layoutc(&["mask", "verify", "--cases", "many"]).status.code(), Some(2));
}

#[test]
fn bad_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"gate": {"total_step": 10}}"#).unwrap();
    let out = layoutc(&["--config", s(&cfg), "mask", "verify", "--cases", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(summary(&out)["ok"], false);

    fs::write(&cfg, r#"{"provider": {"api_key": "secret"}}"#).unwrap();
    assert_eq!(layoutc(&["--config", s(&cfg), "mask", "verify", "--cases", "1"]).status.code(), Some(1));
}

#[test]
fn generate_without_key_fails() {
    let out = layoutc(&["layout", "generate", "--caption", "a cat"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("LAYOUTC_API_KEY"));
}

#[test]
fn generate_replays_capture() {
    let dir = tempfile::tempdir().unwrap();
    let caption = "a tennis player";
    let built = summary(&layoutc(&["prompt", "build", "--caption", caption]));
    let sha = built["prompt_sha256"].as_str().unwrap();
    let response = fs::read_to_string(fixture("tennis_response.txt")).unwrap();
    let capture = dir.path().join("capture.jsonl");
    write_jsonl(
        &capture,
        &[json!({"timestamp": "2026-01-01T00:00:00Z", "config_hash": "x", "prompt_sha256": sha, "response_text": response})],
    );
    let out_path = dir.path().join("layout.json");
    let out = layoutc(&["layout", "generate", "--caption", caption, "--replay", s(&capture), "--out", s(&out_path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = summary(&out);
    assert_eq!(v["replayed"], true);
    assert_eq!(v["entries"], 4);
    let saved: Layout = serde_json::from_str(&fs::read_to_string(&out_path).unwrap()).unwrap();
    assert_eq!(saved.caption, caption);

    let miss = layoutc(&["layout", "generate", "--caption", "a dog", "--replay", s(&capture)]);
    assert_eq!(miss.status.code(), Some(1));
}

#[test]
fn validate_flags_bad_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.json");
    fs::write(&good, serde_json::to_string(&layout("cat", &[[0.1, 0.1, 0.5, 0.5]])).unwrap()).unwrap();
    let out = layoutc(&["layout", "validate", s(&good)]);
    assert!(out.status.success());

    let mut bad = layout("cat", &[[0.1, 0.1, 0.5, 0.5]]);
    bad.entries.push(bad.entries[0].clone());
    let bad_path = dir.path().join("bad.json");
    fs::write(&bad_path, serde_json::to_string(&bad).unwrap()).unwrap();
    let out = layoutc(&["layout", "validate", s(&good), s(&bad_path)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_commands() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = dir.path().join("pairs.jsonl");
    write_jsonl(
        &pairs,
        &[
            json!({"id": "a", "gt": layout("dog", &[[0.0, 0.0, 0.2, 0.2]]), "gen": layout("dog", &[[0.8, 0.0, 1.0, 0.2]])}),
            json!({"id": "b", "gt": layout("cat", &[[0.0, 0.0, 0.5, 0.5]]), "gen": layout("cat", &[[0.0, 0.0, 0.5, 0.5]])}),
        ],
    );
    let report = dir.path().join("report.json");
    let out = layoutc(&["eval", "miou", "--pairs", s(&pairs), "--report", s(&report)]);
    assert!(out.status.success());
    let v = summary(&out);
    assert_eq!(v["miou"], 1.0);
    assert_eq!(v["items"], 2);
    assert!(v.get("per_item").is_none());
    let full: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(full["per_item"].as_array().unwrap().len(), 2);

    let v = summary(&layoutc(&["eval", "hitrate", "--pairs", s(&pairs)]));
    assert_eq!(v["hit_rate"], 1.0);

    let entities = dir.path().join("entities.jsonl");
    let detections = dir.path().join("detections.jsonl");
    let det = |phrase: &str, score: f64| json!({"phrase": phrase, "box": [0.1, 0.1, 0.3, 0.3], "score": score});
    write_jsonl(
        &entities,
        &[
            json!({"image_id": "1", "entities": [{"phrase": "cat"}, {"phrase": "dog"}]}),
            json!({"image_id": "2", "entities": [{"phrase": "apples", "count": 3}]}),
        ],
    );
    write_jsonl(
        &detections,
        &[
            json!({"image_id": "1", "detections": [det("cat", 0.9), det("dog", 0.3)]}),
            json!({"image_id": "2", "detections": [det("apples", 0.9), det("apples", 0.8), det("apples", 0.7)]}),
        ],
    );
    let v = summary(&layoutc(&["eval", "gliprate", "--entities", s(&entities), "--detections", s(&detections)]));
    assert_eq!(v["detected"], 4);
    assert_eq!(v["total"], 5);
    assert_eq!(v["glip_rate"], 0.8);

    let cases = dir.path().join("cases.jsonl");
    write_jsonl(
        &cases,
        &[
            json!({"image_id": "2", "numeral": "three", "target_phrase": "apples"}),
            json!({"image_id": "1", "numeral": "two", "target_phrase": "cat"}),
        ],
    );
    let out = layoutc(&["eval", "count", "--cases", s(&cases), "--detections", s(&detections)]);
    assert!(out.status.success());
    let v = summary(&out);
    assert_eq!(v["counting_accuracy"]["three"], 1.0);
    assert_eq!(v["cases"]["two"]["correct"], 0);
}

#[test]
fn attn_demo_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let out = layoutc(&["attn", "demo", "--seed", "3", "--steps", "10", "--out-dir", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = summary(&out);
    assert_eq!(v["command"], "attn demo");
    assert!(dir.path().join("trajectory.json").exists());
}

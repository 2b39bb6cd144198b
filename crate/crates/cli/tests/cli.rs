use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

use keysg_core::synth;

fn keysg() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_keysg"));
    c.env_remove("KEYSG_MOCK").env_remove("KEYSG_MOCK_FAIL").env_remove("KEYSG_CACHE_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    keysg().args(args).output().expect("spawn keysg")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Fixture input and one mock build of it, shared by the tests below.
fn built() -> &'static (PathBuf, PathBuf) {
    static DIRS: OnceLock<(PathBuf, PathBuf)> = OnceLock::new();
    DIRS.get_or_init(|| {
        let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-tests");
        let _ = std::fs::remove_dir_all(&root);
        let (input, graph) = (root.join("input"), root.join("graph"));
        synth::fixture_scene(2).write(&input).expect("write fixture");
        let o = run(&["build", "--mock", "--input", s(&input), "--out", s(&graph)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (input, graph)
    })
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(64));
    let o = run(&["eval", "--graph", "g", "--gt", "x", "--task", "bogus"]);
    assert_eq!(o.status.code(), Some(64));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown task"));
}

#[test]
fn query_prints_grounded_node() {
    let (_, graph) = built();
    let o = run(&["query", "--mock", "--json", "--graph", s(graph), "the mug in the kitchen"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["node_ids"][0].as_str().unwrap().starts_with("f0_r"));
    assert!(v["trace"]["retrieval"]["levels"].is_array());
}

#[test]
fn ungrounded_answer_exits_3() {
    let (_, graph) = built();
    let o = run(&["query", "--mock", "--graph", s(graph), "the grand piano"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
}

#[test]
fn missing_graph_exits_1_with_stage_tag() {
    let o = run(&["query", "--mock", "--graph", "/nonexistent/graph", "q"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error [graph]:"));
}

#[test]
fn provider_outage_gives_partial_build() {
    let (input, _) = built();
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-tests/partial");
    let o = keysg()
        .env("KEYSG_MOCK_FAIL", "summarize")
        .args(["build", "--mock", "--input", s(input), "--out", s(&out), "--set", "providers.retries=0"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let log: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("build.log")).unwrap()).unwrap();
    assert_eq!(log["status"], "partial");
}

#[test]
fn config_overrides_land_in_metadata() {
    let (input, _) = built();
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-tests/override");
    let o = run(&["build", "--mock", "--input", s(input), "--out", s(&out), "--set", "keyframes.eps=0.6", "--max-depth", "6.5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let g: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("graph.json")).unwrap()).unwrap();
    assert_eq!(g["metadata"]["config"]["keyframes"]["eps"], 0.6);
    assert_eq!(g["metadata"]["config"]["ingest"]["max_depth"], 6.5);

    let bad = run(&["build", "--mock", "--input", s(input), "--out", s(&out), "--set", "keyframes.nope=1"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).starts_with("error [config]:"));
}

#[test]
fn inspect_renders_rooms_and_keyframes() {
    let (_, graph) = built();
    let png = graph.with_file_name("rooms.png");
    let o = run(&["inspect", "--graph", s(graph), "--rooms", s(&png), "--keyframes", "f0_r1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let img = image::open(&png).unwrap().to_rgb8();
    assert!(img.width() > 0 && img.height() > 0);
    let text = String::from_utf8_lossy(&o.stdout);
    let json = &text[text.find('{').unwrap()..];
    let v: serde_json::Value = serde_json::from_str(json).unwrap();
    assert_eq!(v["room"], "f0_r1");
    assert!(!v["keyframes"].as_array().unwrap().is_empty());
}

#[test]
fn eval_grounding_writes_metrics() {
    let (input, graph) = built();
    let out = graph.with_file_name("grounding.json");
    let gt = input.join("gt_grounding.json");
    let o = run(&["eval", "--mock", "--graph", s(graph), "--gt", s(&gt), "--task", "grounding", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    assert_eq!(v["task"], "grounding");
    assert!(String::from_utf8_lossy(&o.stdout).contains("overall"));

    let bad = graph.with_file_name("bad_gt.json");
    std::fs::write(&bad, br#"{"not": "a list"}"#).unwrap();
    let o = run(&["eval", "--mock", "--graph", s(graph), "--gt", s(&bad), "--task", "seg"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn serve_answers_post_query() {
    let (_, graph) = built();
    let mut child = keysg()
        .args(["serve", "--mock", "--graph", s(graph), "--addr", "127.0.0.1:0"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().rsplit("http://").next().unwrap().to_string();
    let body = r#"{"q": "the bed in the bedroom"}"#;
    let mut stream = TcpStream::connect(&addr).unwrap();
    write!(
        stream,
        "POST /query HTTP/1.1\r\nHost: {addr}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )
    .unwrap();
    let mut response = String::new();
    stream.read_to_string(&mut response).unwrap();
    child.kill().unwrap();
    let _ = child.wait();
    assert!(response.starts_with("HTTP/1.1 200"), "{response}");
    let json = &response[response.find("\r\n\r\n").unwrap() + 4..];
    let v: serde_json::Value = serde_json::from_str(json).unwrap();
    assert!(v["text"].as_str().unwrap().contains("bed"));
    assert!(v["node_ids"].is_array() && v["trace"].is_object());
}

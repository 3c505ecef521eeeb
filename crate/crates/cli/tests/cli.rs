use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use villa_core::corpus::{chunk_text, load_corpus};

fn villa(ws: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_villa"))
        .arg("--workspace")
        .arg(ws)
        .args(args)
        .env_remove("REVIEW_ADMIN_TOKEN")
        .output()
        .unwrap()
}

fn ok(ws: &Path, args: &[&str]) -> String {
    let out = villa(ws, args);
    assert!(
        out.status.success(),
        "villa {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn synthetic_workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth"]);
    dir
}

#[test]
fn embed_reports_entry_counts() {
    let ws = synthetic_workspace();
    let out = ok(ws.path(), &["embed"]);
    let corpus = load_corpus(ws.path().join("corpus/corpus.jsonl")).unwrap();
    let chunks: usize = corpus
        .iter()
        .map(|p| chunk_text(&p.full_text, 1000, 100).unwrap().len())
        .sum();
    assert_eq!(out.trim(), format!("abstracts: 6, chunks: {chunks}"));
}

#[test]
fn oracle_run_evaluates_to_perfect_f1() {
    let ws = synthetic_workspace();
    ok(ws.path(), &["embed"]);
    ok(ws.path(), &["run", "--method", "villa", "--iterations", "1", "--responder", "mock:oracle"]);
    ok(ws.path(), &["evaluate"]);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ws.path().join("results/summary.json")).unwrap()).unwrap();
    let overall = summary["groups"]
        .as_array()
        .unwrap()
        .iter()
        .find(|g| g["method"] == "villa" && g["scope"] == "overall")
        .unwrap();
    assert_eq!(overall["f1"]["mean"], 1.0);
    let csv = std::fs::read_to_string(ws.path().join("results/results.csv")).unwrap();
    // 3 proteins x 3 scopes + header.
    assert_eq!(csv.lines().count(), 10);
}

#[test]
fn fixed_clock_runs_are_byte_identical() {
    let ws = synthetic_workspace();
    ok(ws.path(), &["embed"]);
    let a = ws.path().join("a.json");
    let b = ws.path().join("b.json");
    for (out, jobs) in [(&a, "1"), (&b, "3")] {
        ok(ws.path(), &["run", "--method", "villa", "--fixed-clock", "--jobs", jobs, "--output", out.to_str().unwrap()]);
    }
    let (a, b) = (std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    // `jobs` is recorded in the config; everything else must match.
    let strip = |bytes: Vec<u8>| {
        let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
        v["config"]["jobs"] = serde_json::Value::Null;
        v
    };
    assert_eq!(strip(a), strip(b));
    let again = ws.path().join("c.json");
    ok(ws.path(), &["run", "--method", "villa", "--fixed-clock", "--output", again.to_str().unwrap()]);
    let first = ws.path().join("d.json");
    ok(ws.path(), &["run", "--method", "villa", "--fixed-clock", "--output", first.to_str().unwrap()]);
    assert_eq!(std::fs::read(again).unwrap(), std::fs::read(first).unwrap());
}

#[test]
fn flags_override_config_file() {
    let ws = synthetic_workspace();
    ok(ws.path(), &["embed"]);
    let cfg = ws.path().join("custom.toml");
    std::fs::write(&cfg, "k_a = 80\nt = 1.0\nquery_mode = \"short\"\niterations = 1\n").unwrap();
    let out = ws.path().join("run.json");
    let args = ["--config", cfg.to_str().unwrap(), "run", "--method", "villa", "--k-a", "20", "--output", out.to_str().unwrap()];
    ok(ws.path(), &args);
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(manifest["config"]["k_a"], 20);
    // Unset keys fall back to defaults, not to the workspace file.
    assert_eq!(manifest["config"]["k_c"], 160);
}

#[test]
fn config_errors_are_reported() {
    let ws = synthetic_workspace();
    let cfg = ws.path().join("bad.toml");
    std::fs::write(&cfg, "top_k = 5\n").unwrap();
    let out = villa(ws.path(), &["--config", cfg.to_str().unwrap(), "embed"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("top_k") && err.contains("chunk_overlap"), "{err}");

    let out = villa(ws.path(), &["embed", "--chunk-size", "1000", "--chunk-overlap", "1000"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_ground_truth_names_the_path() {
    let ws = synthetic_workspace();
    let out = villa(ws.path(), &["evaluate", "--ground-truth", "/does/not/exist.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/does/not/exist.csv"));
}

#[test]
fn usage_errors_exit_with_two() {
    let ws = tempfile::tempdir().unwrap();
    let out = villa(ws.path(), &["run", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = villa(ws.path(), &["run", "--method", "best"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ingest_validates_inputs() {
    let ws = tempfile::tempdir().unwrap();
    let corpus = ws.path().join("in.jsonl");
    let gt = ws.path().join("gt.csv");
    std::fs::write(
        &corpus,
        "{\"pub_id\": \"A\", \"abstract\": \"x\", \"full_text\": \"y\"}\n{\"pub_id\": \"B\", \"abstract\": \"x\", \"full_text\": \"y\"}\n",
    )
    .unwrap();
    std::fs::write(&gt, "protein,mutation,pub_id\nPB2,E627K,A\nPB2,D701N,Z\n").unwrap();
    let out = villa(ws.path(), &["ingest", "--corpus", corpus.to_str().unwrap(), "--ground-truth", gt.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Z"));
    assert!(ws.path().join("corpus/corpus.jsonl").exists());

    std::fs::write(
        &corpus,
        "{\"pub_id\": \"A\", \"abstract\": \"x\", \"full_text\": \"y\"}\n{\"pub_id\": \"A\", \"abstract\": \"x\", \"full_text\": \"y\"}\n",
    )
    .unwrap();
    let out = villa(ws.path(), &["ingest", "--corpus", corpus.to_str().unwrap(), "--ground-truth", gt.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn remote_backends_need_a_base_url() {
    let ws = synthetic_workspace();
    ok(ws.path(), &["embed"]);
    let out = Command::new(env!("CARGO_BIN_EXE_villa"))
        .args(["--workspace", ws.path().to_str().unwrap(), "run", "--method", "zero-shot", "--responder", "remote:some-model"])
        .env_remove("RESPONDER_BASE_URL")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("RESPONDER_BASE_URL"));
}

#[test]
fn serve_ingests_manifests_and_answers_http() {
    let ws = synthetic_workspace();
    ok(ws.path(), &["embed"]);
    ok(ws.path(), &["run", "--method", "villa"]);
    let mut child = Command::new(env!("CARGO_BIN_EXE_villa"))
        .args(["--workspace", ws.path().to_str().unwrap(), "serve", "--addr", "127.0.0.1:0", "--manifest"])
        .arg(ws.path().join("runs/villa.json"))
        .env("REVIEW_ADMIN_TOKEN", "s3cret")
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    assert!(lines.next().unwrap().unwrap().starts_with("ingested 3 items"));
    let listening = lines.next().unwrap().unwrap();
    let addr = listening.trim_start_matches("listening on http://").to_string();

    let get = |path: &str, token: &str| {
        let mut s = TcpStream::connect(&addr).unwrap();
        write!(s, "GET {path} HTTP/1.1\r\nHost: x\r\nAuthorization: Bearer {token}\r\nConnection: close\r\n\r\n").unwrap();
        let mut resp = String::new();
        s.read_to_string(&mut resp).unwrap();
        resp
    };
    let items = get("/items", "s3cret");
    assert!(items.starts_with("HTTP/1.1 200"), "{items}");
    assert!(items.contains("\"total\":3"));
    assert!(get("/items", "wrong").starts_with("HTTP/1.1 401"));
    child.kill().unwrap();
    child.wait().unwrap();
}

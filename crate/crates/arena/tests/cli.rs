//! The `arena` binary against a live server started with `arena init`.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use chrono::Utc;
use serde_json::{json, Value};

const TRUTH: &str = "user_id,item_id,label,split\nu1,a,1,test\nu2,b,1,test\nu1,c,1,train\n";
const TRAIN: &[u8] = b"user_id,item_id\nu1,c\n";
const ORGANIZER: &str = "cli-organizer-token";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_arena"));
    for var in ["ARENA_CREDENTIAL", "ARENA_CREDENTIAL_FILE", "ARENA_ORGANIZER_TOKEN_FILE", "ARENA_SERVER", "ARENA_CONFIG"] {
        c.env_remove(var);
    }
    c.env("RUST_LOG", "warn");
    c
}

fn stage(id: &str, open: chrono::DateTime<Utc>, days: i64) -> Value {
    json!({
        "stage_id": id,
        "kind": "ranking_task",
        "open": open,
        "close": open + chrono::Duration::days(days),
        "daily_submission_limit": 10,
        "aggregation_cadence_s": 1,
        "ground_truth": format!("truth/{id}.csv"),
        "evaluator_versions": [
            {"version": 1, "metric": "map_at_k", "parameters": {"k": 3}},
            {"version": 2, "metric": "map_at_k", "parameters": {"k": 3, "relevance_universe": "test_only"}}
        ]
    })
}

fn write_config(dir: &Path, stages: Vec<Value>) -> PathBuf {
    let now = Utc::now();
    let doc = json!({
        "competition_id": "cli",
        "title": "CLI",
        "official_time_zone": "UTC",
        "registration_window": {"open": now - chrono::Duration::days(1), "close": now + chrono::Duration::days(30)},
        "stages": stages,
        "data_manifest": [{"file": "train.csv", "sha256": arena::fsutil::sha256_hex(TRAIN), "visibility": "registered"}]
    });
    let path = dir.join("competition.json");
    std::fs::write(&path, doc.to_string()).unwrap();
    path
}

struct Running {
    child: Child,
    url: String,
    dir: tempfile::TempDir,
    token_file: PathBuf,
}

impl Drop for Running {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start() -> Running {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(data.join("truth")).unwrap();
    std::fs::create_dir_all(data.join("files")).unwrap();
    std::fs::write(data.join("truth/s1.csv"), TRUTH).unwrap();
    std::fs::write(data.join("files/train.csv"), TRAIN).unwrap();
    let token_file = dir.path().join("organizer.token");
    std::fs::write(&token_file, format!("{ORGANIZER}\n")).unwrap();
    let config = write_config(dir.path(), vec![stage("s1", Utc::now() - chrono::Duration::hours(1), 10)]);
    let mut child = bin()
        .args(["--output", "json", "init"])
        .arg(&config)
        .arg("--data-dir")
        .arg(&data)
        .args(["--bind", "127.0.0.1:0"])
        .env("ARENA_ORGANIZER_TOKEN_FILE", &token_file)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let v: Value = serde_json::from_str(&line).unwrap_or_else(|e| panic!("{e}: {line:?}"));
    let url = format!("http://{}", v["listening"].as_str().unwrap());
    Running { child, url, dir, token_file }
}

impl Running {
    fn cli(&self, args: &[&str]) -> Output {
        bin()
            .arg("--server")
            .arg(&self.url)
            .arg("--organizer-token-file")
            .arg(&self.token_file)
            .args(args)
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }

    fn team(&self, cred_file: &Path, args: &[&str]) -> Output {
        bin().arg("--server").arg(&self.url).arg("--credential-file").arg(cred_file).args(args).current_dir(self.dir.path()).output().unwrap()
    }
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "exit {:?}\nstdout: {}\nstderr: {}", o.status.code(), stdout(&o), String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

#[test]
fn init_validates_config() {
    let dir = tempfile::tempdir().unwrap();
    let now = Utc::now();
    let good = write_config(dir.path(), vec![stage("alpha", now, 10), stage("beta", now + chrono::Duration::days(10), 10)]);
    let out = ok(bin().args(["init", "--dry-run"]).arg(&good).output().unwrap());
    assert!(out.contains("config ok"), "{out}");

    let bad = write_config(dir.path(), vec![stage("alpha", now, 10), stage("beta", now + chrono::Duration::days(5), 10)]);
    let o = bin().args(["init", "--dry-run"]).arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("alpha") && err.contains("beta") && err.contains("stages[1]"), "{err}");

    let o = bin().args(["init", "--dry-run", "/nonexistent/config.json"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = bin().arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn participant_and_organizer_workflow() {
    let srv = start();
    let cred = srv.dir.path().join("team.credential");

    let out = ok(srv.cli(&[
        "register",
        "--member",
        "Ada Lovelace <ada@example.org>",
        "--token",
        "s1=owl",
        "--accept-rules",
        "--save",
        cred.to_str().unwrap(),
    ]));
    assert!(out.contains("s1: owl") && !out.contains("ada@"), "{out}");

    let out = ok(srv.team(&cred, &["data", "pull", "train.csv"]));
    assert!(out.contains("wrote"), "{out}");
    assert_eq!(std::fs::read(srv.dir.path().join("train.csv")).unwrap(), TRAIN);
    std::fs::write(srv.dir.path().join("data/files/train.csv"), b"user_id,item_id\nu1,X\n").unwrap();
    let o = srv.team(&cred, &["data", "pull", "train.csv", "--out", "corrupt.csv"]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!srv.dir.path().join("corrupt.csv").exists());

    let payload = srv.dir.path().join("results.csv");
    std::fs::write(&payload, "user_id,item_id,rank\nu1,c,1\nu2,x,1\n").unwrap();
    let out = ok(srv.team(&cred, &["submit", "s1", payload.to_str().unwrap()]));
    assert!(out.contains("submission ") && out.contains("9 of 10 submissions left today"), "{out}");
    let receipt: Value = serde_json::from_str(&ok(srv.team(&cred, &["--output", "json", "quota", "s1"]))).unwrap();
    assert_eq!(receipt["remaining"], 9);

    // Wait for the background cycle to publish the submission.
    let deadline = Instant::now() + Duration::from_secs(20);
    let board = loop {
        let v: Value = serde_json::from_str(&stdout(&srv.cli(&["--output", "json", "board", "s1"]))).unwrap_or(json!({}));
        if v["rows"].as_array().is_some_and(|r| !r.is_empty()) {
            break v;
        }
        assert!(Instant::now() < deadline, "board never showed the submission");
        std::thread::sleep(Duration::from_millis(200));
    };
    assert_eq!(board["rows"][0]["team"], "owl");
    let served = reqwest::blocking::get(format!("{}/api/leaderboard/s1?format=csv", srv.url)).unwrap().text().unwrap();
    let table = ok(srv.cli(&["board", "s1"]));
    let served_teams: Vec<&str> = served.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    let table_teams: Vec<&str> = table.lines().skip(2).map(|l| l.split_whitespace().nth(1).unwrap()).collect();
    assert_eq!(served_teams, table_teams);

    let out = ok(srv.cli(&["freeze", "s1", "part-1"]));
    assert!(out.contains("froze s1 as \"part-1\""), "{out}");
    let o = srv.cli(&["freeze", "s1", "part-1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("already used"));

    let out = ok(srv.cli(&["twist", "s1", "2"]));
    assert!(out.contains("v1 -> v2"), "{out}");
    assert!(out.contains("froze previous board as \"s1-v1\""), "{out}");
    assert!(out.contains("re-scored 1 submissions"), "{out}");

    let out = ok(srv.cli(&["--output", "json", "verify-drain", "s1"]));
    let v: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["verification"]["completed"], 1);

    let bundle = srv.dir.path().join("export.json");
    ok(srv.cli(&["export", "s1", "--out", bundle.to_str().unwrap()]));
    let v: Value = serde_json::from_slice(&std::fs::read(&bundle).unwrap()).unwrap();
    let actions: Vec<&str> = v["audit"].as_array().unwrap().iter().map(|e| e["action"].as_str().unwrap()).collect();
    assert_eq!(actions[..4], ["freeze", "freeze", "twist", "verify-drain"]);

    let frozen = ok(srv.cli(&["board", "s1", "--frozen", "s1-v1"]));
    assert!(frozen.lines().any(|l| l.contains("owl") && l.contains("0.250000")), "{frozen}");

    // A team credential cannot act as organizer.
    let o = bin()
        .arg("--server")
        .arg(&srv.url)
        .arg("--organizer-token-file")
        .arg(&cred)
        .args(["freeze", "s1", "x"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unreachable_server_and_missing_credential() {
    let dir = tempfile::tempdir().unwrap();
    let cred = dir.path().join("c");
    std::fs::write(&cred, "x").unwrap();
    let o = bin().args(["--server", "http://127.0.0.1:9", "--credential-file"]).arg(&cred).args(["quota", "s1"]).output().unwrap();
    assert_eq!(o.status.code(), Some(4));
    let o = bin().args(["--server", "http://127.0.0.1:9", "quota", "s1"]).output().unwrap();
    assert_eq!(o.status.code(), Some(1));
    let o = bin().args(["--server", "http://127.0.0.1:9", "--output", "json", "quota", "s1"]).output().unwrap();
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["exit_code"], 1);
}

//! Shared fixtures: competitions on virtual time and an in-process server.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;

use arena::clock::VirtualClock;
use arena::config::load_config;
use arena::fsutil::sha256_hex;
use arena::platform::{Arena, ArenaOptions, RegisterRequest};
use arena::registry::Contact;
use arena::server::{router, serve_http};
use arena::verification::{RecomputeVerifier, Verifier};
use arena_core::{StageId, TeamId, Timestamp};
use chrono::{Duration, TimeZone, Utc};
use serde_json::{json, Value};

pub const ORGANIZER_TOKEN: &str = "organizer-secret-token";

pub fn base() -> Timestamp {
    Utc.with_ymd_and_hms(2022, 1, 10, 0, 0, 0).unwrap()
}

pub fn hours(h: i64) -> Timestamp {
    base() + Duration::hours(h)
}

/// A ranking stage open for `days` from `start`, MAP@`k` at v1 over all
/// interactions and at v2 over test items only.
pub fn ranking_stage(id: &str, start: Timestamp, days: i64, k: u32) -> Value {
    json!({
        "stage_id": id,
        "kind": "ranking_task",
        "open": start,
        "close": start + Duration::days(days),
        "daily_submission_limit": 10,
        "aggregation_cadence_s": 1,
        "ground_truth": format!("truth/{id}.csv"),
        "baseline_score": 0.25,
        "evaluator_versions": [
            {"version": 1, "metric": "map_at_k", "parameters": {"k": k}},
            {"version": 2, "metric": "map_at_k", "parameters": {"k": k, "relevance_universe": "test_only"}}
        ]
    })
}

pub fn config(stages: Vec<Value>) -> Value {
    json!({
        "competition_id": "acceptance",
        "title": "Acceptance",
        "official_time_zone": "UTC",
        "registration_window": {"open": "2022-01-01T00:00:00Z", "close": "2022-06-01T00:00:00Z"},
        "stages": stages,
        "badge_rules": [
            {"badge_id": "first-submission", "trigger": {"kind": "first_submission"}},
            {"badge_id": "past-baseline", "trigger": {"kind": "first_past_baseline"}}
        ]
    })
}

/// Adds `name` to the data manifest and stores its bytes under `files/`.
pub fn add_data_file(doc: &mut Value, dir: &Path, name: &str, bytes: &[u8], visibility: &str) {
    let list = doc.as_object_mut().unwrap().entry("data_manifest").or_insert_with(|| json!([]));
    list.as_array_mut().unwrap().push(json!({"file": name, "sha256": sha256_hex(bytes), "visibility": visibility}));
    std::fs::create_dir_all(dir.join("files")).unwrap();
    std::fs::write(dir.join("files").join(name), bytes).unwrap();
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub clock: Arc<VirtualClock>,
    pub arena: Arc<Arena>,
}

impl Fixture {
    /// Opens a competition whose stages all use `truth` as ground truth.
    /// `prepare` may add files to the data directory before opening.
    pub fn new(doc: Value, truth: &str, prepare: impl FnOnce(&mut Value, &Path)) -> Self {
        Self::with_verifier(doc, truth, prepare, Arc::new(RecomputeVerifier))
    }

    pub fn with_verifier(
        mut doc: Value,
        truth: &str,
        prepare: impl FnOnce(&mut Value, &Path),
        verifier: Arc<dyn Verifier>,
    ) -> Self {
        let dir = tempfile::tempdir().unwrap();
        prepare(&mut doc, dir.path());
        for s in doc["stages"].as_array().unwrap() {
            if let Some(gt) = s["ground_truth"].as_str() {
                let path = dir.path().join(gt);
                std::fs::create_dir_all(path.parent().unwrap()).unwrap();
                std::fs::write(path, truth).unwrap();
            }
        }
        let competition = Arc::new(load_config(doc.to_string().as_bytes()).unwrap());
        let clock = Arc::new(VirtualClock::new(hours(1)));
        let arena = Arena::open(
            competition,
            ArenaOptions { data_dir: dir.path().to_path_buf(), scan_root: None, clock: clock.clone(), verifier },
        )
        .unwrap();
        Self { dir, clock, arena: Arc::new(arena) }
    }

    /// Registers a one-member team using `token` in every stage. Returns the
    /// credential and the internal team id.
    pub fn register(&self, token: &str, name: &str, email: &str) -> (String, TeamId) {
        let tokens = self.arena.competition().config.stages.iter().map(|s| (s.stage_id.clone(), token.to_string()));
        let req = RegisterRequest {
            members: vec![Contact { name: name.into(), email: email.into() }],
            tokens: tokens.collect(),
            accept_rules: true,
        };
        let cred = self.arena.register(req).unwrap().credential;
        let team = self.arena.authenticate(&cred).unwrap();
        (cred, team)
    }

    pub fn submit(&self, team: &TeamId, stage: &str, payload: &[u8]) {
        self.arena.submit(team, &StageId::new(stage), payload, None).unwrap();
    }

    pub fn advance(&self, secs: i64) -> Timestamp {
        self.clock.advance(Duration::seconds(secs))
    }
}

/// An HTTP server on an ephemeral port, stopped on drop.
pub struct Server {
    pub base: String,
    stop: Option<mpsc::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl Server {
    pub fn start(arena: Arc<Arena>, ui: Option<PathBuf>) -> Self {
        let app = router(arena, Some(ORGANIZER_TOKEN.to_string()), ui);
        let (addr_tx, addr_rx) = mpsc::channel();
        let (stop_tx, stop_rx) = mpsc::channel::<()>();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                addr_tx.send(listener.local_addr().unwrap()).unwrap();
                let shutdown = async move {
                    let _ = tokio::task::spawn_blocking(move || stop_rx.recv()).await;
                };
                serve_http(listener, app, shutdown).await.unwrap();
            });
        });
        let addr = addr_rx.recv().unwrap();
        Self { base: format!("http://{addr}"), stop: Some(stop_tx), thread: Some(thread) }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        drop(self.stop.take());
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::new()
}

use std::path::Path;
use std::sync::Arc;

use arena_core::verify::Recomputed;
use arena_core::{StageId, SubmissionId, TeamId, Timestamp};
use chrono::{Duration, TimeZone, Utc};

use crate::clock::VirtualClock;
use crate::config::{load_config, SharedCompetition};
use crate::platform::{Arena, ArenaOptions, RegisterRequest};
use crate::registry::Contact;
use crate::snapshots::Published;
use crate::verification::{RecomputeVerifier, Verifier, VerifyJob};

pub(crate) fn base() -> Timestamp {
    Utc.with_ymd_and_hms(2022, 1, 10, 0, 0, 0).unwrap()
}

/// `h` hours after the first stage opens.
pub(crate) fn t(h: i64) -> Timestamp {
    base() + Duration::hours(h)
}

/// Back-to-back ten-day ranking stages starting at `base()`, UTC day
/// boundaries, limit 10 per day.
pub(crate) fn competition(ids: &[&str]) -> SharedCompetition {
    competition_with(ids, |_| {})
}

/// Like `competition`, with `edit` applied to the config document first.
pub(crate) fn competition_with(ids: &[&str], edit: impl FnOnce(&mut serde_json::Value)) -> SharedCompetition {
    let stages: Vec<serde_json::Value> = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let open = base() + Duration::days(10 * i as i64);
            serde_json::json!({
                "stage_id": id,
                "kind": "ranking_task",
                "open": open,
                "close": open + Duration::days(10),
                "daily_submission_limit": 10,
                "aggregation_cadence_s": 1,
                "ground_truth": format!("truth/{id}.csv"),
                "baseline_score": 0.25,
                "evaluator_versions": [
                    {"version": 1, "metric": "map_at_k", "parameters": {"k": 3}},
                    {"version": 2, "metric": "map_at_k",
                     "parameters": {"k": 3, "relevance_universe": "test_only"}}
                ]
            })
        })
        .collect();
    let mut doc = serde_json::json!({
        "competition_id": "test",
        "title": "Test",
        "official_time_zone": "UTC",
        "registration_window": {"open": "2022-01-01T00:00:00Z", "close": "2022-03-01T00:00:00Z"},
        "stages": stages,
        "badge_rules": [
            {"badge_id": "first-submission", "trigger": {"kind": "first_submission"}},
            {"badge_id": "past-baseline", "trigger": {"kind": "first_past_baseline"}}
        ]
    });
    edit(&mut doc);
    Arc::new(load_config(doc.to_string().as_bytes()).unwrap())
}

/// Two users with one held-out item each; `u1` also has a train interaction.
pub(crate) const TRUTH: &str = "user_id,item_id,label,split\nu1,a,1,test\nu2,b,1,test\nu1,c,1,train\n";

/// A ranking scoring `hits / 2` under MAP@3 against `TRUTH`, under either
/// relevance universe.
pub(crate) fn ranking(hits: usize) -> Vec<u8> {
    let u1 = if hits >= 1 { "a" } else { "x" };
    let u2 = if hits >= 2 { "b" } else { "x" };
    format!("user_id,item_id,rank\nu1,{u1},1\nu1,c,2\nu2,{u2},1\n").into_bytes()
}

pub(crate) struct FnVerifier<F>(pub F);

impl<F> Verifier for FnVerifier<F>
where
    F: Fn(&VerifyJob<'_>) -> Result<Recomputed, String> + Send + Sync,
{
    fn recompute(&self, job: &VerifyJob<'_>) -> Result<Recomputed, String> {
        (self.0)(job)
    }
}

pub(crate) struct Harness {
    pub dir: tempfile::TempDir,
    pub clock: Arc<VirtualClock>,
    pub arena: Arena,
}

impl Harness {
    pub fn new(competition: SharedCompetition) -> Self {
        Self::with_verifier(competition, Arc::new(RecomputeVerifier))
    }

    pub fn with_verifier(competition: SharedCompetition, verifier: Arc<dyn Verifier>) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let clock = Arc::new(VirtualClock::new(t(1)));
        for s in &competition.config.stages {
            let path = dir.path().join("truth").join(format!("{}.csv", s.stage_id));
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(path, TRUTH).unwrap();
        }
        let arena = open_arena(competition, dir.path(), clock.clone(), verifier);
        Self { dir, clock, arena }
    }

    /// Reopens the same data directory, as after a restart.
    pub fn reopen(self, verifier: Arc<dyn Verifier>) -> Self {
        let Self { dir, clock, arena } = self;
        let competition = arena.competition().clone();
        drop(arena);
        let arena = open_arena(competition, dir.path(), clock.clone(), verifier);
        Self { dir, clock, arena }
    }

    /// Registers a team with one member and the given token in every stage.
    pub fn team(&self, token: &str) -> TeamId {
        let stages = self.arena.competition().config.stages.iter().map(|s| (s.stage_id.clone(), token.to_string()));
        let req = RegisterRequest {
            members: vec![Contact { name: format!("Member {token}"), email: format!("m-{token}@example.org") }],
            tokens: stages.collect(),
            accept_rules: true,
        };
        let resp = self.arena.register(req).unwrap();
        self.arena.authenticate(&resp.credential).unwrap()
    }

    pub fn submit(&self, team: &TeamId, stage: &str, payload: &[u8]) -> SubmissionId {
        self.arena.submit(team, &StageId::new(stage), payload, None).unwrap().submission_id
    }

    pub fn advance(&self, secs: i64) {
        self.clock.advance(Duration::seconds(secs));
    }

    pub fn board(&self, stage: &str) -> Arc<Published> {
        self.arena.leaderboard(&StageId::new(stage), None).unwrap()
    }

    /// `(display_name, best_score)` in rank order.
    pub fn rows(&self, stage: &str) -> Vec<(String, Option<f64>)> {
        self.board(stage).snapshot.rows.iter().map(|r| (r.display_name.clone(), r.best_score)).collect()
    }
}

fn open_arena(competition: SharedCompetition, dir: &Path, clock: Arc<VirtualClock>, verifier: Arc<dyn Verifier>) -> Arena {
    Arena::open(competition, ArenaOptions { data_dir: dir.to_path_buf(), scan_root: None, clock, verifier }).unwrap()
}

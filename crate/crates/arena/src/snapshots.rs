//! Write-once snapshot files and the in-memory read model served to clients.
//!
//! `<data>/snapshots/<id>.json` holds the snapshot and `<id>.csv` its
//! rendered leaderboard. Neither is ever rewritten.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use arena_core::leaderboard::{LeaderboardSnapshot, RowFlag};
use arena_core::numeric::{round_half_even, PUBLISHED_DECIMALS};
use arena_core::{StageId, SubmissionId, Timestamp};
use serde::Serialize;

use crate::formats::render_leaderboard_csv;
use crate::fsutil::write_once;

/// A published snapshot with its two wire renderings.
#[derive(Debug, Clone, PartialEq)]
pub struct Published {
    pub snapshot: LeaderboardSnapshot,
    pub csv: Vec<u8>,
    pub json: Vec<u8>,
}

#[derive(Serialize)]
struct PublicRow<'a> {
    rank: u32,
    display_name: &'a str,
    best_score: Option<f64>,
    submission_count: u32,
    last_submission_at: Timestamp,
    badges: &'a [String],
    flags: &'a [RowFlag],
}

#[derive(Serialize)]
struct PublicSnapshot<'a> {
    snapshot_id: u64,
    created_at: Timestamp,
    stage_id: &'a StageId,
    evaluator_version: u32,
    frozen: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    freeze_label: Option<&'a str>,
    rows: Vec<PublicRow<'a>>,
}

/// JSON view: scores rounded to the published precision.
pub fn render_public_json(s: &LeaderboardSnapshot) -> Vec<u8> {
    let view = PublicSnapshot {
        snapshot_id: s.snapshot_id,
        created_at: s.created_at,
        stage_id: &s.stage_id,
        evaluator_version: s.evaluator_version,
        frozen: s.frozen,
        freeze_label: s.freeze_label.as_deref(),
        rows: s
            .rows
            .iter()
            .map(|r| PublicRow {
                rank: r.rank,
                display_name: &r.display_name,
                best_score: r.best_score.map(|x| round_half_even(x, PUBLISHED_DECIMALS)),
                submission_count: r.submission_count,
                last_submission_at: r.last_submission_at,
                badges: &r.badges,
                flags: &r.flags,
            })
            .collect(),
    };
    serde_json::to_vec(&view).expect("serializes")
}

impl Published {
    pub fn render(snapshot: LeaderboardSnapshot) -> Self {
        let csv = render_leaderboard_csv(&snapshot);
        let json = render_public_json(&snapshot);
        Self { snapshot, csv, json }
    }
}

#[derive(Debug)]
pub struct SnapshotStore {
    dir: PathBuf,
    next_id: u64,
}

impl SnapshotStore {
    /// Ids continue after the largest file present, so a crash after writing
    /// a snapshot but before recording it can never cause an id to be reused.
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let mut max = 0;
        for entry in fs::read_dir(dir)? {
            let name = entry?.file_name();
            let Some(name) = name.to_str() else { continue };
            if let Some(id) = name.split('.').next().and_then(|s| s.parse::<u64>().ok()) {
                max = max.max(id);
            }
        }
        Ok(Self { dir: dir.to_path_buf(), next_id: max + 1 })
    }

    pub fn allocate(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn write(&self, snapshot: LeaderboardSnapshot) -> std::io::Result<Arc<Published>> {
        let p = Published::render(snapshot);
        let id = p.snapshot.snapshot_id;
        let full = serde_json::to_vec_pretty(&p.snapshot).expect("serializes");
        write_once(&self.dir.join(format!("{id}.json")), &full)?;
        write_once(&self.dir.join(format!("{id}.csv")), &p.csv)?;
        Ok(Arc::new(p))
    }

    pub fn load(&self, id: u64) -> std::io::Result<Arc<Published>> {
        let full = fs::read(self.dir.join(format!("{id}.json")))?;
        let snapshot: LeaderboardSnapshot = serde_json::from_slice(&full).map_err(std::io::Error::other)?;
        let csv = fs::read(self.dir.join(format!("{id}.csv")))?;
        let json = render_public_json(&snapshot);
        Ok(Arc::new(Published { snapshot, csv, json }))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PublicBadge {
    pub badge_id: String,
    pub display_name: String,
    pub awarded_at: Timestamp,
}

/// What a team may see about one of its own submissions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubmissionStatus {
    pub submission_id: SubmissionId,
    pub stage_id: StageId,
    pub received_at: Timestamp,
    pub evaluated: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluator_version: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format_error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verification: Option<arena_core::Verification>,
    pub duplicate: bool,
}

#[derive(Debug, Clone, Default)]
pub struct StageBoard {
    pub current_version: u32,
    pub live: Option<Arc<Published>>,
    pub frozen: BTreeMap<String, Arc<Published>>,
    pub badges: Vec<PublicBadge>,
    pub verification_pending: u32,
}

/// Everything readers see. Replaced wholesale per stage, so a reader always
/// observes one complete published state.
#[derive(Debug, Default)]
pub struct ReadModel {
    stages: RwLock<BTreeMap<StageId, Arc<StageBoard>>>,
    statuses: RwLock<BTreeMap<SubmissionId, SubmissionStatus>>,
}

impl ReadModel {
    pub fn stage(&self, stage: &StageId) -> Option<Arc<StageBoard>> {
        self.stages.read().unwrap_or_else(|p| p.into_inner()).get(stage).cloned()
    }

    pub fn set_stage(&self, stage: StageId, board: StageBoard) {
        self.stages.write().unwrap_or_else(|p| p.into_inner()).insert(stage, Arc::new(board));
    }

    /// Looks a frozen label up across every stage.
    pub fn frozen(&self, label: &str) -> Option<Arc<Published>> {
        let stages = self.stages.read().unwrap_or_else(|p| p.into_inner());
        stages.values().find_map(|b| b.frozen.get(label).cloned())
    }

    pub fn status(&self, id: SubmissionId) -> Option<SubmissionStatus> {
        self.statuses.read().unwrap_or_else(|p| p.into_inner()).get(&id).cloned()
    }

    pub fn set_statuses(&self, statuses: impl IntoIterator<Item = SubmissionStatus>) {
        let mut map = self.statuses.write().unwrap_or_else(|p| p.into_inner());
        for s in statuses {
            map.insert(s.submission_id, s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::t;
    use arena_core::leaderboard::LeaderboardRow;

    fn snap(id: u64, score: f64) -> LeaderboardSnapshot {
        LeaderboardSnapshot {
            snapshot_id: id,
            created_at: t(0),
            stage_id: StageId::new("s1"),
            evaluator_version: 1,
            rows: vec![LeaderboardRow {
                rank: 1,
                display_name: "owl".into(),
                best_score: Some(score),
                submission_count: 2,
                last_submission_at: t(0),
                badges: vec!["first-submission".into()],
                flags: vec![RowFlag::Pending],
            }],
            frozen: false,
            freeze_label: None,
        }
    }

    #[test]
    fn write_load_round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = SnapshotStore::open(dir.path()).unwrap();
        let id = store.allocate();
        let written = store.write(snap(id, 1.0 / 3.0)).unwrap();
        let loaded = store.load(id).unwrap();
        assert_eq!(written, loaded);
        assert_eq!(
            String::from_utf8(loaded.csv.clone()).unwrap(),
            "rank,team,score,submissions,last_submission_utc,badges,flags\n\
             1,owl,0.333333,2,2022-01-10T00:00:00Z,first-submission,pending\n"
        );
        let json: serde_json::Value = serde_json::from_slice(&loaded.json).unwrap();
        assert_eq!(json["rows"][0]["best_score"], 0.333333);
    }

    #[test]
    fn rewriting_an_id_with_other_content_fails() {
        let dir = tempfile::tempdir().unwrap();
        let store = SnapshotStore::open(dir.path()).unwrap();
        store.write(snap(1, 0.5)).unwrap();
        store.write(snap(1, 0.5)).unwrap();
        assert!(store.write(snap(1, 0.6)).is_err());
    }

    #[test]
    fn ids_continue_after_files_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let store = SnapshotStore::open(dir.path()).unwrap();
        store.write(snap(7, 0.5)).unwrap();
        let mut again = SnapshotStore::open(dir.path()).unwrap();
        assert_eq!(again.allocate(), 8);
    }
}

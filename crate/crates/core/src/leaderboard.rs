//! Leaderboard rows and their deterministic total order.
//!
//! Teams are ordered by best score (descending), then total runtime
//! (ascending, instance logs only), then the time the best score was first
//! achieved, then display name. Teams without any rankable score come last.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::config::LeaderboardMode;
use crate::ids::{StageId, SubmissionId, TeamId};
use crate::score::{ScoreRecord, Verification};
use crate::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowFlag {
    /// The record behind the shown score has not been verified yet.
    Pending,
    /// At least one of the team's records failed verification.
    Invalidated,
    /// The team's most recent evaluated submission was malformed.
    Rejected,
    /// The team is no longer active in the competition.
    Inactive,
}

impl RowFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            RowFlag::Pending => "pending",
            RowFlag::Invalidated => "invalidated",
            RowFlag::Rejected => "rejected",
            RowFlag::Inactive => "inactive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardRow {
    pub rank: u32,
    pub display_name: String,
    pub best_score: Option<f64>,
    pub submission_count: u32,
    pub last_submission_at: Timestamp,
    pub badges: Vec<String>,
    pub flags: Vec<RowFlag>,
}

/// Immutable published view of a stage's leaderboard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderboardSnapshot {
    pub snapshot_id: u64,
    pub created_at: Timestamp,
    pub stage_id: StageId,
    pub evaluator_version: u32,
    pub rows: Vec<LeaderboardRow>,
    pub frozen: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub freeze_label: Option<String>,
}

/// One accepted submission as seen by the leaderboard.
#[derive(Debug, Clone, Copy)]
pub struct Entry<'a> {
    pub submission_id: SubmissionId,
    pub team_id: &'a TeamId,
    pub received_at: Timestamp,
    /// `None` until the submission has been evaluated.
    pub record: Option<&'a ScoreRecord>,
}

/// Public facts about a team needed to render its row.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TeamView {
    pub display_name: String,
    pub active: bool,
    pub badges: Vec<String>,
}

#[derive(Debug, Clone, Copy)]
struct Achieved {
    score: f64,
    runtime: f64,
    received_at: Timestamp,
    submission_id: SubmissionId,
    pending: bool,
}

impl Achieved {
    /// Cross-team order; `Less` means ranked higher.
    fn rank_cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .total_cmp(&self.score)
            .then(self.runtime.total_cmp(&other.runtime))
            .then(self.received_at.cmp(&other.received_at))
    }

    /// Within-team choice of the shown record.
    fn better(&self, other: &Self) -> Ordering {
        self.rank_cmp(other).then(self.submission_id.cmp(&other.submission_id))
    }
}

struct TeamAccum<'a> {
    team_id: &'a TeamId,
    count: u32,
    last: Timestamp,
    shown: Option<Achieved>,
    invalidated: bool,
    latest_evaluated: Option<(Timestamp, SubmissionId, bool)>,
}

/// Computes ranked rows from every accepted submission of one stage.
///
/// Records whose `evaluator_version` differs from `version` are treated as
/// not yet evaluated, so rows never mix versions. Teams missing from `teams`
/// are skipped.
pub fn compute_leaderboard(
    entries: &[Entry<'_>],
    version: u32,
    teams: &BTreeMap<TeamId, TeamView>,
    mode: LeaderboardMode,
) -> Vec<LeaderboardRow> {
    let mut acc: BTreeMap<&TeamId, TeamAccum<'_>> = BTreeMap::new();
    for e in entries {
        let a = acc.entry(e.team_id).or_insert_with(|| TeamAccum {
            team_id: e.team_id,
            count: 0,
            last: e.received_at,
            shown: None,
            invalidated: false,
            latest_evaluated: None,
        });
        a.count += 1;
        a.last = a.last.max(e.received_at);
        let Some(rec) = e.record.filter(|r| r.evaluator_version == version) else {
            continue;
        };
        if rec.verification == Verification::Invalidated {
            a.invalidated = true;
        }
        let key = (e.received_at, e.submission_id);
        if a.latest_evaluated.map_or(true, |(t, id, _)| (t, id) < key) {
            a.latest_evaluated = Some((e.received_at, e.submission_id, rec.is_format_error()));
        }
        let Some(score) = rec.rankable_score() else { continue };
        let candidate = Achieved {
            score,
            runtime: rec.aux.total_runtime_s.unwrap_or(0.0),
            received_at: e.received_at,
            submission_id: e.submission_id,
            pending: rec.verification == Verification::Pending,
        };
        a.shown = Some(match (a.shown, mode) {
            (None, _) => candidate,
            (Some(cur), LeaderboardMode::Best) => {
                if candidate.better(&cur) == Ordering::Less {
                    candidate
                } else {
                    cur
                }
            }
            (Some(cur), LeaderboardMode::Latest) => {
                if (candidate.received_at, candidate.submission_id)
                    > (cur.received_at, cur.submission_id)
                {
                    candidate
                } else {
                    cur
                }
            }
        });
    }

    let mut rows: Vec<(Option<Achieved>, &TeamId, LeaderboardRow)> = acc
        .into_values()
        .filter_map(|a| {
            let view = teams.get(a.team_id)?;
            let mut flags = Vec::new();
            if a.shown.is_some_and(|s| s.pending) {
                flags.push(RowFlag::Pending);
            }
            if a.invalidated {
                flags.push(RowFlag::Invalidated);
            }
            if a.latest_evaluated.is_some_and(|(_, _, err)| err) {
                flags.push(RowFlag::Rejected);
            }
            if !view.active {
                flags.push(RowFlag::Inactive);
            }
            let row = LeaderboardRow {
                rank: 0,
                display_name: view.display_name.clone(),
                best_score: a.shown.map(|s| s.score),
                submission_count: a.count,
                last_submission_at: a.last,
                badges: view.badges.clone(),
                flags,
            };
            Some((a.shown, a.team_id, row))
        })
        .collect();

    rows.sort_by(|(sa, ta, ra), (sb, tb, rb)| {
        let by_score = match (sa, sb) {
            (Some(x), Some(y)) => x.rank_cmp(y),
            (Some(_), None) => Ordering::Less,
            (None, Some(_)) => Ordering::Greater,
            (None, None) => Ordering::Equal,
        };
        by_score.then_with(|| ra.display_name.cmp(&rb.display_name)).then_with(|| ta.cmp(tb))
    });

    rows.into_iter()
        .enumerate()
        .map(|(i, (_, _, mut row))| {
            row.rank = i as u32 + 1;
            row
        })
        .collect()
}

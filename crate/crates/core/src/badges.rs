//! Milestone badges.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::{BadgeRule, BadgeTrigger, CustomPredicate};
use crate::ids::{StageId, SubmissionId, TeamId};
use crate::leaderboard::Entry;
use crate::Timestamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BadgeAward {
    pub badge_id: String,
    pub stage_id: StageId,
    /// Private; public views carry the stage display name instead.
    pub team_id: TeamId,
    pub awarded_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submission_id: Option<SubmissionId>,
}

/// Evaluates every rule for one stage and returns only the new awards.
///
/// `entries` must carry records of the stage's current evaluator version
/// only. Stage-wide rules fire at most once per stage; per-team custom rules
/// fire at most once per team.
pub fn award_badges(
    rules: &[BadgeRule],
    stage: &StageId,
    baseline: Option<f64>,
    entries: &[Entry<'_>],
    existing: &[BadgeAward],
    now: Timestamp,
) -> Vec<BadgeAward> {
    let mut out = Vec::new();
    let fired = |badge: &str, team: Option<&TeamId>| {
        existing.iter().any(|a| {
            a.badge_id == badge && &a.stage_id == stage && team.map_or(true, |t| &a.team_id == t)
        })
    };
    let earliest = |pred: &dyn Fn(&Entry<'_>) -> bool| {
        entries
            .iter()
            .filter(|e| pred(e))
            .min_by_key(|e| (e.received_at, e.submission_id))
            .copied()
    };

    for rule in rules.iter().filter(|r| r.applies_to(stage)) {
        let award = |team_id: &TeamId, submission_id| BadgeAward {
            badge_id: rule.badge_id.clone(),
            stage_id: stage.clone(),
            team_id: team_id.clone(),
            awarded_at: now,
            submission_id,
        };
        match &rule.trigger {
            BadgeTrigger::FirstSubmission => {
                if fired(&rule.badge_id, None) {
                    continue;
                }
                if let Some(e) = earliest(&|_| true) {
                    out.push(award(e.team_id, Some(e.submission_id)));
                }
            }
            BadgeTrigger::FirstPastBaseline => {
                let Some(baseline) = baseline else { continue };
                if fired(&rule.badge_id, None) {
                    continue;
                }
                let passes = |e: &Entry<'_>| {
                    e.record.and_then(|r| r.rankable_score()).is_some_and(|s| s > baseline)
                };
                if let Some(e) = earliest(&passes) {
                    out.push(award(e.team_id, Some(e.submission_id)));
                }
            }
            BadgeTrigger::Custom(CustomPredicate::SubmissionCount { at_least }) => {
                let mut counts: BTreeMap<&TeamId, u32> = BTreeMap::new();
                for e in entries {
                    *counts.entry(e.team_id).or_default() += 1;
                }
                for (team, n) in counts {
                    if n >= *at_least && !fired(&rule.badge_id, Some(team)) {
                        out.push(award(team, None));
                    }
                }
            }
            BadgeTrigger::Custom(CustomPredicate::Manual) => {}
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::tests::at;
    use crate::score::{ScoreAux, ScoreRecord, Verification};
    use alloc::vec;

    fn rule(id: &str, trigger: BadgeTrigger) -> BadgeRule {
        BadgeRule { badge_id: id.into(), stage_id: None, trigger }
    }

    fn rec(id: u64, score: f64) -> ScoreRecord {
        ScoreRecord {
            submission_id: SubmissionId(id),
            evaluator_version: 1,
            primary_score: Some(score),
            aux: ScoreAux::default(),
            verification: Verification::Pending,
            evaluated_at: at(0),
        }
    }

    #[test]
    fn first_submission_once() {
        let s = StageId::new("s");
        let (a, b) = (TeamId::new("a"), TeamId::new("b"));
        let entries = [
            Entry { submission_id: SubmissionId(2), team_id: &b, received_at: at(2), record: None },
            Entry { submission_id: SubmissionId(1), team_id: &a, received_at: at(1), record: None },
        ];
        let rules = [rule("first", BadgeTrigger::FirstSubmission)];
        let new = award_badges(&rules, &s, None, &entries, &[], at(3));
        assert_eq!(new.len(), 1);
        assert_eq!(new[0].team_id, a);
        assert!(award_badges(&rules, &s, None, &entries, &new, at(4)).is_empty());
    }

    #[test]
    fn baseline_earliest_wins() {
        let s = StageId::new("s");
        let (a, b) = (TeamId::new("a"), TeamId::new("b"));
        let (ra, rb) = (rec(1, 0.6), rec(2, 0.9));
        // both pass in the same cycle; b's submission arrived first
        let entries = [
            Entry { submission_id: SubmissionId(1), team_id: &a, received_at: at(5), record: Some(&ra) },
            Entry { submission_id: SubmissionId(2), team_id: &b, received_at: at(4), record: Some(&rb) },
        ];
        let rules = [rule("baseline", BadgeTrigger::FirstPastBaseline)];
        let new = award_badges(&rules, &s, Some(0.5), &entries, &[], at(6));
        assert_eq!(new.len(), 1);
        assert_eq!(new[0].team_id, b);
    }

    #[test]
    fn baseline_must_be_strictly_exceeded() {
        let s = StageId::new("s");
        let a = TeamId::new("a");
        let ra = rec(1, 0.5);
        let entries = [Entry { submission_id: SubmissionId(1), team_id: &a, received_at: at(5), record: Some(&ra) }];
        let rules = [rule("baseline", BadgeTrigger::FirstPastBaseline)];
        assert!(award_badges(&rules, &s, Some(0.5), &entries, &[], at(6)).is_empty());
    }

    #[test]
    fn no_baseline_never_fires() {
        let s = StageId::new("s");
        let a = TeamId::new("a");
        let ra = rec(1, 1.0);
        let entries = [Entry { submission_id: SubmissionId(1), team_id: &a, received_at: at(5), record: Some(&ra) }];
        let rules = [rule("baseline", BadgeTrigger::FirstPastBaseline)];
        assert!(award_badges(&rules, &s, None, &entries, &[], at(6)).is_empty());
    }

    #[test]
    fn submission_count_per_team() {
        let s = StageId::new("s");
        let (a, b) = (TeamId::new("a"), TeamId::new("b"));
        let entries = [
            Entry { submission_id: SubmissionId(1), team_id: &a, received_at: at(1), record: None },
            Entry { submission_id: SubmissionId(2), team_id: &a, received_at: at(2), record: None },
            Entry { submission_id: SubmissionId(3), team_id: &b, received_at: at(3), record: None },
        ];
        let rules = [rule(
            "busy",
            BadgeTrigger::Custom(CustomPredicate::SubmissionCount { at_least: 2 }),
        )];
        let new = award_badges(&rules, &s, None, &entries, &[], at(4));
        assert_eq!(new.iter().map(|a| &a.team_id).collect::<Vec<_>>(), vec![&a]);
        assert!(award_badges(&rules, &s, None, &entries, &new, at(5)).is_empty());
    }

    #[test]
    fn stage_scoped_rule() {
        let s = StageId::new("s");
        let a = TeamId::new("a");
        let entries = [Entry { submission_id: SubmissionId(1), team_id: &a, received_at: at(1), record: None }];
        let mut r = rule("first", BadgeTrigger::FirstSubmission);
        r.stage_id = Some(StageId::new("other"));
        assert!(award_badges(&[r], &s, None, &entries, &[], at(2)).is_empty());
    }
}

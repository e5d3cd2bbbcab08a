//! Comparison of fast-path claims against slow-path recomputation.

use alloc::collections::BTreeSet;

use crate::instance::{InstanceLog, InstanceStatus};
use crate::score::Verification;

/// What the leaderboard currently believes about a submission.
#[derive(Debug, Clone, Copy)]
pub enum Claim<'a> {
    Score(f64),
    InstanceLog(&'a InstanceLog),
}

/// What the verifier produced by re-running or recomputing.
#[derive(Debug, Clone, PartialEq)]
pub enum Recomputed {
    Score(f64),
    InstanceLog(InstanceLog),
}

/// `Verified` when the recomputation agrees with the claim within
/// `tolerance`; `Invalidated` otherwise.
///
/// Instance logs must agree on the status of every instance mentioned by
/// either side (a missing row counts as unsolved) and on every solved
/// objective.
pub fn judge(claim: Claim<'_>, recomputed: &Recomputed, tolerance: f64) -> Verification {
    let ok = match (claim, recomputed) {
        (Claim::Score(c), Recomputed::Score(r)) => r.is_finite() && (c - r).abs() <= tolerance,
        (Claim::InstanceLog(c), Recomputed::InstanceLog(r)) => logs_agree(c, r, tolerance),
        _ => false,
    };
    if ok {
        Verification::Verified
    } else {
        Verification::Invalidated
    }
}

fn logs_agree(claimed: &InstanceLog, rerun: &InstanceLog, tolerance: f64) -> bool {
    let names: BTreeSet<&str> = claimed
        .rows()
        .iter()
        .chain(rerun.rows())
        .map(|r| r.instance.as_str())
        .collect();
    names.into_iter().all(|name| {
        let c = claimed.row(name);
        let r = rerun.row(name);
        let status = |row: Option<&crate::instance::InstanceRow>| {
            row.map_or(InstanceStatus::Unsolved, |r| r.status)
        };
        if status(c) != status(r) {
            return false;
        }
        match (c.and_then(|x| x.objective), r.and_then(|x| x.objective)) {
            (Some(a), Some(b)) => (a - b).abs() <= tolerance,
            (None, None) => true,
            _ => false,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instance::tests::row;
    use alloc::vec;

    #[test]
    fn score_within_tolerance() {
        assert_eq!(judge(Claim::Score(0.5), &Recomputed::Score(0.5 + 5e-7), 1e-6), Verification::Verified);
        assert_eq!(judge(Claim::Score(0.5), &Recomputed::Score(0.6), 1e-6), Verification::Invalidated);
        assert_eq!(judge(Claim::Score(0.5), &Recomputed::Score(f64::NAN), 1e-6), Verification::Invalidated);
    }

    #[test]
    fn objective_mismatch_invalidates() {
        let claimed = InstanceLog::new(vec![row("a", Some(40.0), 1.0)]).unwrap();
        let rerun = InstanceLog::new(vec![row("a", Some(50.0), 3.0)]).unwrap();
        assert_eq!(
            judge(Claim::InstanceLog(&claimed), &Recomputed::InstanceLog(rerun), 1e-6),
            Verification::Invalidated
        );
    }

    #[test]
    fn matching_logs_verify_despite_runtime() {
        let claimed = InstanceLog::new(vec![row("a", Some(40.0), 1.0), row("b", None, 1.0)]).unwrap();
        let rerun = InstanceLog::new(vec![row("a", Some(40.0), 9.0)]).unwrap();
        assert_eq!(
            judge(Claim::InstanceLog(&claimed), &Recomputed::InstanceLog(rerun), 1e-6),
            Verification::Verified
        );
    }

    #[test]
    fn status_mismatch_invalidates() {
        let claimed = InstanceLog::new(vec![row("a", Some(40.0), 1.0)]).unwrap();
        let rerun = InstanceLog::new(vec![row("a", None, 1.0)]).unwrap();
        assert_eq!(
            judge(Claim::InstanceLog(&claimed), &Recomputed::InstanceLog(rerun), 1e-6),
            Verification::Invalidated
        );
    }

    #[test]
    fn kind_mismatch_invalidates() {
        let rerun = InstanceLog::default();
        assert_eq!(judge(Claim::Score(1.0), &Recomputed::InstanceLog(rerun), 1.0), Verification::Invalidated);
    }
}

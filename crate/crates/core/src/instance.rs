//! Scoring of per-instance result logs for combinatorial benchmark stages.
//!
//! The primary score is `solved_count + mean(quality)` with every quality in
//! `(0, 1]`, so one extra solved instance always outweighs any quality gain.
//! Runtime is reported but only used as a tie-break when ranking.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::config::ObjectiveSense;
use crate::numeric::CompensatedSum;

/// Lower clamp for per-instance quality. Keeps `solved + mean(q)` strictly
/// above `solved` for any realistic solved count.
pub const MIN_QUALITY: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceStatus {
    Solved,
    Infeasible,
    Unsolved,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRow {
    pub instance: String,
    pub status: InstanceStatus,
    /// Present iff `status == Solved`.
    pub objective: Option<f64>,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InstanceError {
    #[error("instance \"{0}\" is not in the benchmark manifest")]
    UnknownInstance(String),
    #[error("instance \"{0}\" appears more than once")]
    DuplicateInstance(String),
    #[error("instance \"{0}\" has a negative or non-finite runtime")]
    BadRuntime(String),
    #[error("instance \"{0}\" is solved but has no finite objective")]
    MissingObjective(String),
    #[error("instance \"{0}\" is not solved but reports an objective")]
    UnexpectedObjective(String),
}

/// A validated results log: instance names are unique, runtimes are
/// non-negative, and objectives are present exactly on solved rows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InstanceLog {
    rows: Vec<InstanceRow>,
}

impl InstanceLog {
    pub fn new(rows: Vec<InstanceRow>) -> Result<Self, InstanceError> {
        let mut seen = BTreeSet::new();
        for row in &rows {
            if !seen.insert(row.instance.as_str()) {
                return Err(InstanceError::DuplicateInstance(row.instance.clone()));
            }
            if !(row.runtime_s.is_finite() && row.runtime_s >= 0.0) {
                return Err(InstanceError::BadRuntime(row.instance.clone()));
            }
            match (row.status, row.objective) {
                (InstanceStatus::Solved, Some(o)) if o.is_finite() => {}
                (InstanceStatus::Solved, _) => {
                    return Err(InstanceError::MissingObjective(row.instance.clone()))
                }
                (_, Some(_)) => return Err(InstanceError::UnexpectedObjective(row.instance.clone())),
                (_, None) => {}
            }
        }
        Ok(Self { rows })
    }

    pub fn rows(&self) -> &[InstanceRow] {
        &self.rows
    }

    pub fn row(&self, instance: &str) -> Option<&InstanceRow> {
        self.rows.iter().find(|r| r.instance == instance)
    }

    pub fn solved(&self) -> impl Iterator<Item = (&str, f64)> {
        self.rows.iter().filter_map(|r| match (r.status, r.objective) {
            (InstanceStatus::Solved, Some(o)) => Some((r.instance.as_str(), o)),
            _ => None,
        })
    }

    pub fn check_manifest(
        &self,
        manifest: &BTreeMap<String, ObjectiveSense>,
    ) -> Result<(), InstanceError> {
        match self.rows.iter().find(|r| !manifest.contains_key(&r.instance)) {
            Some(r) => Err(InstanceError::UnknownInstance(r.instance.clone())),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceOutcome {
    pub primary_score: f64,
    pub solved_count: u32,
    pub mean_quality: f64,
    pub total_runtime_s: f64,
}

/// Best objective per instance across the given logs.
pub fn best_known<'a>(
    logs: impl IntoIterator<Item = &'a InstanceLog>,
    manifest: &BTreeMap<String, ObjectiveSense>,
) -> BTreeMap<String, f64> {
    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    for log in logs {
        for (name, obj) in log.solved() {
            let Some(sense) = manifest.get(name) else { continue };
            best.entry(String::from(name))
                .and_modify(|b| {
                    *b = match sense {
                        ObjectiveSense::Min => b.min(obj),
                        ObjectiveSense::Max => b.max(obj),
                    }
                })
                .or_insert(obj);
        }
    }
    best
}

/// Quality of one solved objective relative to the best known, clamped to
/// `[MIN_QUALITY, 1]`.
pub fn quality(objective: f64, best: Option<f64>, sense: ObjectiveSense) -> f64 {
    let Some(best) = best else { return 1.0 };
    if objective == best {
        return 1.0;
    }
    let ratio = match sense {
        ObjectiveSense::Min => best / objective,
        ObjectiveSense::Max => objective / best,
    };
    if ratio.is_nan() || ratio <= MIN_QUALITY {
        MIN_QUALITY
    } else {
        ratio.min(1.0)
    }
}

pub fn evaluate_instance_log(
    log: &InstanceLog,
    manifest: &BTreeMap<String, ObjectiveSense>,
    best_known: &BTreeMap<String, f64>,
) -> Result<InstanceOutcome, InstanceError> {
    log.check_manifest(manifest)?;
    let mut solved = 0u32;
    let mut q_sum = CompensatedSum::new();
    for (name, obj) in log.solved() {
        solved += 1;
        q_sum.add(quality(obj, best_known.get(name).copied(), manifest[name]));
    }
    let mean_quality = if solved == 0 { 0.0 } else { q_sum.value() / f64::from(solved) };
    let runtime: CompensatedSum = log.rows.iter().map(|r| r.runtime_s).collect();
    Ok(InstanceOutcome {
        primary_score: f64::from(solved) + mean_quality,
        solved_count: solved,
        mean_quality,
        total_runtime_s: runtime.value(),
    })
}

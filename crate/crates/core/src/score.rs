use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::ids::SubmissionId;
use crate::Timestamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verification {
    /// Verification required but not yet completed.
    Pending,
    Verified,
    Invalidated,
}

/// Metric-specific side values kept next to the primary score.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreAux {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluated_users: Option<u32>,
    /// SHA-256 over the per-user AP vector (user order, little-endian f64).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solved_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_runtime_s: Option<f64>,
    /// Same payload digest was already submitted by the team for this stage.
    #[serde(default, skip_serializing_if = "core::ops::Not::not")]
    pub duplicate: bool,
    /// Format error text when the payload could not be scored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// The evaluation of one submission under one evaluator version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub submission_id: SubmissionId,
    pub evaluator_version: u32,
    /// Absent when the payload was rejected as malformed.
    pub primary_score: Option<f64>,
    pub aux: ScoreAux,
    pub verification: Verification,
    pub evaluated_at: Timestamp,
}

impl ScoreRecord {
    pub fn is_format_error(&self) -> bool {
        self.primary_score.is_none()
    }

    /// Score usable for ranking: present and not invalidated.
    pub fn rankable_score(&self) -> Option<f64> {
        match self.verification {
            Verification::Invalidated => None,
            _ => self.primary_score,
        }
    }

    /// Equality ignoring `evaluated_at`.
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.submission_id == other.submission_id
            && self.evaluator_version == other.evaluator_version
            && self.primary_score.map(f64::to_bits) == other.primary_score.map(f64::to_bits)
            && self.aux == other.aux
            && self.verification == other.verification
    }
}

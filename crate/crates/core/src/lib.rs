//! Scoring, ranking and badge logic for anonymous competition leaderboards.
//!
//! Everything in this crate is a pure function of its inputs and needs only
//! `alloc`. File formats, persistence, clocks and the network surface live in
//! the `arena` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod badges;
pub mod config;
pub mod ids;
pub mod instance;
pub mod leaderboard;
pub mod numeric;
pub mod ranking;
pub mod score;
pub mod verify;

pub use config::{
    BadgeRule, BadgeTrigger, CompetitionConfig, ConfigError, DataFile, EvaluatorSpec,
    LeaderboardMode, ListFilter, MetricSpec, ObjectiveSense, RelevanceUniverse, StageConfig,
    StageKind, TimeWindow, VerificationPolicy, Visibility,
};
pub use ids::{StageId, SubmissionId, TeamId};
pub use score::{ScoreAux, ScoreRecord, Verification};

/// All instants handled by the core are UTC.
pub type Timestamp = chrono::DateTime<chrono::Utc>;

//! Declarative competition definition: stages, timeline, evaluators, data
//! manifest and badge rules.
//!
//! Parsing and time-zone resolution happen in the `arena` crate; this module
//! owns the types, the structural invariants and stage lookup.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::ids::{is_path_safe, StageId};
use crate::Timestamp;

/// Default payload size cap: 16 MiB.
pub const DEFAULT_MAX_PAYLOAD_BYTES: u64 = 16 * 1024 * 1024;
pub const DEFAULT_VERIFICATION_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_VERIFICATION_BATCH: u32 = 64;
pub const DEFAULT_VERIFIER_TIMEOUT_S: u64 = 600;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompetitionConfig {
    pub competition_id: String,
    pub title: String,
    /// IANA zone name. Only used for day boundaries and display.
    pub official_time_zone: String,
    pub registration_window: TimeWindow,
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub data_manifest: Vec<DataFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discussion_url: Option<String>,
    #[serde(default)]
    pub badge_rules: Vec<BadgeRule>,
    /// Whether frozen boards are browsable without organizer credentials.
    #[serde(default = "default_true")]
    pub frozen_boards_public: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeWindow {
    pub open: Timestamp,
    pub close: Timestamp,
}

impl TimeWindow {
    /// Closed-open containment: `open <= t < close`.
    pub fn contains(&self, t: Timestamp) -> bool {
        self.open <= t && t < self.close
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataFile {
    pub file: String,
    /// Lowercase hex SHA-256 of the file contents.
    pub sha256: String,
    pub visibility: Visibility,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Visibility {
    Public,
    Registered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    RankingTask,
    InstanceTask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LeaderboardMode {
    /// Best non-invalidated score per team.
    #[default]
    Best,
    /// Most recent scored, non-invalidated submission per team.
    Latest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage_id: StageId,
    pub kind: StageKind,
    pub open: Timestamp,
    pub close: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preliminary_deadline: Option<Timestamp>,
    pub daily_submission_limit: u32,
    pub aggregation_cadence_s: u64,
    pub evaluator_versions: Vec<EvaluatorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_score: Option<f64>,
    /// Private holdout file, relative to the data directory. Required for
    /// ranking tasks; never listed in the public manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    #[serde(default = "default_extension")]
    pub artifact_extension: String,
    #[serde(default)]
    pub leaderboard_mode: LeaderboardMode,
    #[serde(default = "default_max_payload")]
    pub max_payload_bytes: u64,
    /// Verification results consumed per aggregator cycle.
    #[serde(default = "default_verification_batch")]
    pub verification_batch: u32,
}

impl StageConfig {
    pub fn window(&self) -> TimeWindow {
        TimeWindow { open: self.open, close: self.close }
    }

    pub fn evaluator(&self, version: u32) -> Option<&EvaluatorSpec> {
        self.evaluator_versions.iter().find(|e| e.version == version)
    }

    pub fn first_evaluator(&self) -> &EvaluatorSpec {
        &self.evaluator_versions[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatorSpec {
    pub version: u32,
    #[serde(flatten)]
    pub metric: MetricSpec,
    #[serde(default)]
    pub verification: VerificationPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "metric", content = "parameters", rename_all = "snake_case")]
pub enum MetricSpec {
    MapAtK(MapParams),
    InstanceLog(InstanceLogParams),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapParams {
    pub k: u32,
    #[serde(default)]
    pub relevance_universe: RelevanceUniverse,
    #[serde(default)]
    pub list_filter: ListFilter,
}

/// Which positive interactions count as relevant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelevanceUniverse {
    #[default]
    AllInteractions,
    /// Positives restricted to items that occur in the test split.
    TestOnly,
}

/// Optional filtering of submitted lists before truncation to `k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ListFilter {
    #[default]
    None,
    /// Drop recommended items that never occur in the test split.
    TestItemsOnly,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceLogParams {
    /// Data manifest entry describing the benchmark instances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<String>,
    /// Every scored instance with its objective sense.
    pub instances: BTreeMap<String, ObjectiveSense>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveSense {
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationPolicy {
    #[serde(default = "default_true")]
    pub required: bool,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// External verifier: program and leading arguments. The payload path and
    /// ground-truth path are appended. Recomputed in-process when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
    #[serde(default = "default_verifier_timeout")]
    pub timeout_s: u64,
}

impl Default for VerificationPolicy {
    fn default() -> Self {
        Self {
            required: true,
            tolerance: DEFAULT_VERIFICATION_TOLERANCE,
            command: None,
            timeout_s: DEFAULT_VERIFIER_TIMEOUT_S,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BadgeRule {
    pub badge_id: String,
    /// Restrict the rule to one stage; applies to every stage when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_id: Option<StageId>,
    pub trigger: BadgeTrigger,
}

impl BadgeRule {
    pub fn applies_to(&self, stage: &StageId) -> bool {
        self.stage_id.as_ref().map_or(true, |s| s == stage)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BadgeTrigger {
    FirstSubmission,
    FirstPastBaseline,
    Custom(CustomPredicate),
}

/// Named custom predicates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "predicate", rename_all = "snake_case")]
pub enum CustomPredicate {
    /// Awarded once per team reaching the given number of submissions.
    SubmissionCount { at_least: u32 },
    /// Never fires automatically; granted by an organizer.
    Manual,
}

fn default_true() -> bool {
    true
}
fn default_tolerance() -> f64 {
    DEFAULT_VERIFICATION_TOLERANCE
}
fn default_verifier_timeout() -> u64 {
    DEFAULT_VERIFIER_TIMEOUT_S
}
fn default_extension() -> String {
    "csv".to_string()
}
fn default_max_payload() -> u64 {
    DEFAULT_MAX_PAYLOAD_BYTES
}
fn default_verification_batch() -> u32 {
    DEFAULT_VERIFICATION_BATCH
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { path: path.into(), message: message.into() }
    }
}

pub fn is_sha256_hex(s: &str) -> bool {
    s.len() == 64 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

impl CompetitionConfig {
    pub fn stage(&self, id: &StageId) -> Option<&StageConfig> {
        self.stages.iter().find(|s| &s.stage_id == id)
    }

    pub fn data_file(&self, name: &str) -> Option<&DataFile> {
        self.data_manifest.iter().find(|d| d.file == name)
    }

    /// The unique stage whose `[open, close)` interval contains `now`.
    pub fn active_stage(&self, now: Timestamp) -> Option<&StageId> {
        self.stages.iter().find(|s| s.window().contains(now)).map(|s| &s.stage_id)
    }

    /// Checks every invariant that does not need a time-zone database.
    pub fn validate_structure(&self) -> Result<(), ConfigError> {
        if self.competition_id.trim().is_empty() {
            return Err(ConfigError::new("competition_id", "must not be empty"));
        }
        if self.registration_window.open >= self.registration_window.close {
            return Err(ConfigError::new("registration_window", "open must precede close"));
        }
        if self.stages.is_empty() {
            return Err(ConfigError::new("stages", "at least one stage is required"));
        }

        let mut seen = BTreeSet::new();
        for (i, stage) in self.stages.iter().enumerate() {
            let path = format!("stages[{i}]");
            if !is_path_safe(stage.stage_id.as_str()) {
                return Err(ConfigError::new(
                    format!("{path}.stage_id"),
                    "must be 1-64 chars of [A-Za-z0-9._-]",
                ));
            }
            if !seen.insert(stage.stage_id.clone()) {
                return Err(ConfigError::new(
                    format!("{path}.stage_id"),
                    format!("duplicate stage id \"{}\"", stage.stage_id),
                ));
            }
            stage.validate(&path, self)?;
        }

        for (i, a) in self.stages.iter().enumerate() {
            for (j, b) in self.stages.iter().enumerate().skip(i + 1) {
                if a.open < b.close && b.open < a.close {
                    return Err(ConfigError::new(
                        format!("stages[{j}]"),
                        format!("stages \"{}\" and \"{}\" overlap in time", a.stage_id, b.stage_id),
                    ));
                }
            }
        }
        for (i, pair) in self.stages.windows(2).enumerate() {
            if pair[1].open < pair[0].open {
                return Err(ConfigError::new(
                    format!("stages[{}]", i + 1),
                    format!(
                        "stage \"{}\" starts before \"{}\"; stages must be ordered by start",
                        pair[1].stage_id, pair[0].stage_id
                    ),
                ));
            }
        }

        let mut files = BTreeSet::new();
        for (i, f) in self.data_manifest.iter().enumerate() {
            if !is_path_safe(&f.file) {
                return Err(ConfigError::new(
                    format!("data_manifest[{i}].file"),
                    "must be a plain file name of [A-Za-z0-9._-]",
                ));
            }
            if !files.insert(f.file.as_str()) {
                return Err(ConfigError::new(
                    format!("data_manifest[{i}].file"),
                    format!("duplicate file \"{}\"", f.file),
                ));
            }
            if !is_sha256_hex(&f.sha256) {
                return Err(ConfigError::new(
                    format!("data_manifest[{i}].sha256"),
                    "must be 64 lowercase hex characters",
                ));
            }
        }

        let mut badge_ids = BTreeSet::new();
        for (i, rule) in self.badge_rules.iter().enumerate() {
            let path = format!("badge_rules[{i}]");
            if !is_path_safe(&rule.badge_id) {
                return Err(ConfigError::new(
                    format!("{path}.badge_id"),
                    "must be 1-64 chars of [A-Za-z0-9._-]",
                ));
            }
            if !badge_ids.insert((rule.badge_id.as_str(), rule.stage_id.clone())) {
                return Err(ConfigError::new(
                    format!("{path}.badge_id"),
                    format!("duplicate badge \"{}\"", rule.badge_id),
                ));
            }
            if let Some(stage) = &rule.stage_id {
                if self.stage(stage).is_none() {
                    return Err(ConfigError::new(
                        format!("{path}.stage_id"),
                        format!("unknown stage \"{stage}\""),
                    ));
                }
            }
            if let BadgeTrigger::Custom(CustomPredicate::SubmissionCount { at_least: 0 }) =
                rule.trigger
            {
                return Err(ConfigError::new(format!("{path}.trigger.at_least"), "must be >= 1"));
            }
        }
        Ok(())
    }
}

impl StageConfig {
    fn validate(&self, path: &str, config: &CompetitionConfig) -> Result<(), ConfigError> {
        if self.open >= self.close {
            return Err(ConfigError::new(format!("{path}.close"), "close must be after open"));
        }
        if let Some(d) = self.preliminary_deadline {
            if !(self.open < d && d < self.close) {
                return Err(ConfigError::new(
                    format!("{path}.preliminary_deadline"),
                    "must lie strictly between open and close",
                ));
            }
        }
        if self.daily_submission_limit < 1 {
            return Err(ConfigError::new(format!("{path}.daily_submission_limit"), "must be >= 1"));
        }
        if self.aggregation_cadence_s < 1 {
            return Err(ConfigError::new(format!("{path}.aggregation_cadence_s"), "must be >= 1"));
        }
        if self.max_payload_bytes < 1 {
            return Err(ConfigError::new(format!("{path}.max_payload_bytes"), "must be >= 1"));
        }
        if let Some(b) = self.baseline_score {
            if !b.is_finite() {
                return Err(ConfigError::new(format!("{path}.baseline_score"), "must be finite"));
            }
        }
        if self.artifact_extension.is_empty()
            || !self.artifact_extension.bytes().all(|b| b.is_ascii_alphanumeric())
        {
            return Err(ConfigError::new(
                format!("{path}.artifact_extension"),
                "must be a non-empty alphanumeric extension",
            ));
        }
        if self.evaluator_versions.is_empty() {
            return Err(ConfigError::new(
                format!("{path}.evaluator_versions"),
                "at least one evaluator version is required",
            ));
        }
        for (i, spec) in self.evaluator_versions.iter().enumerate() {
            let epath = format!("{path}.evaluator_versions[{i}]");
            if spec.version as usize != i + 1 {
                return Err(ConfigError::new(
                    format!("{epath}.version"),
                    format!("expected version {}; versions must increase by one from 1", i + 1),
                ));
            }
            let tol = spec.verification.tolerance;
            if !(tol.is_finite() && tol >= 0.0) {
                return Err(ConfigError::new(
                    format!("{epath}.verification.tolerance"),
                    "must be finite and non-negative",
                ));
            }
            if spec.verification.command.as_ref().is_some_and(|c| c.is_empty() || c[0].is_empty()) {
                return Err(ConfigError::new(
                    format!("{epath}.verification.command"),
                    "must name a program",
                ));
            }
            if spec.verification.timeout_s == 0 {
                return Err(ConfigError::new(format!("{epath}.verification.timeout_s"), "must be >= 1"));
            }
            match (&spec.metric, self.kind) {
                (MetricSpec::MapAtK(p), StageKind::RankingTask) => {
                    if p.k < 1 {
                        return Err(ConfigError::new(format!("{epath}.parameters.k"), "must be >= 1"));
                    }
                }
                (MetricSpec::InstanceLog(p), StageKind::InstanceTask) => {
                    if p.instances.is_empty() {
                        return Err(ConfigError::new(
                            format!("{epath}.parameters.instances"),
                            "must name at least one instance",
                        ));
                    }
                    if let Some(b) = &p.benchmark {
                        if config.data_file(b).is_none() {
                            return Err(ConfigError::new(
                                format!("{epath}.parameters.benchmark"),
                                format!("\"{b}\" is not in data_manifest"),
                            ));
                        }
                    }
                }
                _ => {
                    return Err(ConfigError::new(
                        format!("{epath}.metric"),
                        "metric does not match stage kind",
                    ))
                }
            }
        }
        if self.kind == StageKind::RankingTask && self.ground_truth.is_none() {
            return Err(ConfigError::new(
                format!("{path}.ground_truth"),
                "ranking tasks need a ground-truth file",
            ));
        }
        Ok(())
    }
}

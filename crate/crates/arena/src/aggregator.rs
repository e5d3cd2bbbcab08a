//! The periodic cycle: scan, evaluate, verify, rank, publish.
//!
//! Canonical state lives in `<data>/aggregator/state.json`, rewritten
//! atomically at the end of each mutation. Snapshots are written before the
//! state that references them, so a crash loses at most the cycle in flight.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use arena_core::badges::{award_badges, BadgeAward};
use arena_core::config::{BadgeTrigger, CustomPredicate};
use arena_core::ids::is_path_safe;
use arena_core::instance::{best_known, InstanceLog};
use arena_core::leaderboard::{compute_leaderboard, Entry, LeaderboardSnapshot, TeamView};
use arena_core::ranking::GroundTruth;
use arena_core::verify::{judge, Claim};
use arena_core::{MetricSpec, ScoreRecord, StageConfig, StageId, SubmissionId, TeamId, Timestamp, Verification};
use serde::{Deserialize, Serialize};

use crate::audit::AuditLog;
use crate::config::SharedCompetition;
use crate::evaluation::{evaluate, rescore_instance, EvalContext};
use crate::formats::parse_ground_truth;
use crate::fsutil::{atomic_write, write_once};
use crate::ingestion::{Ingestion, Submission};
use crate::registry::{Registry, TeamStatus};
use crate::snapshots::{PublicBadge, Published, ReadModel, SnapshotStore, StageBoard, SubmissionStatus};
use crate::verification::{read_results, Job, VerificationResult};

#[derive(Debug, thiserror::Error)]
pub enum AggregatorError {
    #[error("unknown stage \"{0}\"")]
    UnknownStage(StageId),
    #[error("stage \"{0}\" has no live snapshot yet")]
    NoLiveSnapshot(StageId),
    #[error("freeze label \"{0}\" is already used")]
    LabelTaken(String),
    #[error("freeze label \"{0}\" must be 1-64 characters from [A-Za-z0-9._-]")]
    BadLabel(String),
    #[error("stage is at evaluator version {current}; the next version must be {}", current + 1)]
    VersionNotSuccessor { current: u32, requested: u32 },
    #[error("evaluator version {0} is not configured for this stage")]
    UnknownVersion(u32),
    #[error("no badge \"{0}\" applies to this stage")]
    UnknownBadge(String),
    #[error("badge \"{0}\" is awarded automatically")]
    BadgeNotManual(String),
    #[error("no team uses display name \"{0}\" in this stage")]
    UnknownDisplayName(String),
    #[error("badge \"{0}\" was already awarded to this team")]
    BadgeAlreadyAwarded(String),
    #[error("aggregator storage: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct StageState {
    current_version: u32,
    /// Score records per evaluator version.
    records: BTreeMap<u32, BTreeMap<SubmissionId, ScoreRecord>>,
    live_snapshot: Option<u64>,
    frozen: BTreeMap<String, u64>,
    badges: Vec<BadgeAward>,
    preliminary_enforced: bool,
}

impl StageState {
    fn current(&self) -> &BTreeMap<SubmissionId, ScoreRecord> {
        static EMPTY: BTreeMap<SubmissionId, ScoreRecord> = BTreeMap::new();
        self.records.get(&self.current_version).unwrap_or(&EMPTY)
    }

    fn current_mut(&mut self) -> &mut BTreeMap<SubmissionId, ScoreRecord> {
        self.records.entry(self.current_version).or_default()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct State {
    stages: BTreeMap<StageId, StageState>,
    /// Byte offset into the verification result queue.
    verification_offset: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CycleReport {
    pub scanned: u32,
    pub evaluated: u32,
    pub verified: u32,
    pub invalidated: u32,
    pub marked_inactive: u32,
    pub badges_awarded: u32,
    pub published: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FrozenInfo {
    pub label: String,
    pub snapshot_id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TwistOutcome {
    pub stage_id: StageId,
    pub from_version: u32,
    pub to_version: u32,
    pub frozen: Option<FrozenInfo>,
    pub reevaluated: u32,
    pub format_errors: u32,
}

pub struct Aggregator {
    competition: SharedCompetition,
    data_dir: PathBuf,
    scan_root: PathBuf,
    ingestion: Arc<Ingestion>,
    registry: Arc<RwLock<Registry>>,
    audit: Arc<AuditLog>,
    read: Arc<ReadModel>,
    snapshots: SnapshotStore,
    state: State,
    logs: BTreeMap<SubmissionId, InstanceLog>,
    truths: BTreeMap<StageId, Arc<GroundTruth>>,
    written_csv: BTreeMap<PathBuf, u64>,
}

impl Aggregator {
    #[allow(clippy::too_many_arguments)]
    pub fn open(
        competition: SharedCompetition,
        data_dir: &Path,
        scan_root: &Path,
        ingestion: Arc<Ingestion>,
        registry: Arc<RwLock<Registry>>,
        audit: Arc<AuditLog>,
        read: Arc<ReadModel>,
    ) -> Result<Self, AggregatorError> {
        fs::create_dir_all(data_dir.join("aggregator"))?;
        let mut state: State = match fs::read(data_dir.join("aggregator/state.json")) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(std::io::Error::other)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => State::default(),
            Err(e) => return Err(e.into()),
        };
        for stage in &competition.config.stages {
            let st = state.stages.entry(stage.stage_id.clone()).or_default();
            st.current_version = st.current_version.max(1);
        }
        let snapshots = SnapshotStore::open(&data_dir.join("snapshots"))?;
        let mut agg = Self {
            competition,
            data_dir: data_dir.to_path_buf(),
            scan_root: scan_root.to_path_buf(),
            ingestion,
            registry,
            audit,
            read,
            snapshots,
            state,
            logs: BTreeMap::new(),
            truths: BTreeMap::new(),
            written_csv: BTreeMap::new(),
        };
        let stage_ids: Vec<StageId> = agg.stage_ids();
        for id in &stage_ids {
            agg.refresh_read_model(id)?;
        }
        Ok(agg)
    }

    fn stage_ids(&self) -> Vec<StageId> {
        self.competition.config.stages.iter().map(|s| s.stage_id.clone()).collect()
    }

    fn stage_config(&self, id: &StageId) -> Result<StageConfig, AggregatorError> {
        self.competition.config.stage(id).cloned().ok_or_else(|| AggregatorError::UnknownStage(id.clone()))
    }

    pub fn current_version(&self, stage: &StageId) -> Option<u32> {
        self.state.stages.get(stage).map(|s| s.current_version)
    }

    fn registry(&self) -> std::sync::RwLockReadGuard<'_, Registry> {
        self.registry.read().unwrap_or_else(|p| p.into_inner())
    }

    fn persist(&self) -> std::io::Result<()> {
        let bytes = serde_json::to_vec_pretty(&self.state).expect("serializes");
        atomic_write(&self.data_dir.join("aggregator/state.json"), &bytes)
    }

    fn ground_truth_path(&self, stage: &StageConfig) -> Option<PathBuf> {
        stage.ground_truth.as_ref().map(|p| self.data_dir.join(p))
    }

    fn truth(&mut self, stage: &StageConfig) -> Result<Arc<GroundTruth>, String> {
        if let Some(gt) = self.truths.get(&stage.stage_id) {
            return Ok(gt.clone());
        }
        let path = self.ground_truth_path(stage).ok_or("no ground truth configured")?;
        let bytes = fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let gt = Arc::new(parse_ground_truth(&bytes).map_err(|e| format!("{}: {e}", path.display()))?);
        self.truths.insert(stage.stage_id.clone(), gt.clone());
        Ok(gt)
    }

    /// Parsed log of a submission, loaded from its payload on first use.
    fn log(&mut self, sub: &Submission) -> Option<&InstanceLog> {
        if !self.logs.contains_key(&sub.submission_id) {
            let bytes = self.ingestion.read_payload(sub).ok()?;
            let log = crate::formats::parse_instance_log(&bytes).ok()?;
            self.logs.insert(sub.submission_id, log);
        }
        self.logs.get(&sub.submission_id)
    }

    /// One full cycle at `now`.
    pub fn run_cycle(&mut self, now: Timestamp) -> Result<CycleReport, AggregatorError> {
        let mut report = CycleReport::default();
        let scanned = {
            let registry = self.registry.clone();
            self.ingestion.scan_source(&self.scan_root, now, |stage, token| {
                let reg = registry.read().unwrap_or_else(|p| p.into_inner());
                reg.team_by_token(stage, token).filter(|t| t.is_active()).map(|t| t.team_id.clone())
            })
        };
        report.scanned = scanned.len() as u32;

        let stages = self.competition.config.stages.clone();
        for stage in &stages {
            if stage.open <= now {
                report.evaluated += self.evaluate_pending(stage, now);
            }
        }
        self.consume_verification(&mut report)?;

        let mut publish = Vec::new();
        for stage in &stages {
            if stage.open > now {
                continue;
            }
            self.rescore(stage);
            report.marked_inactive += self.enforce_preliminary_deadline(stage, now)?;
            report.badges_awarded += self.award(stage, now);
            if let Some(snapshot) = self.maybe_snapshot(stage, now) {
                publish.push(self.snapshots.write(snapshot)?);
            }
        }
        for p in &publish {
            let st = self.state.stages.get_mut(&p.snapshot.stage_id).expect("known stage");
            st.live_snapshot = Some(p.snapshot.snapshot_id);
            report.published.push(p.snapshot.snapshot_id);
        }
        self.persist()?;
        for stage in &stages {
            self.refresh_read_model(&stage.stage_id)?;
        }
        self.write_active_csv(now)?;
        Ok(report)
    }

    fn evaluate_pending(&mut self, stage: &StageConfig, now: Timestamp) -> u32 {
        let version = self.state.stages[&stage.stage_id].current_version;
        let spec = stage.evaluator(version).expect("validated version").clone();
        let pending: Vec<Submission> = self
            .ingestion
            .submissions(&stage.stage_id)
            .into_iter()
            .filter(|s| !self.state.stages[&stage.stage_id].current().contains_key(&s.submission_id))
            .collect();
        if pending.is_empty() {
            return 0;
        }
        let truth = match &spec.metric {
            MetricSpec::MapAtK(_) => match self.truth(stage) {
                Ok(gt) => Some(gt),
                Err(e) => {
                    tracing::error!(stage = %stage.stage_id, error = %e, "ground truth unavailable; evaluation deferred");
                    return 0;
                }
            },
            MetricSpec::InstanceLog(_) => None,
        };
        let best = BTreeMap::new();
        let mut n = 0;
        for sub in pending {
            let payload = match self.ingestion.read_payload(&sub) {
                Ok(p) => p,
                Err(e) => {
                    tracing::error!(submission = %sub.submission_id, error = %e, "payload unreadable");
                    continue;
                }
            };
            let ctx = EvalContext { ground_truth: truth.as_deref(), best_known: &best };
            let Ok(mut ev) = evaluate(sub.submission_id, &payload, &spec, ctx, now) else { continue };
            ev.record.aux.duplicate = sub.duplicate;
            if let Some(log) = ev.log {
                self.logs.insert(sub.submission_id, log);
            }
            let st = self.state.stages.get_mut(&stage.stage_id).expect("known stage");
            st.current_mut().insert(sub.submission_id, ev.record);
            n += 1;
        }
        n
    }

    /// Instance stages: recompute best known objectives over every
    /// non-invalidated log and rescore all records against them.
    fn rescore(&mut self, stage: &StageConfig) {
        let version = self.state.stages[&stage.stage_id].current_version;
        let Some(MetricSpec::InstanceLog(params)) = stage.evaluator(version).map(|s| s.metric.clone()) else {
            return;
        };
        let subs = self.ingestion.submissions(&stage.stage_id);
        let scored: Vec<(Submission, Verification)> = subs
            .into_iter()
            .filter_map(|s| {
                let r = self.state.stages[&stage.stage_id].current().get(&s.submission_id)?;
                (!r.is_format_error()).then_some((s, r.verification))
            })
            .collect();
        for (s, _) in &scored {
            self.log(s);
        }
        let contributing = scored
            .iter()
            .filter(|(_, v)| *v != Verification::Invalidated)
            .filter_map(|(s, _)| self.logs.get(&s.submission_id));
        let best = best_known(contributing, &params.instances);
        let st = self.state.stages.get_mut(&stage.stage_id).expect("known stage");
        let records = st.current_mut();
        for (s, _) in &scored {
            let (Some(log), Some(record)) = (self.logs.get(&s.submission_id), records.get_mut(&s.submission_id))
            else {
                continue;
            };
            if let Err(e) = rescore_instance(record, log, &params.instances, &best) {
                tracing::error!(submission = %s.submission_id, error = %e, "rescoring failed");
            }
        }
    }

    fn consume_verification(&mut self, report: &mut CycleReport) -> Result<(), AggregatorError> {
        let path = self.data_dir.join("verification/results.jsonl");
        let results = read_results(&path, self.state.verification_offset)?;
        let mut taken: BTreeMap<StageId, u32> = BTreeMap::new();
        for (end, result) in results {
            if let Some(stage) = self.competition.config.stage(&result.stage_id) {
                let count = taken.entry(result.stage_id.clone()).or_default();
                if *count >= stage.verification_batch {
                    break;
                }
                *count += 1;
                match self.apply_verification(result) {
                    Some(Verification::Verified) => report.verified += 1,
                    Some(Verification::Invalidated) => report.invalidated += 1,
                    _ => {}
                }
            }
            self.state.verification_offset = end;
        }
        Ok(())
    }

    fn apply_verification(&mut self, result: VerificationResult) -> Option<Verification> {
        let stage = self.competition.config.stage(&result.stage_id)?.clone();
        let st = self.state.stages.get(&result.stage_id)?;
        if result.evaluator_version != st.current_version {
            return None;
        }
        let record = st.current().get(&result.submission_id)?;
        if record.verification != Verification::Pending {
            return None;
        }
        let claimed_score = record.primary_score?;
        let spec = stage.evaluator(result.evaluator_version)?;
        let recomputed = result.recomputed.into_recomputed();
        let verdict = match (&spec.metric, recomputed) {
            (_, None) => Verification::Invalidated,
            (MetricSpec::MapAtK(_), Some(r)) => judge(Claim::Score(claimed_score), &r, spec.verification.tolerance),
            (MetricSpec::InstanceLog(_), Some(r)) => {
                let sub = self.ingestion.get(result.submission_id)?;
                let log = self.log(&sub)?.clone();
                judge(Claim::InstanceLog(&log), &r, spec.verification.tolerance)
            }
        };
        let st = self.state.stages.get_mut(&result.stage_id)?;
        st.current_mut().get_mut(&result.submission_id)?.verification = verdict;
        if verdict == Verification::Invalidated {
            tracing::warn!(stage = %result.stage_id, submission = %result.submission_id, "submission invalidated");
        }
        Some(verdict)
    }

    fn enforce_preliminary_deadline(&mut self, stage: &StageConfig, now: Timestamp) -> Result<u32, AggregatorError> {
        let Some(deadline) = stage.preliminary_deadline else { return Ok(0) };
        let st = self.state.stages.get_mut(&stage.stage_id).expect("known stage");
        if now < deadline || st.preliminary_enforced {
            return Ok(0);
        }
        let marked = enforce_preliminary(&self.ingestion, &self.registry, stage, deadline, now)?;
        st.preliminary_enforced = true;
        self.audit.record(
            now,
            "system",
            "enforce_preliminary_deadline",
            serde_json::json!({ "stage_id": stage.stage_id }),
            true,
            serde_json::json!({ "marked_inactive": marked }),
        )?;
        Ok(marked.len() as u32)
    }

    fn entries<'a>(subs: &'a [Submission], records: &'a BTreeMap<SubmissionId, ScoreRecord>) -> Vec<Entry<'a>> {
        subs.iter()
            .map(|s| Entry {
                submission_id: s.submission_id,
                team_id: &s.team_id,
                received_at: s.received_at,
                record: records.get(&s.submission_id),
            })
            .collect()
    }

    fn award(&mut self, stage: &StageConfig, now: Timestamp) -> u32 {
        let subs = self.ingestion.submissions(&stage.stage_id);
        let st = self.state.stages.get_mut(&stage.stage_id).expect("known stage");
        let version = st.current_version;
        let records = st.records.get(&version).cloned().unwrap_or_default();
        let entries = Self::entries(&subs, &records);
        let new = award_badges(
            &self.competition.config.badge_rules,
            &stage.stage_id,
            stage.baseline_score,
            &entries,
            &st.badges,
            now,
        );
        let n = new.len() as u32;
        st.badges.extend(new);
        n
    }

    fn team_views(&self, stage: &StageId) -> BTreeMap<TeamId, TeamView> {
        let st = &self.state.stages[stage];
        let reg = self.registry();
        reg.teams()
            .filter_map(|t| {
                let token = t.tokens.get(stage)?;
                let mut badges: Vec<&BadgeAward> = st.badges.iter().filter(|b| b.team_id == t.team_id).collect();
                badges.sort_by(|a, b| a.awarded_at.cmp(&b.awarded_at).then_with(|| a.badge_id.cmp(&b.badge_id)));
                let mut ids: Vec<String> = Vec::new();
                for b in badges {
                    if !ids.contains(&b.badge_id) {
                        ids.push(b.badge_id.clone());
                    }
                }
                Some((
                    t.team_id.clone(),
                    TeamView { display_name: token.token.clone(), active: t.is_active(), badges: ids },
                ))
            })
            .collect()
    }

    /// The next live snapshot for `stage`, if its rows changed.
    fn maybe_snapshot(&mut self, stage: &StageConfig, now: Timestamp) -> Option<LeaderboardSnapshot> {
        let subs = self.ingestion.submissions(&stage.stage_id);
        let views = self.team_views(&stage.stage_id);
        let st = &self.state.stages[&stage.stage_id];
        let version = st.current_version;
        let entries = Self::entries(&subs, st.current());
        let rows = compute_leaderboard(&entries, version, &views, stage.leaderboard_mode);
        let live = self.read.stage(&stage.stage_id).and_then(|b| b.live.clone());
        let unchanged = live.is_some_and(|l| l.snapshot.evaluator_version == version && l.snapshot.rows == rows);
        if unchanged {
            return None;
        }
        Some(LeaderboardSnapshot {
            snapshot_id: self.snapshots.allocate(),
            created_at: now,
            stage_id: stage.stage_id.clone(),
            evaluator_version: version,
            rows,
            frozen: false,
            freeze_label: None,
        })
    }

    /// Rebuilds the published view of one stage from canonical state and
    /// writes its public CSV if it changed.
    fn refresh_read_model(&mut self, stage_id: &StageId) -> Result<(), AggregatorError> {
        let stage = self.stage_config(stage_id)?;
        let st = &self.state.stages[stage_id];
        let current_version = st.current_version;
        let previous = self.read.stage(stage_id);
        let load = |id: u64| -> std::io::Result<Arc<Published>> {
            let cached = previous.as_ref().and_then(|b| {
                b.live
                    .iter()
                    .chain(b.frozen.values())
                    .find(|p| p.snapshot.snapshot_id == id)
                    .cloned()
            });
            match cached {
                Some(p) => Ok(p),
                None => self.snapshots.load(id),
            }
        };
        let live = st.live_snapshot.map(load).transpose()?;
        let mut frozen = BTreeMap::new();
        for (label, id) in &st.frozen {
            let p = load(*id)?;
            write_once(&self.data_dir.join("public/frozen").join(format!("{label}.csv")), &p.csv)?;
            frozen.insert(label.clone(), p);
        }
        let reg = self.registry();
        let mut badges: Vec<PublicBadge> = st
            .badges
            .iter()
            .filter_map(|b| {
                let name = reg.team(&b.team_id)?.tokens.get(stage_id)?.token.clone();
                Some(PublicBadge { badge_id: b.badge_id.clone(), display_name: name, awarded_at: b.awarded_at })
            })
            .collect();
        drop(reg);
        badges.sort_by(|a, b| a.awarded_at.cmp(&b.awarded_at).then_with(|| a.badge_id.cmp(&b.badge_id)));
        let spec = stage.evaluator(st.current_version).expect("validated version");
        let verification_pending = if spec.verification.required {
            st.current()
                .values()
                .filter(|r| r.verification == Verification::Pending && !r.is_format_error())
                .count() as u32
        } else {
            0
        };

        let statuses: Vec<SubmissionStatus> = self
            .ingestion
            .submissions(stage_id)
            .into_iter()
            .map(|s| {
                let r = st.current().get(&s.submission_id);
                SubmissionStatus {
                    submission_id: s.submission_id,
                    stage_id: s.stage_id.clone(),
                    received_at: s.received_at,
                    evaluated: r.is_some(),
                    evaluator_version: r.map(|r| r.evaluator_version),
                    format_error: r.and_then(|r| r.aux.error.clone()),
                    verification: r.filter(|r| !r.is_format_error()).map(|r| r.verification),
                    duplicate: s.duplicate,
                }
            })
            .collect();
        self.read.set_statuses(statuses);

        if let Some(p) = &live {
            let path = self.data_dir.join("public").join(stage_id.as_str()).join("leaderboard.csv");
            self.write_csv(path, p)?;
        }
        self.read.set_stage(stage_id.clone(), StageBoard { current_version, live, frozen, badges, verification_pending });
        Ok(())
    }

    fn write_csv(&mut self, path: PathBuf, p: &Published) -> std::io::Result<()> {
        if self.written_csv.get(&path) == Some(&p.snapshot.snapshot_id) {
            return Ok(());
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        atomic_write(&path, &p.csv)?;
        self.written_csv.insert(path, p.snapshot.snapshot_id);
        Ok(())
    }

    /// `public/leaderboard.csv` mirrors the stage that is open now, or the
    /// most recently opened one between stages.
    fn write_active_csv(&mut self, now: Timestamp) -> std::io::Result<()> {
        let config = &self.competition.config;
        let stage = config
            .active_stage(now)
            .cloned()
            .or_else(|| config.stages.iter().rev().find(|s| s.open <= now).map(|s| s.stage_id.clone()));
        let Some(live) = stage.and_then(|s| self.read.stage(&s)).and_then(|b| b.live.clone()) else {
            return Ok(());
        };
        self.write_csv(self.data_dir.join("public/leaderboard.csv"), &live)
    }

    /// Duplicates the live snapshot of `stage` under `label`.
    pub fn freeze(&mut self, stage_id: &StageId, label: &str) -> Result<FrozenInfo, AggregatorError> {
        self.stage_config(stage_id)?;
        if !is_path_safe(label) {
            return Err(AggregatorError::BadLabel(label.to_string()));
        }
        if self.state.stages.values().any(|s| s.frozen.contains_key(label)) {
            return Err(AggregatorError::LabelTaken(label.to_string()));
        }
        let live = self
            .read
            .stage(stage_id)
            .and_then(|b| b.live.clone())
            .ok_or_else(|| AggregatorError::NoLiveSnapshot(stage_id.clone()))?;
        let mut snapshot = live.snapshot.clone();
        snapshot.snapshot_id = self.snapshots.allocate();
        snapshot.frozen = true;
        snapshot.freeze_label = Some(label.to_string());
        let p = self.snapshots.write(snapshot)?;
        let info = FrozenInfo { label: label.to_string(), snapshot_id: p.snapshot.snapshot_id };
        let st = self.state.stages.get_mut(stage_id).expect("known stage");
        st.frozen.insert(label.to_string(), info.snapshot_id);
        self.persist()?;
        self.refresh_read_model(stage_id)?;
        Ok(info)
    }

    /// Moves `stage` to evaluator `version`, freezing the live board first
    /// and re-evaluating every stored payload under the new spec.
    pub fn apply_twist(
        &mut self,
        stage_id: &StageId,
        version: u32,
        label: Option<&str>,
        now: Timestamp,
    ) -> Result<TwistOutcome, AggregatorError> {
        let stage = self.stage_config(stage_id)?;
        let current = self.state.stages[stage_id].current_version;
        if version != current + 1 {
            return Err(AggregatorError::VersionNotSuccessor { current, requested: version });
        }
        if stage.evaluator(version).is_none() {
            return Err(AggregatorError::UnknownVersion(version));
        }
        let has_live = self.read.stage(stage_id).is_some_and(|b| b.live.is_some());
        let frozen = if has_live {
            let default = format!("{stage_id}-v{current}");
            Some(self.freeze(stage_id, label.unwrap_or(&default))?)
        } else {
            None
        };
        let st = self.state.stages.get_mut(stage_id).expect("known stage");
        st.current_version = version;
        st.records.entry(version).or_default().clear();
        let reevaluated = self.evaluate_pending(&stage, now);
        self.rescore(&stage);
        let format_errors =
            self.state.stages[stage_id].current().values().filter(|r| r.is_format_error()).count() as u32;
        self.persist()?;
        self.refresh_read_model(stage_id)?;
        Ok(TwistOutcome {
            stage_id: stage_id.clone(),
            from_version: current,
            to_version: version,
            frozen,
            reevaluated,
            format_errors,
        })
    }

    /// Organizer award of a manual badge to the team shown as `display_name`.
    pub fn grant_badge(
        &mut self,
        stage_id: &StageId,
        badge_id: &str,
        display_name: &str,
        now: Timestamp,
    ) -> Result<PublicBadge, AggregatorError> {
        self.stage_config(stage_id)?;
        let rule = self
            .competition
            .config
            .badge_rules
            .iter()
            .find(|r| r.badge_id == badge_id && r.applies_to(stage_id))
            .ok_or_else(|| AggregatorError::UnknownBadge(badge_id.to_string()))?;
        if rule.trigger != BadgeTrigger::Custom(CustomPredicate::Manual) {
            return Err(AggregatorError::BadgeNotManual(badge_id.to_string()));
        }
        let team = self
            .registry()
            .team_by_token(stage_id, display_name)
            .map(|t| (t.team_id.clone(), t.tokens[stage_id].token.clone()))
            .ok_or_else(|| AggregatorError::UnknownDisplayName(display_name.to_string()))?;
        let st = self.state.stages.get_mut(stage_id).expect("known stage");
        if st.badges.iter().any(|b| b.badge_id == badge_id && b.team_id == team.0) {
            return Err(AggregatorError::BadgeAlreadyAwarded(badge_id.to_string()));
        }
        st.badges.push(BadgeAward {
            badge_id: badge_id.to_string(),
            stage_id: stage_id.clone(),
            team_id: team.0,
            awarded_at: now,
            submission_id: None,
        });
        self.persist()?;
        self.refresh_read_model(stage_id)?;
        Ok(PublicBadge { badge_id: badge_id.to_string(), display_name: team.1, awarded_at: now })
    }

    /// Pending verifications of the current version, optionally for one stage.
    pub fn verification_jobs(&self, only: Option<&StageId>) -> Vec<Job> {
        let mut jobs = Vec::new();
        for stage in &self.competition.config.stages {
            if only.is_some_and(|s| s != &stage.stage_id) {
                continue;
            }
            let st = &self.state.stages[&stage.stage_id];
            let spec = stage.evaluator(st.current_version).expect("validated version");
            if !spec.verification.required {
                continue;
            }
            for (id, r) in st.current() {
                if r.verification != Verification::Pending || r.is_format_error() {
                    continue;
                }
                let Some(sub) = self.ingestion.get(*id) else { continue };
                jobs.push(Job {
                    stage_id: stage.stage_id.clone(),
                    submission_id: *id,
                    spec: spec.clone(),
                    payload_path: self.ingestion.payload_path(&sub),
                    ground_truth_path: self.ground_truth_path(stage),
                });
            }
        }
        jobs
    }

    /// Every record of every version, every snapshot and badge of a stage.
    pub fn export(&self, stage_id: &StageId) -> Result<serde_json::Value, AggregatorError> {
        let stage = self.stage_config(stage_id)?;
        let st = &self.state.stages[stage_id];
        let mut snapshot_ids: BTreeSet<u64> = st.frozen.values().copied().collect();
        let dir = self.data_dir.join("snapshots");
        for entry in fs::read_dir(&dir)? {
            let name = entry?.file_name();
            let Some(id) = name.to_str().and_then(|n| n.strip_suffix(".json")).and_then(|n| n.parse().ok()) else {
                continue;
            };
            snapshot_ids.insert(id);
        }
        let mut snapshots = Vec::new();
        for id in snapshot_ids {
            let p = self.snapshots.load(id)?;
            if &p.snapshot.stage_id == stage_id {
                snapshots.push(p.snapshot.clone());
            }
        }
        Ok(serde_json::json!({
            "stage": stage,
            "current_version": st.current_version,
            "submissions": self.ingestion.submissions(stage_id),
            "records": st.records,
            "badges": st.badges,
            "live_snapshot": st.live_snapshot,
            "frozen": st.frozen,
            "snapshots": snapshots,
            "preliminary_enforced": st.preliminary_enforced,
        }))
    }
}

/// Marks every active team without a submission to `stage` before
/// `deadline` as having missed the preliminary deadline.
fn enforce_preliminary(
    ingestion: &Ingestion,
    registry: &RwLock<Registry>,
    stage: &StageConfig,
    deadline: Timestamp,
    now: Timestamp,
) -> Result<Vec<TeamId>, AggregatorError> {
    let submitted = ingestion.teams_submitted_before(&stage.stage_id, deadline);
    let mut reg = registry.write().unwrap_or_else(|p| p.into_inner());
    let targets: Vec<TeamId> = reg
        .teams()
        .filter(|t| t.is_active() && !submitted.contains(&t.team_id))
        .map(|t| t.team_id.clone())
        .collect();
    for team in &targets {
        reg.mark_inactive(team, TeamStatus::InactiveMissedPreliminary, now)
            .map_err(|e| std::io::Error::other(e.to_string()))?;
    }
    Ok(targets)
}

//! One running competition: the components wired together behind the
//! operations the HTTP server and tests call.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use arena_core::config::Visibility;
use arena_core::{StageId, SubmissionId, TeamId, Timestamp};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::aggregator::{Aggregator, AggregatorError, CycleReport};
use crate::audit::{AuditEntry, AuditLog};
use crate::clock::Clock;
use crate::config::SharedCompetition;
use crate::evaluation::parse_payload;
use crate::fsutil::sha256_hex;
use crate::ingestion::{IngestError, Ingestion, Quota, Source};
use crate::registry::{Contact, Registry, RegistryError};
use crate::snapshots::{PublicBadge, Published, ReadModel, SubmissionStatus};
use crate::verification::{PassReport, Verifier, VerificationWorker};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    BadRequest,
    Unauthorized,
    Forbidden,
    NotFound,
    Conflict,
    PayloadTooLarge,
    Unprocessable,
    QuotaExceeded,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message}")]
pub struct ArenaError {
    pub kind: ErrorKind,
    pub message: String,
    /// Set for quota errors.
    pub reset_at: Option<Timestamp>,
}

impl ArenaError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self { kind, message: message.into(), reset_at: None }
    }
}

impl From<RegistryError> for ArenaError {
    fn from(e: RegistryError) -> Self {
        use RegistryError::*;
        let kind = match &e {
            RegistrationClosed | TokenCollision(_) | MemberInOtherTeam(_) => ErrorKind::Conflict,
            UnknownCredential => ErrorKind::Unauthorized,
            UnknownTeam | NotInStage(_) => ErrorKind::NotFound,
            Io(_) => ErrorKind::Internal,
            _ => ErrorKind::Unprocessable,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<IngestError> for ArenaError {
    fn from(e: IngestError) -> Self {
        use IngestError::*;
        let (kind, reset_at) = match &e {
            UnknownStage(_) => (ErrorKind::NotFound, None),
            StageClosed(_) | DuplicateReceipt => (ErrorKind::Conflict, None),
            QuotaExceeded { reset_at, .. } => (ErrorKind::QuotaExceeded, Some(*reset_at)),
            TooLarge { .. } => (ErrorKind::PayloadTooLarge, None),
            Io(_) => (ErrorKind::Internal, None),
        };
        Self { kind, message: e.to_string(), reset_at }
    }
}

impl From<AggregatorError> for ArenaError {
    fn from(e: AggregatorError) -> Self {
        use AggregatorError::*;
        let kind = match &e {
            UnknownStage(_) | UnknownBadge(_) | UnknownDisplayName(_) => ErrorKind::NotFound,
            NoLiveSnapshot(_) | LabelTaken(_) | BadgeAlreadyAwarded(_) => ErrorKind::Conflict,
            BadLabel(_) | VersionNotSuccessor { .. } | UnknownVersion(_) | BadgeNotManual(_) => {
                ErrorKind::Unprocessable
            }
            Io(_) => ErrorKind::Internal,
        };
        Self::new(kind, e.to_string())
    }
}

impl From<std::io::Error> for ArenaError {
    fn from(e: std::io::Error) -> Self {
        Self::new(ErrorKind::Internal, e.to_string())
    }
}

pub type Result<T, E = ArenaError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterRequest {
    pub members: Vec<Contact>,
    /// One display token per stage.
    pub tokens: BTreeMap<StageId, String>,
    #[serde(default)]
    pub accept_rules: bool,
}

/// Returned once at registration. Carries no internal team id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterResponse {
    pub credential: String,
    pub tokens: BTreeMap<StageId, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub submission_id: SubmissionId,
    pub stage_id: StageId,
    pub received_at: Timestamp,
    pub duplicate: bool,
    pub quota_remaining: u32,
    pub quota_limit: u32,
    pub status_url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoveMember {
    pub email: String,
    /// Any member of the destination team.
    pub to_email: String,
}

/// Organizer actions, addressed as `POST /api/admin/<action>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdminAction {
    Freeze {
        stage_id: StageId,
        label: String,
    },
    Twist {
        stage_id: StageId,
        version: u32,
        #[serde(default)]
        label: Option<String>,
    },
    BadgeGrant {
        stage_id: StageId,
        badge_id: String,
        display_name: String,
    },
    Reinstate {
        email: String,
    },
    RegistrationOverride {
        #[serde(default)]
        register: Option<RegisterRequest>,
        #[serde(default)]
        move_member: Option<MoveMember>,
    },
    #[serde(rename = "verify-drain", alias = "verify_drain")]
    VerifyDrain {
        stage_id: StageId,
    },
    Export {
        stage_id: StageId,
    },
    QueueStatus {},
}

impl AdminAction {
    /// Builds an action from the route segment and its JSON body.
    pub fn parse(action: &str, body: serde_json::Value) -> Result<Self> {
        let mut obj = match body {
            serde_json::Value::Object(m) => m,
            serde_json::Value::Null => serde_json::Map::new(),
            _ => return Err(ArenaError::new(ErrorKind::BadRequest, "body must be a JSON object")),
        };
        obj.insert("action".into(), serde_json::Value::String(action.into()));
        serde_json::from_value(serde_json::Value::Object(obj))
            .map_err(|e| ArenaError::new(ErrorKind::BadRequest, format!("{action}: {e}")))
    }

    fn name(&self) -> &'static str {
        match self {
            AdminAction::Freeze { .. } => "freeze",
            AdminAction::Twist { .. } => "twist",
            AdminAction::BadgeGrant { .. } => "badge_grant",
            AdminAction::Reinstate { .. } => "reinstate",
            AdminAction::RegistrationOverride { .. } => "registration_override",
            AdminAction::VerifyDrain { .. } => "verify-drain",
            AdminAction::Export { .. } => "export",
            AdminAction::QueueStatus {} => "queue_status",
        }
    }

    /// Parameters as recorded in the audit log.
    fn audit_params(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("action");
        }
        v
    }
}

pub struct ArenaOptions {
    pub data_dir: PathBuf,
    /// Root of the scanned submission source; `<data>/inbox` when unset.
    pub scan_root: Option<PathBuf>,
    pub clock: Arc<dyn Clock>,
    pub verifier: Arc<dyn Verifier>,
}

pub struct Arena {
    competition: SharedCompetition,
    data_dir: PathBuf,
    clock: Arc<dyn Clock>,
    registry: Arc<RwLock<Registry>>,
    ingestion: Arc<Ingestion>,
    aggregator: Mutex<Aggregator>,
    read: Arc<ReadModel>,
    audit: Arc<AuditLog>,
    worker: VerificationWorker,
}

impl Arena {
    pub fn open(competition: SharedCompetition, opts: ArenaOptions) -> Result<Self> {
        let data = opts.data_dir;
        fs::create_dir_all(&data)?;
        let registry = Arc::new(RwLock::new(Registry::open(&data.join("registry"), competition.clone())?));
        let ingestion = Arc::new(Ingestion::open(&data, competition.clone())?);
        let audit = Arc::new(AuditLog::open(&data.join("audit.jsonl"))?);
        let read = Arc::new(ReadModel::default());
        let scan_root = opts.scan_root.unwrap_or_else(|| data.join("inbox"));
        let aggregator = Aggregator::open(
            competition.clone(),
            &data,
            &scan_root,
            ingestion.clone(),
            registry.clone(),
            audit.clone(),
            read.clone(),
        )?;
        let worker = VerificationWorker::open(&data.join("verification"), opts.verifier)?;
        Ok(Self {
            competition,
            data_dir: data,
            clock: opts.clock,
            registry,
            ingestion,
            aggregator: Mutex::new(aggregator),
            read,
            audit,
            worker,
        })
    }

    pub fn competition(&self) -> &SharedCompetition {
        &self.competition
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    /// Checks that every manifest file exists under `<data>/files/` with the
    /// declared digest.
    pub fn check_data_files(&self) -> Result<()> {
        for f in &self.competition.config.data_manifest {
            let path = self.data_dir.join("files").join(&f.file);
            let bytes = fs::read(&path).map_err(|e| {
                ArenaError::new(ErrorKind::Internal, format!("data_manifest: {}: {e}", path.display()))
            })?;
            if sha256_hex(&bytes) != f.sha256 {
                return Err(ArenaError::new(
                    ErrorKind::Internal,
                    format!("data_manifest: {} does not match its digest", f.file),
                ));
            }
        }
        Ok(())
    }

    fn registry_read(&self) -> std::sync::RwLockReadGuard<'_, Registry> {
        self.registry.read().unwrap_or_else(|p| p.into_inner())
    }

    fn registry_write(&self) -> std::sync::RwLockWriteGuard<'_, Registry> {
        self.registry.write().unwrap_or_else(|p| p.into_inner())
    }

    fn aggregator(&self) -> std::sync::MutexGuard<'_, Aggregator> {
        self.aggregator.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn register(&self, req: RegisterRequest) -> Result<RegisterResponse> {
        self.register_at(req, false)
    }

    fn register_at(&self, req: RegisterRequest, bypass_window: bool) -> Result<RegisterResponse> {
        let now = self.now();
        let reg = self.registry_write().register_team(
            req.members,
            req.tokens.clone(),
            req.accept_rules,
            now,
            bypass_window,
        )?;
        Ok(RegisterResponse { credential: reg.credential, tokens: req.tokens })
    }

    pub fn authenticate(&self, credential: &str) -> Result<TeamId> {
        Ok(self.registry_read().authenticate(credential)?)
    }

    fn stage_exists(&self, stage: &StageId) -> Result<&arena_core::StageConfig> {
        self.competition
            .config
            .stage(stage)
            .ok_or_else(|| ArenaError::new(ErrorKind::NotFound, format!("unknown stage \"{stage}\"")))
    }

    pub fn submit(&self, team: &TeamId, stage_id: &StageId, payload: &[u8], channel: Option<String>) -> Result<Receipt> {
        let now = self.now();
        let stage = self.stage_exists(stage_id)?;
        {
            let reg = self.registry_read();
            let record = reg.team(team).ok_or_else(|| ArenaError::new(ErrorKind::Unauthorized, "unknown team"))?;
            if !record.is_active() {
                return Err(ArenaError::new(ErrorKind::Forbidden, "team is not active"));
            }
        }
        if !stage.window().contains(now) {
            return Err(IngestError::StageClosed(stage_id.clone()).into());
        }
        if payload.len() as u64 > stage.max_payload_bytes {
            return Err(IngestError::TooLarge { size: payload.len() as u64, limit: stage.max_payload_bytes }.into());
        }
        parse_payload(stage.kind, payload).map_err(|e| ArenaError::new(ErrorKind::Unprocessable, e.to_string()))?;
        let sub = self.ingestion.accept_submission(team, stage_id, payload, now, Source::Api, channel)?;
        let quota = self.ingestion.quota(team, stage_id, sub.received_at).expect("stage exists");
        Ok(Receipt {
            submission_id: sub.submission_id,
            stage_id: stage_id.clone(),
            received_at: sub.received_at,
            duplicate: sub.duplicate,
            quota_remaining: quota.remaining,
            quota_limit: quota.limit,
            status_url: format!("/api/submissions/{}/{}", stage_id, sub.submission_id),
        })
    }

    pub fn quota(&self, team: &TeamId, stage: &StageId) -> Result<Quota> {
        self.stage_exists(stage)?;
        Ok(self.ingestion.quota(team, stage, self.now()).expect("stage exists"))
    }

    /// Status of one of the team's own submissions.
    pub fn submission_status(&self, team: &TeamId, stage: &StageId, id: SubmissionId) -> Result<SubmissionStatus> {
        let not_found = || ArenaError::new(ErrorKind::NotFound, "no such submission");
        let sub = self.ingestion.get(id).filter(|s| &s.team_id == team && &s.stage_id == stage).ok_or_else(not_found)?;
        Ok(self.read.status(id).unwrap_or(SubmissionStatus {
            submission_id: id,
            stage_id: sub.stage_id,
            received_at: sub.received_at,
            evaluated: false,
            evaluator_version: None,
            format_error: None,
            verification: None,
            duplicate: sub.duplicate,
        }))
    }

    /// Live board, or the frozen board with `label`. Frozen boards of other
    /// stages are not found here.
    pub fn leaderboard(&self, stage: &StageId, frozen: Option<&str>) -> Result<Arc<Published>> {
        self.stage_exists(stage)?;
        let board = self.read.stage(stage);
        let found = match frozen {
            Some(label) => board.and_then(|b| b.frozen.get(label).cloned()),
            None => board.and_then(|b| b.live.clone()),
        };
        found.ok_or_else(|| {
            let what = frozen.map_or("no leaderboard published yet".to_string(), |l| format!("no frozen board \"{l}\""));
            ArenaError::new(ErrorKind::NotFound, what)
        })
    }

    pub fn frozen_boards_public(&self) -> bool {
        self.competition.config.frozen_boards_public
    }

    pub fn badges(&self, stage: &StageId) -> Result<Vec<PublicBadge>> {
        self.stage_exists(stage)?;
        Ok(self.read.stage(stage).map(|b| b.badges.clone()).unwrap_or_default())
    }

    /// Bytes and manifest digest of a data file. `registered` is false for
    /// anonymous callers.
    pub fn data_file(&self, name: &str, registered: bool) -> Result<(Vec<u8>, String)> {
        let entry = self
            .competition
            .config
            .data_file(name)
            .ok_or_else(|| ArenaError::new(ErrorKind::NotFound, "not found"))?;
        if entry.visibility == Visibility::Registered && !registered {
            return Err(ArenaError::new(ErrorKind::Unauthorized, "credential required"));
        }
        let bytes = fs::read(self.data_dir.join("files").join(&entry.file))
            .map_err(|_| ArenaError::new(ErrorKind::NotFound, "not found"))?;
        Ok((bytes, entry.sha256.clone()))
    }

    /// Public competition description: no ground-truth paths, no verifier
    /// commands.
    pub fn competition_info(&self) -> serde_json::Value {
        let c = &self.competition.config;
        let stages: Vec<serde_json::Value> = c
            .stages
            .iter()
            .map(|s| {
                let board = self.read.stage(&s.stage_id);
                let current = board.as_ref().map_or(1, |b| b.current_version);
                let frozen: Vec<&String> = match (&board, c.frozen_boards_public) {
                    (Some(b), true) => b.frozen.keys().collect(),
                    _ => Vec::new(),
                };
                json!({
                    "stage_id": s.stage_id,
                    "kind": s.kind,
                    "open": s.open,
                    "close": s.close,
                    "preliminary_deadline": s.preliminary_deadline,
                    "daily_submission_limit": s.daily_submission_limit,
                    "aggregation_cadence_s": s.aggregation_cadence_s,
                    "artifact_extension": s.artifact_extension,
                    "leaderboard_mode": s.leaderboard_mode,
                    "baseline_score": s.baseline_score,
                    "current_version": current,
                    "evaluator_versions": s.evaluator_versions.iter().map(|e| json!({
                        "version": e.version,
                        "metric": e.metric,
                    })).collect::<Vec<_>>(),
                    "frozen_labels": frozen,
                })
            })
            .collect();
        let manifest: Vec<serde_json::Value> = c
            .data_manifest
            .iter()
            .map(|f| json!({ "file": f.file, "sha256": f.sha256, "visibility": f.visibility }))
            .collect();
        json!({
            "competition_id": c.competition_id,
            "title": c.title,
            "official_time_zone": c.official_time_zone,
            "registration_window": c.registration_window,
            "discussion_url": c.discussion_url,
            "frozen_boards_public": c.frozen_boards_public,
            "active_stage": c.active_stage(self.now()),
            "stages": stages,
            "data_manifest": manifest,
        })
    }

    pub fn run_cycle(&self) -> Result<CycleReport> {
        let now = self.now();
        Ok(self.aggregator().run_cycle(now)?)
    }

    /// Runs due verifications (all pending ones with `force`) outside the
    /// aggregation lock. Results are applied by the next cycle.
    pub fn run_verification(&self, stage: Option<&StageId>, force: bool) -> Result<PassReport> {
        let jobs = self.aggregator().verification_jobs(stage);
        let now = self.now();
        let report = self.worker.run(&jobs, now, force)?;
        for alert in &report.alerts {
            tracing::warn!(stage = %alert.stage_id, submission = %alert.submission_id, "verification keeps failing");
            self.audit.record(
                now,
                "system",
                "verification_alert",
                json!({ "stage_id": alert.stage_id, "submission_id": alert.submission_id }),
                false,
                json!({ "failures": alert.failures, "error": alert.error }),
            )?;
        }
        Ok(report)
    }

    pub fn audit_entries(&self) -> Result<Vec<AuditEntry>> {
        Ok(self.audit.entries()?)
    }

    /// Executes an organizer action and records it in the audit log, whether
    /// it succeeds or not.
    pub fn admin(&self, action: AdminAction, actor: &str) -> Result<serde_json::Value> {
        let now = self.now();
        let result = self.admin_inner(&action, now);
        let (ok, detail) = match &result {
            Ok(v) => (true, redact(&action, v)),
            Err(e) => (false, json!({ "error": e.message })),
        };
        self.audit.record(now, actor, action.name(), action.audit_params(), ok, detail)?;
        result
    }

    fn admin_inner(&self, action: &AdminAction, now: Timestamp) -> Result<serde_json::Value> {
        match action {
            AdminAction::Freeze { stage_id, label } => {
                let info = self.aggregator().freeze(stage_id, label)?;
                Ok(json!({ "stage_id": stage_id, "frozen": info }))
            }
            AdminAction::Twist { stage_id, version, label } => {
                let out = self.aggregator().apply_twist(stage_id, *version, label.as_deref(), now)?;
                Ok(serde_json::to_value(out).expect("serializes"))
            }
            AdminAction::BadgeGrant { stage_id, badge_id, display_name } => {
                let badge = self.aggregator().grant_badge(stage_id, badge_id, display_name, now)?;
                Ok(serde_json::to_value(badge).expect("serializes"))
            }
            AdminAction::Reinstate { email } => {
                let mut reg = self.registry_write();
                let team = reg
                    .team_of_email(email)
                    .map(|t| t.team_id.clone())
                    .ok_or_else(|| ArenaError::new(ErrorKind::NotFound, format!("no team has member {email}")))?;
                let record = reg.reinstate(&team, now)?;
                Ok(json!({ "team_id": record.team_id, "status": record.status }))
            }
            AdminAction::RegistrationOverride { register, move_member } => match (register, move_member) {
                (Some(req), None) => {
                    let resp = self.register_at(req.clone(), true)?;
                    Ok(serde_json::to_value(resp).expect("serializes"))
                }
                (None, Some(m)) => {
                    let mut reg = self.registry_write();
                    let record = reg.move_member(&m.email, &m.to_email, now)?;
                    Ok(json!({ "team_id": record.team_id, "members": record.member_contacts.len() }))
                }
                _ => Err(ArenaError::new(
                    ErrorKind::BadRequest,
                    "registration_override takes exactly one of \"register\" or \"move_member\"",
                )),
            },
            AdminAction::VerifyDrain { stage_id } => {
                self.stage_exists(stage_id)?;
                let pass = self.run_verification(Some(stage_id), true)?;
                let cycle = self.run_cycle()?;
                Ok(json!({ "verification": pass, "cycle": cycle }))
            }
            AdminAction::Export { stage_id } => {
                let mut bundle = self.aggregator().export(stage_id)?;
                let teams: Vec<serde_json::Value> = self
                    .registry_read()
                    .teams()
                    .map(|t| {
                        json!({
                            "team_id": t.team_id,
                            "members": t.member_contacts,
                            "token": t.tokens.get(stage_id).map(|k| &k.token),
                            "status": t.status,
                            "rules_accepted_at": t.rules_accepted_at,
                        })
                    })
                    .collect();
                bundle["teams"] = json!(teams);
                bundle["audit"] = serde_json::to_value(self.audit.entries()?).expect("serializes");
                Ok(bundle)
            }
            AdminAction::QueueStatus {} => {
                let stages: Vec<serde_json::Value> = self
                    .competition
                    .config
                    .stages
                    .iter()
                    .map(|s| {
                        let board = self.read.stage(&s.stage_id);
                        json!({
                            "stage_id": s.stage_id,
                            "current_version": board.as_ref().map_or(1, |b| b.current_version),
                            "verification_pending": board.as_ref().map_or(0, |b| b.verification_pending),
                            "live_snapshot": board.as_ref().and_then(|b| b.live.as_ref()).map(|p| p.snapshot.snapshot_id),
                            "frozen": board.as_ref().map(|b| b.frozen.keys().cloned().collect::<Vec<_>>()).unwrap_or_default(),
                        })
                    })
                    .collect();
                Ok(json!({ "stages": stages }))
            }
        }
    }
}

/// Audit detail without secrets: a registration override logs the tokens
/// but never the credential.
fn redact(action: &AdminAction, result: &serde_json::Value) -> serde_json::Value {
    match action {
        AdminAction::RegistrationOverride { register: Some(_), .. } => json!({ "tokens": result["tokens"] }),
        AdminAction::Export { stage_id } => json!({ "stage_id": stage_id }),
        _ => result.clone(),
    }
}

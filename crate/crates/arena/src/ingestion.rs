//! Submission intake from the HTTP end-point and from a scanned directory.
//!
//! Storage layout under `<data>/submissions/<stage>/<team>/<id>/`: an
//! immutable `payload` and a `meta.json` sidecar. A submission exists once
//! its sidecar exists.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::SystemTime;

use arena_core::{StageId, SubmissionId, TeamId, Timestamp};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::config::SharedCompetition;
use crate::fsutil::{atomic_write, sha256_hex};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    Api,
    Scan { path: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Submission {
    pub submission_id: SubmissionId,
    pub team_id: TeamId,
    pub stage_id: StageId,
    pub received_at: Timestamp,
    pub payload_digest: String,
    pub payload_bytes: u64,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channel: Option<String>,
    /// The team already submitted identical bytes to this stage.
    #[serde(default)]
    pub duplicate: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("unknown stage \"{0}\"")]
    UnknownStage(StageId),
    #[error("stage \"{0}\" is not open for submissions")]
    StageClosed(StageId),
    #[error("daily limit of {limit} reached; quota resets at {reset_local}")]
    QuotaExceeded { limit: u32, reset_at: Timestamp, reset_local: String },
    #[error("payload of {size} bytes exceeds the {limit} byte cap")]
    TooLarge { size: u64, limit: u64 },
    #[error("identical submission already recorded")]
    DuplicateReceipt,
    #[error("submission storage: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Quota {
    pub used: u32,
    pub limit: u32,
    pub remaining: u32,
    pub resets_at: Timestamp,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ScanState {
    /// (relative path, digest) of every artifact already taken.
    seen: BTreeSet<(String, String)>,
}

#[derive(Debug, Default)]
struct State {
    submissions: BTreeMap<SubmissionId, Submission>,
    next_id: u64,
    last_received: Option<Timestamp>,
    daily: HashMap<(TeamId, StageId, NaiveDate), u32>,
    scan: ScanState,
}

#[derive(Debug)]
pub struct Ingestion {
    competition: SharedCompetition,
    root: PathBuf,
    state: Mutex<State>,
}

impl Ingestion {
    /// Opens `<data>/submissions` and `<data>/ingestion`, rebuilding the index
    /// from the sidecars on disk.
    pub fn open(data_dir: &Path, competition: SharedCompetition) -> Result<Self, IngestError> {
        let root = data_dir.to_path_buf();
        fs::create_dir_all(root.join("submissions"))?;
        fs::create_dir_all(root.join("ingestion"))?;
        let mut state = State { next_id: 1, ..State::default() };
        for meta in find_sidecars(&root.join("submissions"))? {
            let bytes = fs::read(&meta)?;
            let sub: Submission = serde_json::from_slice(&bytes).map_err(std::io::Error::other)?;
            state.next_id = state.next_id.max(sub.submission_id.0 + 1);
            state.last_received = state.last_received.max(Some(sub.received_at));
            let day = competition.local_day(sub.received_at);
            *state.daily.entry((sub.team_id.clone(), sub.stage_id.clone(), day)).or_default() += 1;
            state.submissions.insert(sub.submission_id, sub);
        }
        match fs::read(root.join("ingestion/scan.json")) {
            Ok(bytes) => state.scan = serde_json::from_slice(&bytes).map_err(std::io::Error::other)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(e.into()),
        }
        Ok(Self { competition, root, state: Mutex::new(state) })
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn submission_dir(&self, sub: &Submission) -> PathBuf {
        self.root
            .join("submissions")
            .join(sub.stage_id.as_str())
            .join(sub.team_id.as_str())
            .join(sub.submission_id.0.to_string())
    }

    pub fn payload_path(&self, sub: &Submission) -> PathBuf {
        self.submission_dir(sub).join("payload")
    }

    pub fn read_payload(&self, sub: &Submission) -> std::io::Result<Vec<u8>> {
        fs::read(self.payload_path(sub))
    }

    /// Validates, assigns an id and `received_at`, checks the daily quota and
    /// persists, all under one lock.
    pub fn accept_submission(
        &self,
        team: &TeamId,
        stage_id: &StageId,
        payload: &[u8],
        now: Timestamp,
        source: Source,
        channel: Option<String>,
    ) -> Result<Submission, IngestError> {
        let stage = self
            .competition
            .config
            .stage(stage_id)
            .ok_or_else(|| IngestError::UnknownStage(stage_id.clone()))?;
        let size = payload.len() as u64;
        if size > stage.max_payload_bytes {
            return Err(IngestError::TooLarge { size, limit: stage.max_payload_bytes });
        }
        let digest = sha256_hex(payload);

        let mut st = self.lock();
        let received_at = st.last_received.map_or(now, |last| last.max(now));
        if !stage.window().contains(received_at) {
            return Err(IngestError::StageClosed(stage_id.clone()));
        }
        let day = self.competition.local_day(received_at);
        let key = (team.clone(), stage_id.clone(), day);
        if st.daily.get(&key).copied().unwrap_or(0) >= stage.daily_submission_limit {
            let reset_at = self.competition.next_day_start(received_at);
            return Err(IngestError::QuotaExceeded {
                limit: stage.daily_submission_limit,
                reset_at,
                reset_local: self.competition.local(reset_at).to_rfc3339(),
            });
        }
        let mut duplicate = false;
        for s in st.submissions.values() {
            if &s.team_id == team && s.payload_digest == digest {
                if s.received_at == received_at {
                    return Err(IngestError::DuplicateReceipt);
                }
                duplicate |= &s.stage_id == stage_id;
            }
        }

        let sub = Submission {
            submission_id: SubmissionId(st.next_id),
            team_id: team.clone(),
            stage_id: stage_id.clone(),
            received_at,
            payload_digest: digest,
            payload_bytes: size,
            source,
            channel,
            duplicate,
        };
        let dir = self.submission_dir(&sub);
        fs::create_dir_all(&dir)?;
        atomic_write(&dir.join("payload"), payload)?;
        atomic_write(&dir.join("meta.json"), &serde_json::to_vec_pretty(&sub).expect("serializes"))?;

        st.next_id += 1;
        st.last_received = Some(received_at);
        *st.daily.entry(key).or_default() += 1;
        st.submissions.insert(sub.submission_id, sub.clone());
        Ok(sub)
    }

    pub fn quota(&self, team: &TeamId, stage_id: &StageId, now: Timestamp) -> Option<Quota> {
        let stage = self.competition.config.stage(stage_id)?;
        let st = self.lock();
        let day = self.competition.local_day(now);
        let used = st.daily.get(&(team.clone(), stage_id.clone(), day)).copied().unwrap_or(0);
        let limit = stage.daily_submission_limit;
        Some(Quota {
            used,
            limit,
            remaining: limit.saturating_sub(used),
            resets_at: self.competition.next_day_start(now),
        })
    }

    pub fn get(&self, id: SubmissionId) -> Option<Submission> {
        self.lock().submissions.get(&id).cloned()
    }

    /// All submissions of a stage in id order.
    pub fn submissions(&self, stage: &StageId) -> Vec<Submission> {
        self.lock().submissions.values().filter(|s| &s.stage_id == stage).cloned().collect()
    }

    pub fn all_submissions(&self) -> Vec<Submission> {
        self.lock().submissions.values().cloned().collect()
    }

    /// Teams with at least one submission to `stage` strictly before `deadline`.
    pub fn teams_submitted_before(&self, stage: &StageId, deadline: Timestamp) -> BTreeSet<TeamId> {
        self.lock()
            .submissions
            .values()
            .filter(|s| &s.stage_id == stage && s.received_at < deadline)
            .map(|s| s.team_id.clone())
            .collect()
    }

    /// Takes every artifact under `<root>/submissions/<stage>/<token>/` not
    /// seen before, oldest modification time first. `resolve` maps a stage
    /// token to an active team. Rejected artifacts are logged and not retried.
    pub fn scan_source(
        &self,
        root: &Path,
        now: Timestamp,
        resolve: impl Fn(&StageId, &str) -> Option<TeamId>,
    ) -> Vec<Submission> {
        let base = root.join("submissions");
        let artifacts = match list_artifacts(&base, &self.competition) {
            Ok(a) => a,
            Err(e) => {
                if e.kind() != std::io::ErrorKind::NotFound {
                    tracing::warn!(root = %base.display(), error = %e, "scan source unreadable");
                }
                return Vec::new();
            }
        };
        let mut accepted = Vec::new();
        let mut changed = false;
        for a in artifacts {
            let bytes = match fs::read(&a.path) {
                Ok(b) => b,
                Err(e) => {
                    tracing::warn!(path = %a.path.display(), error = %e, "artifact unreadable");
                    continue;
                }
            };
            let key = (a.rel.clone(), sha256_hex(&bytes));
            if self.lock().scan.seen.contains(&key) {
                continue;
            }
            let result = match resolve(&a.stage, &a.token) {
                None => {
                    tracing::warn!(path = %a.rel, "artifact from unknown or inactive token");
                    None
                }
                Some(team) => {
                    let source = Source::Scan { path: a.rel.clone() };
                    match self.accept_submission(&team, &a.stage, &bytes, now, source, None) {
                        Ok(sub) => Some(sub),
                        Err(IngestError::Io(e)) => {
                            tracing::error!(path = %a.rel, error = %e, "could not store artifact");
                            continue;
                        }
                        Err(e) => {
                            tracing::warn!(path = %a.rel, error = %e, "artifact rejected");
                            None
                        }
                    }
                }
            };
            self.lock().scan.seen.insert(key);
            changed = true;
            accepted.extend(result);
        }
        if changed {
            let st = self.lock();
            let bytes = serde_json::to_vec(&st.scan).expect("serializes");
            if let Err(e) = atomic_write(&self.root.join("ingestion/scan.json"), &bytes) {
                tracing::error!(error = %e, "could not persist scan cursor");
            }
        }
        accepted
    }
}

struct Artifact {
    path: PathBuf,
    rel: String,
    stage: StageId,
    token: String,
    mtime: SystemTime,
}

fn list_artifacts(base: &Path, competition: &SharedCompetition) -> std::io::Result<Vec<Artifact>> {
    let mut out = Vec::new();
    for stage in &competition.config.stages {
        let stage_dir = base.join(stage.stage_id.as_str());
        let tokens = match fs::read_dir(&stage_dir) {
            Ok(rd) => rd,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
            Err(e) => return Err(e),
        };
        for token_dir in tokens {
            let token_dir = token_dir?;
            if !token_dir.file_type()?.is_dir() {
                continue;
            }
            let Some(token) = token_dir.file_name().to_str().map(String::from) else { continue };
            for file in fs::read_dir(token_dir.path())? {
                let file = file?;
                let meta = file.metadata()?;
                let name = file.file_name();
                let Some(name) = name.to_str() else { continue };
                let ext_ok = Path::new(name)
                    .extension()
                    .is_some_and(|e| e.eq_ignore_ascii_case(&stage.artifact_extension));
                if !meta.is_file() || !ext_ok {
                    continue;
                }
                out.push(Artifact {
                    path: file.path(),
                    rel: format!("{}/{}/{}", stage.stage_id, token, name),
                    stage: stage.stage_id.clone(),
                    token: token.clone(),
                    mtime: meta.modified()?,
                });
            }
        }
    }
    if !base.exists() {
        return Err(std::io::ErrorKind::NotFound.into());
    }
    out.sort_by(|a, b| a.mtime.cmp(&b.mtime).then_with(|| a.rel.cmp(&b.rel)));
    Ok(out)
}

fn find_sidecars(root: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for stage in fs::read_dir(root)? {
        for team in fs::read_dir(stage?.path())? {
            for sub in fs::read_dir(team?.path())? {
                let meta = sub?.path().join("meta.json");
                if meta.is_file() {
                    out.push(meta);
                }
            }
        }
    }
    Ok(out)
}

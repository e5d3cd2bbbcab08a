//! Deferred verification: verifier hooks, the worker that runs them with
//! retry and backoff, and the durable result queue read by the aggregator.
//!
//! Results are appended to `<data>/verification/results.jsonl`; the worker's
//! retry bookkeeping lives in `<data>/verification/attempts.json`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use arena_core::instance::{InstanceLog, InstanceRow};
use arena_core::verify::Recomputed;
use arena_core::{EvaluatorSpec, MetricSpec, StageId, SubmissionId, Timestamp};
use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::formats::{parse_ground_truth, parse_instance_log, parse_ranking};
use crate::fsutil::{append_line, atomic_write};

/// Failures after which the organizer is alerted.
pub const ALERT_AFTER_FAILURES: u32 = 3;
pub const BACKOFF_BASE: Duration = Duration::from_secs(30);
pub const BACKOFF_CAP: Duration = Duration::from_secs(3600);

pub struct VerifyJob<'a> {
    pub spec: &'a EvaluatorSpec,
    pub payload_path: &'a Path,
    pub ground_truth_path: Option<&'a Path>,
}

pub trait Verifier: Send + Sync {
    fn recompute(&self, job: &VerifyJob<'_>) -> Result<Recomputed, String>;
}

/// Recomputes the claim in-process from the stored payload.
#[derive(Debug, Default, Clone, Copy)]
pub struct RecomputeVerifier;

impl Verifier for RecomputeVerifier {
    fn recompute(&self, job: &VerifyJob<'_>) -> Result<Recomputed, String> {
        let payload = fs::read(job.payload_path).map_err(|e| format!("payload: {e}"))?;
        match &job.spec.metric {
            MetricSpec::MapAtK(params) => {
                let gt_path = job.ground_truth_path.ok_or("no ground truth configured")?;
                let gt_bytes = fs::read(gt_path).map_err(|e| format!("ground truth: {e}"))?;
                let gt = parse_ground_truth(&gt_bytes).map_err(|e| format!("ground truth: {e}"))?;
                let sub = parse_ranking(&payload).map_err(|e| e.to_string())?;
                let out = arena_core::ranking::evaluate_map(&sub, &gt, params).map_err(|e| e.to_string())?;
                Ok(Recomputed::Score(out.map))
            }
            MetricSpec::InstanceLog(_) => {
                parse_instance_log(&payload).map(Recomputed::InstanceLog).map_err(|e| e.to_string())
            }
        }
    }
}

/// Runs `<program> [args..] <payload> <ground_truth>` and reads the result
/// from standard output: a number for ranking stages, an instance log CSV for
/// instance stages. A nonzero exit or a timeout is a failure.
#[derive(Debug, Clone)]
pub struct CommandVerifier {
    pub argv: Vec<String>,
    pub timeout: Duration,
}

impl Verifier for CommandVerifier {
    fn recompute(&self, job: &VerifyJob<'_>) -> Result<Recomputed, String> {
        let (program, args) = self.argv.split_first().ok_or("empty verifier command")?;
        let mut cmd = Command::new(program);
        cmd.args(args).arg(job.payload_path);
        if let Some(gt) = job.ground_truth_path {
            cmd.arg(gt);
        }
        let mut child = cmd
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| format!("cannot start {program}: {e}"))?;
        // Drain stdout on a thread so a chatty verifier cannot block on a
        // full pipe while we wait.
        let mut stdout = child.stdout.take().expect("piped");
        let reader = std::thread::spawn(move || {
            let mut buf = Vec::new();
            stdout.read_to_end(&mut buf).map(|_| buf)
        });
        let status = match child.wait_timeout(self.timeout).map_err(|e| e.to_string())? {
            Some(status) => status,
            None => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(format!("timed out after {}s", self.timeout.as_secs_f64()));
            }
        };
        let out = reader.join().map_err(|_| "reader panicked")?.map_err(|e| e.to_string())?;
        if !status.success() {
            return Err(format!("verifier exited with {status}"));
        }
        match job.spec.metric {
            MetricSpec::MapAtK(_) => {
                let text = String::from_utf8_lossy(&out);
                text.trim().parse::<f64>().map(Recomputed::Score).map_err(|_| format!("bad output `{}`", text.trim()))
            }
            MetricSpec::InstanceLog(_) => {
                parse_instance_log(&out).map(Recomputed::InstanceLog).map_err(|e| e.to_string())
            }
        }
    }
}

/// Uses the evaluator's configured command when present, else recomputes.
#[derive(Debug, Default, Clone, Copy)]
pub struct PolicyVerifier;

impl Verifier for PolicyVerifier {
    fn recompute(&self, job: &VerifyJob<'_>) -> Result<Recomputed, String> {
        match &job.spec.verification.command {
            Some(argv) => CommandVerifier {
                argv: argv.clone(),
                timeout: Duration::from_secs(job.spec.verification.timeout_s),
            }
            .recompute(job),
            None => RecomputeVerifier.recompute(job),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecomputedWire {
    Score(f64),
    InstanceLog(Vec<InstanceRow>),
}

impl From<Recomputed> for RecomputedWire {
    fn from(r: Recomputed) -> Self {
        match r {
            Recomputed::Score(s) => Self::Score(s),
            Recomputed::InstanceLog(log) => Self::InstanceLog(log.rows().to_vec()),
        }
    }
}

impl RecomputedWire {
    /// `None` if the stored rows no longer form a valid log.
    pub fn into_recomputed(self) -> Option<Recomputed> {
        match self {
            Self::Score(s) => Some(Recomputed::Score(s)),
            Self::InstanceLog(rows) => InstanceLog::new(rows).ok().map(Recomputed::InstanceLog),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationResult {
    pub stage_id: StageId,
    pub submission_id: SubmissionId,
    pub evaluator_version: u32,
    pub recomputed: RecomputedWire,
    pub completed_at: Timestamp,
}

/// Reads complete result lines starting at byte `offset`. Returns the
/// results with the offset just past each one. A partially written final
/// line is left for the next read.
pub fn read_results(path: &Path, offset: u64) -> std::io::Result<Vec<(u64, VerificationResult)>> {
    let mut file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    file.seek(SeekFrom::Start(offset))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    let mut out = Vec::new();
    let mut pos = offset;
    let mut rest = buf.as_slice();
    while let Some(nl) = rest.iter().position(|&b| b == b'\n') {
        let line = &rest[..nl];
        pos += nl as u64 + 1;
        rest = &rest[nl + 1..];
        match serde_json::from_slice::<VerificationResult>(line) {
            Ok(r) => out.push((pos, r)),
            Err(e) => tracing::error!(offset = pos, error = %e, "skipping corrupt verification result"),
        }
    }
    Ok(out)
}

/// One unit of work for the worker.
#[derive(Debug, Clone)]
pub struct Job {
    pub stage_id: StageId,
    pub submission_id: SubmissionId,
    pub spec: EvaluatorSpec,
    pub payload_path: PathBuf,
    pub ground_truth_path: Option<PathBuf>,
}

impl Job {
    fn key(&self) -> String {
        format!("{}/{}/v{}", self.stage_id, self.submission_id, self.spec.version)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct Attempt {
    failures: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    next_at: Option<Timestamp>,
    #[serde(default)]
    queued: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    last_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alert {
    pub stage_id: StageId,
    pub submission_id: SubmissionId,
    pub failures: u32,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PassReport {
    pub completed: u32,
    pub failed: u32,
    pub deferred: u32,
    #[serde(skip)]
    pub alerts: Vec<Alert>,
}

pub fn backoff(failures: u32) -> Duration {
    let factor = 1u32 << failures.saturating_sub(1).min(16);
    (BACKOFF_BASE * factor).min(BACKOFF_CAP)
}

pub struct VerificationWorker {
    dir: PathBuf,
    verifier: Arc<dyn Verifier>,
    attempts: Mutex<BTreeMap<String, Attempt>>,
}

impl VerificationWorker {
    pub fn open(dir: &Path, verifier: Arc<dyn Verifier>) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let attempts = match fs::read(dir.join("attempts.json")) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(std::io::Error::other)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e),
        };
        Ok(Self { dir: dir.to_path_buf(), verifier, attempts: Mutex::new(attempts) })
    }

    pub fn results_path(&self) -> PathBuf {
        self.dir.join("results.jsonl")
    }

    /// Runs every job that is due (or all of them with `force`), appending
    /// successes to the result queue. Jobs already queued are skipped.
    pub fn run(&self, jobs: &[Job], now: Timestamp, force: bool) -> std::io::Result<PassReport> {
        let mut attempts = self.attempts.lock().unwrap_or_else(|p| p.into_inner());
        let mut report = PassReport::default();
        for job in jobs {
            let key = job.key();
            let a = attempts.entry(key).or_default();
            if a.queued {
                continue;
            }
            if !force && a.next_at.is_some_and(|at| at > now) {
                report.deferred += 1;
                continue;
            }
            let vj = VerifyJob {
                spec: &job.spec,
                payload_path: &job.payload_path,
                ground_truth_path: job.ground_truth_path.as_deref(),
            };
            match self.verifier.recompute(&vj) {
                Ok(recomputed) => {
                    let result = VerificationResult {
                        stage_id: job.stage_id.clone(),
                        submission_id: job.submission_id,
                        evaluator_version: job.spec.version,
                        recomputed: recomputed.into(),
                        completed_at: now,
                    };
                    append_line(&self.results_path(), &serde_json::to_string(&result).expect("serializes"))?;
                    a.queued = true;
                    a.next_at = None;
                    report.completed += 1;
                }
                Err(error) => {
                    a.failures += 1;
                    a.next_at = Some(now + chrono::Duration::from_std(backoff(a.failures)).expect("small"));
                    tracing::warn!(submission = %job.submission_id, failures = a.failures, %error, "verification failed");
                    if a.failures == ALERT_AFTER_FAILURES {
                        report.alerts.push(Alert {
                            stage_id: job.stage_id.clone(),
                            submission_id: job.submission_id,
                            failures: a.failures,
                            error: error.clone(),
                        });
                    }
                    a.last_error = Some(error);
                    report.failed += 1;
                }
            }
        }
        let bytes = serde_json::to_vec_pretty(&*attempts).expect("serializes");
        atomic_write(&self.dir.join("attempts.json"), &bytes)?;
        Ok(report)
    }

    /// Failure count for a job, for status views.
    pub fn failures(&self, stage: &StageId, id: SubmissionId, version: u32) -> u32 {
        let key = format!("{stage}/{id}/v{version}");
        self.attempts.lock().unwrap_or_else(|p| p.into_inner()).get(&key).map_or(0, |a| a.failures)
    }
}

//! Dispatch from a stored payload to the metric named by an evaluator spec.

use std::collections::BTreeMap;

use arena_core::instance::{evaluate_instance_log, InstanceLog};
use arena_core::ranking::{evaluate_map, GroundTruth, RankingSubmission};
use arena_core::{EvaluatorSpec, MetricSpec, ScoreAux, ScoreRecord, StageKind, SubmissionId, Timestamp, Verification};

use crate::formats::{parse_instance_log, parse_ranking, FormatError};

#[derive(Debug, Clone, PartialEq)]
pub enum Parsed {
    Ranking(RankingSubmission),
    InstanceLog(InstanceLog),
}

/// Syntax check only, used to reject malformed uploads before storing them.
pub fn parse_payload(kind: StageKind, payload: &[u8]) -> Result<Parsed, FormatError> {
    match kind {
        StageKind::RankingTask => parse_ranking(payload).map(Parsed::Ranking),
        StageKind::InstanceTask => parse_instance_log(payload).map(Parsed::InstanceLog),
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalContext<'a> {
    pub ground_truth: Option<&'a GroundTruth>,
    pub best_known: &'a BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct Evaluated {
    pub record: ScoreRecord,
    /// The parsed log, kept so instance scores can be recomputed when the
    /// best known objectives move.
    pub log: Option<InstanceLog>,
}

#[derive(Debug, thiserror::Error)]
#[error("ground truth is not available")]
pub struct MissingGroundTruth;

/// Scores one payload. Malformed payloads produce a record without a
/// primary score and the error text in `aux.error`.
pub fn evaluate(
    submission_id: SubmissionId,
    payload: &[u8],
    spec: &EvaluatorSpec,
    ctx: EvalContext<'_>,
    now: Timestamp,
) -> Result<Evaluated, MissingGroundTruth> {
    let initial = if spec.verification.required { Verification::Pending } else { Verification::Verified };
    let mut record = ScoreRecord {
        submission_id,
        evaluator_version: spec.version,
        primary_score: None,
        aux: ScoreAux::default(),
        verification: initial,
        evaluated_at: now,
    };
    let mut log = None;
    let outcome: Result<(), String> = match &spec.metric {
        MetricSpec::MapAtK(params) => {
            let gt = ctx.ground_truth.ok_or(MissingGroundTruth)?;
            parse_ranking(payload)
                .map_err(|e| e.to_string())
                .and_then(|sub| evaluate_map(&sub, gt, params).map_err(|e| e.to_string()))
                .map(|out| {
                    record.primary_score = Some(out.map);
                    record.aux.evaluated_users = Some(out.evaluated_users());
                    record.aux.ap_digest = Some(out.ap_digest());
                })
        }
        MetricSpec::InstanceLog(params) => parse_instance_log(payload)
            .map_err(|e| e.to_string())
            .and_then(|parsed| {
                rescore_instance(&mut record, &parsed, &params.instances, ctx.best_known)?;
                log = Some(parsed);
                Ok(())
            }),
    };
    if let Err(message) = outcome {
        record.aux.error = Some(message);
    }
    Ok(Evaluated { record, log })
}

/// Updates an instance-log record against new best known objectives.
pub fn rescore_instance(
    record: &mut ScoreRecord,
    log: &InstanceLog,
    manifest: &BTreeMap<String, arena_core::ObjectiveSense>,
    best_known: &BTreeMap<String, f64>,
) -> Result<(), String> {
    let out = evaluate_instance_log(log, manifest, best_known).map_err(|e| e.to_string())?;
    record.primary_score = Some(out.primary_score);
    record.aux.solved_count = Some(out.solved_count);
    record.aux.total_runtime_s = Some(out.total_runtime_s);
    Ok(())
}

//! CSV wire formats: ranking submissions, instance logs, ground truth and the
//! published leaderboard.

use std::collections::BTreeMap;

use arena_core::instance::{InstanceError, InstanceLog, InstanceRow, InstanceStatus};
use arena_core::leaderboard::LeaderboardSnapshot;
use arena_core::numeric::format_score;
use arena_core::ranking::{GroundTruth, Interaction, RankingError, RankingSubmission, Split};

pub const RANKING_HEADER: [&str; 3] = ["user_id", "item_id", "rank"];
pub const INSTANCE_HEADER: [&str; 4] = ["instance", "status", "objective", "runtime_s"];
pub const GROUND_TRUTH_HEADER: [&str; 4] = ["user_id", "item_id", "label", "split"];
pub const LEADERBOARD_HEADER: [&str; 7] =
    ["rank", "team", "score", "submissions", "last_submission_utc", "badges", "flags"];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FormatError {
    #[error("payload is not valid UTF-8")]
    NotUtf8,
    #[error("expected header `{expected}`, found `{found}`")]
    Header { expected: String, found: String },
    #[error("line {line}: {message}")]
    Row { line: u64, message: String },
    #[error(transparent)]
    Ranking(#[from] RankingError),
    #[error(transparent)]
    Instance(#[from] InstanceError),
}

fn reader(bytes: &[u8]) -> Result<csv::Reader<&[u8]>, FormatError> {
    std::str::from_utf8(bytes).map_err(|_| FormatError::NotUtf8)?;
    Ok(csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::None).from_reader(bytes))
}

fn check_header(rdr: &mut csv::Reader<&[u8]>, expected: &[&str]) -> Result<(), FormatError> {
    let found = rdr.headers().map_err(|e| row_err(1, e))?;
    if found.iter().ne(expected.iter().copied()) {
        return Err(FormatError::Header {
            expected: expected.join(","),
            found: found.iter().collect::<Vec<_>>().join(","),
        });
    }
    Ok(())
}

fn row_err(line: u64, e: impl std::fmt::Display) -> FormatError {
    FormatError::Row { line, message: e.to_string() }
}

fn records<'a, 'b>(
    rdr: &'a mut csv::Reader<&'b [u8]>,
) -> impl Iterator<Item = Result<(u64, csv::StringRecord), FormatError>> + use<'a, 'b> {
    rdr.records().map(|r| {
        let rec = r.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            row_err(line, e)
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        Ok((line, rec))
    })
}

/// `user_id,item_id,rank`. Ranks for each user must be exactly `1..=n`.
pub fn parse_ranking(bytes: &[u8]) -> Result<RankingSubmission, FormatError> {
    let mut rdr = reader(bytes)?;
    check_header(&mut rdr, &RANKING_HEADER)?;
    let mut by_user: BTreeMap<String, BTreeMap<u32, String>> = BTreeMap::new();
    for r in records(&mut rdr) {
        let (line, rec) = r?;
        let user = non_empty(&rec[0], line, "user_id")?;
        let item = non_empty(&rec[1], line, "item_id")?;
        let rank: u32 = rec[2]
            .parse()
            .ok()
            .filter(|r| *r >= 1)
            .ok_or_else(|| row_err(line, format!("rank `{}` is not a positive integer", &rec[2])))?;
        if by_user.entry(user.clone()).or_default().insert(rank, item).is_some() {
            return Err(row_err(line, format!("rank {rank} repeated for user `{user}`")));
        }
    }
    let mut lists = Vec::with_capacity(by_user.len());
    for (user, ranks) in by_user {
        let n = ranks.len() as u32;
        if ranks.keys().copied().ne(1..=n) {
            return Err(row_err(0, format!("ranks for user `{user}` must be 1..={n} without gaps")));
        }
        lists.push((user, ranks.into_values().collect()));
    }
    Ok(RankingSubmission::new(lists)?)
}

/// `instance,status,objective,runtime_s`. The objective is empty unless the
/// status is `solved`.
pub fn parse_instance_log(bytes: &[u8]) -> Result<InstanceLog, FormatError> {
    let mut rdr = reader(bytes)?;
    check_header(&mut rdr, &INSTANCE_HEADER)?;
    let mut rows = Vec::new();
    for r in records(&mut rdr) {
        let (line, rec) = r?;
        let instance = non_empty(&rec[0], line, "instance")?;
        let status = match &rec[1] {
            "solved" => InstanceStatus::Solved,
            "infeasible" => InstanceStatus::Infeasible,
            "unsolved" => InstanceStatus::Unsolved,
            other => return Err(row_err(line, format!("unknown status `{other}`"))),
        };
        let objective = match &rec[2] {
            "" => None,
            s => Some(s.parse::<f64>().map_err(|_| row_err(line, format!("bad objective `{s}`")))?),
        };
        let runtime_s: f64 =
            rec[3].parse().map_err(|_| row_err(line, format!("bad runtime `{}`", &rec[3])))?;
        rows.push(InstanceRow { instance, status, objective, runtime_s });
    }
    Ok(InstanceLog::new(rows)?)
}

pub fn render_instance_log(log: &InstanceLog) -> Vec<u8> {
    let mut w = writer();
    w.write_record(INSTANCE_HEADER).unwrap();
    for row in log.rows() {
        let status = match row.status {
            InstanceStatus::Solved => "solved",
            InstanceStatus::Infeasible => "infeasible",
            InstanceStatus::Unsolved => "unsolved",
        };
        let objective = row.objective.map(|o| o.to_string()).unwrap_or_default();
        w.write_record([row.instance.as_str(), status, &objective, &row.runtime_s.to_string()])
            .unwrap();
    }
    w.into_inner().unwrap()
}

/// `user_id,item_id,label,split` with `label` in {0,1} and `split` in
/// {train,test}.
pub fn parse_ground_truth(bytes: &[u8]) -> Result<GroundTruth, FormatError> {
    let mut rdr = reader(bytes)?;
    check_header(&mut rdr, &GROUND_TRUTH_HEADER)?;
    let mut rows = Vec::new();
    for r in records(&mut rdr) {
        let (line, rec) = r?;
        let positive = match &rec[2] {
            "1" => true,
            "0" => false,
            other => return Err(row_err(line, format!("label must be 0 or 1, got `{other}`"))),
        };
        let split = match &rec[3] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(row_err(line, format!("unknown split `{other}`"))),
        };
        rows.push(Interaction {
            user: non_empty(&rec[0], line, "user_id")?,
            item: non_empty(&rec[1], line, "item_id")?,
            positive,
            split,
        });
    }
    Ok(GroundTruth::from_interactions(rows))
}

fn non_empty(s: &str, line: u64, field: &str) -> Result<String, FormatError> {
    if s.is_empty() {
        Err(row_err(line, format!("{field} is empty")))
    } else {
        Ok(s.to_string())
    }
}

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

/// The canonical aggregated leaderboard file.
pub fn render_leaderboard_csv(snapshot: &LeaderboardSnapshot) -> Vec<u8> {
    let mut w = writer();
    w.write_record(LEADERBOARD_HEADER).unwrap();
    for row in &snapshot.rows {
        let flags: Vec<&str> = row.flags.iter().map(|f| f.as_str()).collect();
        w.write_record([
            row.rank.to_string(),
            row.display_name.clone(),
            row.best_score.map(format_score).unwrap_or_default(),
            row.submission_count.to_string(),
            row.last_submission_at.format("%Y-%m-%dT%H:%M:%SZ").to_string(),
            row.badges.join(";"),
            flags.join(";"),
        ])
        .unwrap();
    }
    w.into_inner().unwrap()
}

/// Parses any CSV into header + rows, for display.
pub fn parse_table(bytes: &[u8]) -> Result<(Vec<String>, Vec<Vec<String>>), FormatError> {
    let mut rdr = reader(bytes)?;
    let header = rdr.headers().map_err(|e| row_err(1, e))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for r in records(&mut rdr) {
        let (_, rec) = r?;
        rows.push(rec.iter().map(String::from).collect());
    }
    Ok((header, rows))
}

//! Append-only log of organizer and system actions (`<data>/audit.jsonl`).

use std::fs;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use arena_core::Timestamp;
use serde::{Deserialize, Serialize};

use crate::fsutil::append_line;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub seq: u64,
    pub at: Timestamp,
    pub actor: String,
    pub action: String,
    pub params: serde_json::Value,
    pub ok: bool,
    pub detail: serde_json::Value,
}

#[derive(Debug)]
pub struct AuditLog {
    path: PathBuf,
    next_seq: Mutex<u64>,
}

impl AuditLog {
    pub fn open(path: &Path) -> std::io::Result<Self> {
        let next = replay(path)?.last().map_or(1, |e| e.seq + 1);
        Ok(Self { path: path.to_path_buf(), next_seq: Mutex::new(next) })
    }

    pub fn record(
        &self,
        at: Timestamp,
        actor: &str,
        action: &str,
        params: serde_json::Value,
        ok: bool,
        detail: serde_json::Value,
    ) -> std::io::Result<AuditEntry> {
        let mut seq = self.next_seq.lock().unwrap_or_else(|p| p.into_inner());
        let entry = AuditEntry {
            seq: *seq,
            at,
            actor: actor.to_string(),
            action: action.to_string(),
            params,
            ok,
            detail,
        };
        append_line(&self.path, &serde_json::to_string(&entry).expect("serializes"))?;
        *seq += 1;
        Ok(entry)
    }

    pub fn entries(&self) -> std::io::Result<Vec<AuditEntry>> {
        let _guard = self.next_seq.lock().unwrap_or_else(|p| p.into_inner());
        replay(&self.path)
    }
}

/// Reads every complete entry in order. A torn final line is ignored.
pub fn replay(path: &Path) -> std::io::Result<Vec<AuditEntry>> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e),
    };
    let mut out = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line?;
        match serde_json::from_str(&line) {
            Ok(e) => out.push(e),
            Err(e) => tracing::warn!(error = %e, "ignoring unreadable audit line"),
        }
    }
    Ok(out)
}

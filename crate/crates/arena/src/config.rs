//! Loading the JSON competition config and resolving its official time zone.

use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use arena_core::{CompetitionConfig, ConfigError, Timestamp};
use chrono::{DateTime, Days, NaiveDate, TimeZone};
use chrono_tz::Tz;

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error at {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(#[from] ConfigError),
}

/// A validated config together with its resolved time zone. Immutable and
/// cheap to share.
#[derive(Debug, Clone)]
pub struct Competition {
    pub config: CompetitionConfig,
    pub tz: Tz,
}

pub type SharedCompetition = Arc<Competition>;

pub fn load_config(mut source: impl Read) -> Result<Competition, LoadError> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let config: CompetitionConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        LoadError::Parse { path, message: e.into_inner().to_string() }
    })?;
    Competition::new(config)
}

pub fn load_config_file(path: &Path) -> Result<Competition, LoadError> {
    load_config(std::fs::File::open(path)?)
}

pub fn to_json(config: &CompetitionConfig) -> String {
    serde_json::to_string_pretty(config).expect("config serializes")
}

impl Competition {
    pub fn new(config: CompetitionConfig) -> Result<Self, LoadError> {
        config.validate_structure()?;
        let tz: Tz = config.official_time_zone.parse().map_err(|_| {
            ConfigError::new(
                "official_time_zone",
                format!("unknown time zone \"{}\"", config.official_time_zone),
            )
        })?;
        Ok(Self { config, tz })
    }

    pub fn local(&self, t: Timestamp) -> DateTime<Tz> {
        t.with_timezone(&self.tz)
    }

    /// Calendar day of `t` in the official time zone.
    pub fn local_day(&self, t: Timestamp) -> NaiveDate {
        self.local(t).date_naive()
    }

    /// First instant of the official day after the one containing `t`.
    pub fn next_day_start(&self, t: Timestamp) -> Timestamp {
        let next = self.local_day(t).checked_add_days(Days::new(1)).expect("date in range");
        let midnight = next.and_hms_opt(0, 0, 0).expect("valid midnight");
        // A DST gap can swallow local midnight; walk forward to the first
        // existing local instant.
        (0..=180)
            .find_map(|m| {
                self.tz
                    .from_local_datetime(&(midnight + chrono::Duration::minutes(m)))
                    .earliest()
            })
            .expect("a valid local time within three hours of midnight")
            .to_utc()
    }
}

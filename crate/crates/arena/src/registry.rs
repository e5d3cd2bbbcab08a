//! Team registration, credentials and per-stage anonymity tokens.
//!
//! Records live in `<data>/registry/`: `log.jsonl` is an append-only event
//! log and `state.json` the atomically rewritten current state.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use arena_core::{StageId, TeamId, Timestamp};
use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use subtle::ConstantTimeEq;

use crate::config::SharedCompetition;
use crate::fsutil::{append_line, atomic_write};

pub const MAX_TOKEN_CHARS: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contact {
    pub name: String,
    pub email: String,
}

impl Contact {
    fn email_key(&self) -> String {
        self.email.trim().to_lowercase()
    }

    fn local_part(&self) -> String {
        self.email_key().split('@').next().unwrap_or_default().to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeamStatus {
    Active,
    InactiveMissedPreliminary,
    Disqualified,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnonymityToken {
    pub token: String,
    pub stage_id: StageId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CredentialDigest {
    pub salt: String,
    pub sha256: String,
}

impl CredentialDigest {
    fn compute(salt: &[u8], credential: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(salt);
        h.update(credential.as_bytes());
        h.finalize().into()
    }

    fn matches(&self, credential: &str) -> bool {
        let (Ok(salt), Ok(expected)) = (decode_hex(&self.salt), decode_hex(&self.sha256)) else {
            return false;
        };
        let actual = Self::compute(&salt, credential);
        bool::from(actual.as_slice().ct_eq(&expected))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeamRecord {
    pub team_id: TeamId,
    pub member_contacts: Vec<Contact>,
    pub rules_accepted_at: Timestamp,
    pub credential_digest: CredentialDigest,
    pub tokens: BTreeMap<StageId, AnonymityToken>,
    pub status: TeamStatus,
}

impl TeamRecord {
    pub fn is_active(&self) -> bool {
        self.status == TeamStatus::Active
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("registration is closed")]
    RegistrationClosed,
    #[error("rules not accepted")]
    RulesNotAccepted,
    #[error("a team needs at least one member")]
    NoMembers,
    #[error("invalid contact: {0}")]
    InvalidContact(String),
    #[error("no token supplied for stage \"{0}\"")]
    MissingToken(StageId),
    #[error("unknown stage \"{0}\"")]
    UnknownStage(StageId),
    #[error("token for stage \"{stage}\" is invalid: {reason}")]
    InvalidToken { stage: StageId, reason: String },
    #[error("token for stage \"{0}\" is already taken")]
    TokenCollision(StageId),
    #[error("token for stage \"{0}\" reveals a member name or email")]
    TokenNotAnonymous(StageId),
    #[error("{0} is already registered in another team")]
    MemberInOtherTeam(String),
    #[error("unknown credential")]
    UnknownCredential,
    #[error("unknown team")]
    UnknownTeam,
    #[error("team does not participate in stage \"{0}\"")]
    NotInStage(StageId),
    #[error("registry storage: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum Event {
    Registered { at: Timestamp, record: TeamRecord },
    StatusChanged { at: Timestamp, team_id: TeamId, status: TeamStatus },
    MemberMoved { at: Timestamp, email: String, from: TeamId, to: TeamId },
}

pub struct Registration {
    pub team_id: TeamId,
    /// Plaintext credential. Returned once; only its salted digest is kept.
    pub credential: String,
}

#[derive(Debug)]
pub struct Registry {
    dir: PathBuf,
    competition: SharedCompetition,
    teams: BTreeMap<TeamId, TeamRecord>,
}

impl Registry {
    pub fn open(dir: &Path, competition: SharedCompetition) -> Result<Self, RegistryError> {
        fs::create_dir_all(dir)?;
        let state = dir.join("state.json");
        let teams = match fs::read(&state) {
            Ok(bytes) => serde_json::from_slice(&bytes).map_err(std::io::Error::other)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        Ok(Self { dir: dir.to_path_buf(), competition, teams })
    }

    fn commit(&self, event: &Event) -> Result<(), RegistryError> {
        let line = serde_json::to_string(event).expect("event serializes");
        append_line(&self.dir.join("log.jsonl"), &line)?;
        let state = serde_json::to_vec_pretty(&self.teams).expect("state serializes");
        atomic_write(&self.dir.join("state.json"), &state)?;
        Ok(())
    }

    pub fn register_team(
        &mut self,
        contacts: Vec<Contact>,
        tokens: BTreeMap<StageId, String>,
        accept_rules: bool,
        now: Timestamp,
        bypass_window: bool,
    ) -> Result<Registration, RegistryError> {
        let config = &self.competition.config;
        if !bypass_window && !config.registration_window.contains(now) {
            return Err(RegistryError::RegistrationClosed);
        }
        if !accept_rules {
            return Err(RegistryError::RulesNotAccepted);
        }
        validate_contacts(&contacts)?;
        for c in &contacts {
            if self.team_of_email(&c.email_key()).is_some() {
                return Err(RegistryError::MemberInOtherTeam(c.email.clone()));
            }
        }
        if let Some(stage) = tokens.keys().find(|s| config.stage(s).is_none()) {
            return Err(RegistryError::UnknownStage(stage.clone()));
        }
        let mut record_tokens = BTreeMap::new();
        for stage in &config.stages {
            let token = tokens
                .get(&stage.stage_id)
                .ok_or_else(|| RegistryError::MissingToken(stage.stage_id.clone()))?;
            validate_token(token, &stage.stage_id, &contacts)?;
            if self.team_by_token(&stage.stage_id, token).is_some() {
                return Err(RegistryError::TokenCollision(stage.stage_id.clone()));
            }
            record_tokens.insert(
                stage.stage_id.clone(),
                AnonymityToken { token: token.clone(), stage_id: stage.stage_id.clone() },
            );
        }

        let mut rng = rand::rng();
        let mut secret = [0u8; 32];
        rng.fill_bytes(&mut secret);
        let credential = data_encoding::BASE32_NOPAD.encode(&secret);
        let mut salt = [0u8; 16];
        rng.fill_bytes(&mut salt);
        let digest = CredentialDigest::compute(&salt, &credential);

        let record = TeamRecord {
            team_id: TeamId::new(uuid::Uuid::new_v4().simple().to_string()),
            member_contacts: contacts,
            rules_accepted_at: now,
            credential_digest: CredentialDigest { salt: encode_hex(&salt), sha256: encode_hex(&digest) },
            tokens: record_tokens,
            status: TeamStatus::Active,
        };
        let team_id = record.team_id.clone();
        self.teams.insert(team_id.clone(), record.clone());
        if let Err(e) = self.commit(&Event::Registered { at: now, record }) {
            self.teams.remove(&team_id);
            return Err(e);
        }
        Ok(Registration { team_id, credential })
    }

    /// Checks every stored digest so the time taken does not depend on which
    /// team (if any) matches.
    pub fn authenticate(&self, credential: &str) -> Result<TeamId, RegistryError> {
        let mut found = None;
        for record in self.teams.values() {
            if record.credential_digest.matches(credential) {
                found = Some(record.team_id.clone());
            }
        }
        match found {
            Some(id) if !credential.is_empty() => Ok(id),
            _ => Err(RegistryError::UnknownCredential),
        }
    }

    pub fn team(&self, id: &TeamId) -> Option<&TeamRecord> {
        self.teams.get(id)
    }

    pub fn teams(&self) -> impl Iterator<Item = &TeamRecord> {
        self.teams.values()
    }

    pub fn resolve_display_name(&self, team: &TeamId, stage: &StageId) -> Result<&str, RegistryError> {
        if self.competition.config.stage(stage).is_none() {
            return Err(RegistryError::UnknownStage(stage.clone()));
        }
        let record = self.teams.get(team).ok_or(RegistryError::UnknownTeam)?;
        record
            .tokens
            .get(stage)
            .map(|t| t.token.as_str())
            .ok_or_else(|| RegistryError::NotInStage(stage.clone()))
    }

    /// Case-insensitive token lookup within one stage.
    pub fn team_by_token(&self, stage: &StageId, token: &str) -> Option<&TeamRecord> {
        let key = token.to_lowercase();
        self.teams
            .values()
            .find(|r| r.tokens.get(stage).is_some_and(|t| t.token.to_lowercase() == key))
    }

    pub fn team_of_email(&self, email: &str) -> Option<&TeamRecord> {
        let key = email.trim().to_lowercase();
        self.teams.values().find(|r| r.member_contacts.iter().any(|c| c.email_key() == key))
    }

    /// Sets the team's status. Idempotent.
    pub fn mark_inactive(
        &mut self,
        team: &TeamId,
        status: TeamStatus,
        now: Timestamp,
    ) -> Result<&TeamRecord, RegistryError> {
        self.set_status(team, status, now)
    }

    pub fn reinstate(&mut self, team: &TeamId, now: Timestamp) -> Result<&TeamRecord, RegistryError> {
        self.set_status(team, TeamStatus::Active, now)
    }

    fn set_status(
        &mut self,
        team: &TeamId,
        status: TeamStatus,
        now: Timestamp,
    ) -> Result<&TeamRecord, RegistryError> {
        let record = self.teams.get_mut(team).ok_or(RegistryError::UnknownTeam)?;
        if record.status != status {
            let previous = record.status;
            record.status = status;
            let event = Event::StatusChanged { at: now, team_id: team.clone(), status };
            if let Err(e) = self.commit(&event) {
                self.teams.get_mut(team).expect("present").status = previous;
                return Err(e);
            }
        }
        Ok(&self.teams[team])
    }

    /// Organizer re-pairing: moves a member into the team of another member.
    pub fn move_member(
        &mut self,
        email: &str,
        to_member_email: &str,
        now: Timestamp,
    ) -> Result<&TeamRecord, RegistryError> {
        let from = self.team_of_email(email).ok_or(RegistryError::UnknownTeam)?.team_id.clone();
        let to = self
            .team_of_email(to_member_email)
            .ok_or(RegistryError::UnknownTeam)?
            .team_id
            .clone();
        if from == to {
            return Ok(&self.teams[&to]);
        }
        let key = email.trim().to_lowercase();
        let source = &self.teams[&from];
        if source.member_contacts.len() == 1 {
            return Err(RegistryError::InvalidContact(
                "cannot move the last member out of a team".into(),
            ));
        }
        let contact = source
            .member_contacts
            .iter()
            .find(|c| c.email_key() == key)
            .cloned()
            .expect("member found by email");
        let target = &self.teams[&to];
        for (stage, token) in &target.tokens {
            validate_token(&token.token, stage, std::slice::from_ref(&contact))?;
        }

        let snapshot = self.teams.clone();
        self.teams.get_mut(&from).unwrap().member_contacts.retain(|c| c.email_key() != key);
        self.teams.get_mut(&to).unwrap().member_contacts.push(contact.clone());
        let event = Event::MemberMoved { at: now, email: contact.email, from, to: to.clone() };
        if let Err(e) = self.commit(&event) {
            self.teams = snapshot;
            return Err(e);
        }
        Ok(&self.teams[&to])
    }
}

fn validate_contacts(contacts: &[Contact]) -> Result<(), RegistryError> {
    if contacts.is_empty() {
        return Err(RegistryError::NoMembers);
    }
    let mut seen = std::collections::BTreeSet::new();
    for c in contacts {
        if c.name.trim().is_empty() {
            return Err(RegistryError::InvalidContact("member name is empty".into()));
        }
        let email = c.email_key();
        let mut parts = email.split('@');
        let ok = matches!((parts.next(), parts.next(), parts.next()),
            (Some(l), Some(d), None) if !l.is_empty() && !d.is_empty());
        if !ok {
            return Err(RegistryError::InvalidContact(format!("bad email {}", c.email)));
        }
        if !seen.insert(email) {
            return Err(RegistryError::InvalidContact(format!("{} listed twice", c.email)));
        }
    }
    Ok(())
}

fn validate_token(token: &str, stage: &StageId, contacts: &[Contact]) -> Result<(), RegistryError> {
    let invalid = |reason: &str| RegistryError::InvalidToken { stage: stage.clone(), reason: reason.into() };
    let n = token.chars().count();
    if n == 0 || n > MAX_TOKEN_CHARS {
        return Err(invalid("must be 1-32 characters"));
    }
    if token.chars().any(char::is_control) {
        return Err(invalid("control characters are not allowed"));
    }
    if token.trim() != token {
        return Err(invalid("leading or trailing whitespace is not allowed"));
    }
    let lower = token.to_lowercase();
    for c in contacts {
        let name = c.name.trim().to_lowercase();
        let local = c.local_part();
        if (!name.is_empty() && lower.contains(&name)) || (!local.is_empty() && lower.contains(&local)) {
            return Err(RegistryError::TokenNotAnonymous(stage.clone()));
        }
    }
    Ok(())
}

fn encode_hex(bytes: &[u8]) -> String {
    data_encoding::HEXLOWER.encode(bytes)
}

fn decode_hex(s: &str) -> Result<Vec<u8>, data_encoding::DecodeError> {
    data_encoding::HEXLOWER.decode(s.as_bytes())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::testutil::{competition, t};

    fn contact(name: &str, email: &str) -> Contact {
        Contact { name: name.into(), email: email.into() }
    }

    fn tokens(pairs: &[(&str, &str)]) -> BTreeMap<StageId, String> {
        pairs.iter().map(|(s, t)| (StageId::new(*s), t.to_string())).collect()
    }

    fn five() -> BTreeMap<StageId, String> {
        tokens(&[("I", "red-panda"), ("II", "blue-fox"), ("III", "green-owl"), ("IV", "grey-elk"), ("V", "tan-yak")])
    }

    fn open_registry() -> (tempfile::TempDir, Registry) {
        let dir = tempfile::tempdir().unwrap();
        let reg = Registry::open(&dir.path().join("registry"), competition(&["I", "II", "III", "IV", "V"])).unwrap();
        (dir, reg)
    }

    #[test]
    fn register_with_five_tokens() {
        let (_d, mut reg) = open_registry();
        let r = reg.register_team(vec![contact("Ada Lovelace", "ada@uni.edu")], five(), true, t(0), false).unwrap();
        assert_eq!(reg.team(&r.team_id).unwrap().tokens.len(), 5);
        assert_eq!(reg.team(&r.team_id).unwrap().status, TeamStatus::Active);
    }

    #[test]
    fn rules_must_be_accepted() {
        let (_d, mut reg) = open_registry();
        let err = reg.register_team(vec![contact("A", "a@x.org")], five(), false, t(0), false).err().unwrap();
        assert_eq!(err.to_string(), "rules not accepted");
    }

    #[test]
    fn token_collision_is_case_insensitive_and_names_stage() {
        let (_d, mut reg) = open_registry();
        let mut first = five();
        first.insert(StageId::new("II"), "solver-ninjas".into());
        reg.register_team(vec![contact("Ada", "ada@uni.edu")], first, true, t(0), false).unwrap();
        let mut second = tokens(&[("I", "a1"), ("II", "Solver-Ninjas"), ("III", "a3"), ("IV", "a4"), ("V", "a5")]);
        second.insert(StageId::new("II"), "Solver-Ninjas".into());
        match reg.register_team(vec![contact("Bob", "bob@uni.edu")], second, true, t(0), false) {
            Err(RegistryError::TokenCollision(s)) => assert_eq!(s.as_str(), "II"),
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn token_may_not_reveal_identity() {
        let (_d, mut reg) = open_registry();
        let mut tk = five();
        tk.insert(StageId::new("III"), "the-AdaL-team".into());
        match reg.register_team(vec![contact("Ada L", "adal@uni.edu")], tk, true, t(0), false) {
            Err(RegistryError::TokenNotAnonymous(s)) => assert_eq!(s.as_str(), "III"),
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn token_shape() {
        let c = [contact("Zed", "zed@x.org")];
        let s = StageId::new("I");
        assert!(validate_token("", &s, &c).is_err());
        assert!(validate_token(&"x".repeat(33), &s, &c).is_err());
        assert!(validate_token(&"é".repeat(32), &s, &c).is_ok());
        assert!(validate_token("tab\there", &s, &c).is_err());
        assert!(validate_token(" pad", &s, &c).is_err());
    }

    #[test]
    fn one_team_per_member() {
        let (_d, mut reg) = open_registry();
        reg.register_team(vec![contact("Ada", "ada@uni.edu")], five(), true, t(0), false).unwrap();
        let other = tokens(&[("I", "b1"), ("II", "b2"), ("III", "b3"), ("IV", "b4"), ("V", "b5")]);
        let err = reg
            .register_team(vec![contact("Ada Again", "ADA@uni.edu")], other, true, t(0), false)
            .err()
            .unwrap();
        assert!(matches!(err, RegistryError::MemberInOtherTeam(_)));
    }

    #[test]
    fn every_stage_needs_a_token() {
        let (_d, mut reg) = open_registry();
        let err = reg
            .register_team(vec![contact("Ada", "ada@uni.edu")], tokens(&[("I", "x")]), true, t(0), false)
            .err()
            .unwrap();
        assert!(matches!(err, RegistryError::MissingToken(_)));
    }

    #[test]
    fn registration_window() {
        let (_d, mut reg) = open_registry();
        let err = reg
            .register_team(vec![contact("Ada", "ada@uni.edu")], five(), true, t(100_000), false)
            .err()
            .unwrap();
        assert!(matches!(err, RegistryError::RegistrationClosed));
        reg.register_team(vec![contact("Ada", "ada@uni.edu")], five(), true, t(100_000), true).unwrap();
    }

    #[test]
    fn authenticate_round_trip_and_failures() {
        let (_d, mut reg) = open_registry();
        let r = reg.register_team(vec![contact("Ada", "ada@uni.edu")], five(), true, t(0), false).unwrap();
        assert_eq!(reg.authenticate(&r.credential).unwrap(), r.team_id);
        let mut tampered = r.credential.clone().into_bytes();
        tampered[0] = if tampered[0] == b'A' { b'B' } else { b'A' };
        let tampered = String::from_utf8(tampered).unwrap();
        assert!(matches!(reg.authenticate(&tampered), Err(RegistryError::UnknownCredential)));
        assert!(matches!(reg.authenticate(""), Err(RegistryError::UnknownCredential)));
        // plaintext never stored
        let state = fs::read_to_string(reg.dir.join("state.json")).unwrap();
        assert!(!state.contains(&r.credential));
    }

    #[test]
    fn display_names_are_per_stage() {
        let (_d, mut reg) = open_registry();
        let r = reg.register_team(vec![contact("Ada", "ada@uni.edu")], five(), true, t(0), false).unwrap();
        assert_eq!(reg.resolve_display_name(&r.team_id, &StageId::new("I")).unwrap(), "red-panda");
        assert_eq!(reg.resolve_display_name(&r.team_id, &StageId::new("II")).unwrap(), "blue-fox");
        assert!(matches!(
            reg.resolve_display_name(&r.team_id, &StageId::new("VI")),
            Err(RegistryError::UnknownStage(_))
        ));
    }

    #[test]
    fn mark_inactive_is_idempotent() {
        let (_d, mut reg) = open_registry();
        let r = reg.register_team(vec![contact("Ada", "ada@uni.edu")], five(), true, t(0), false).unwrap();
        let once = reg.mark_inactive(&r.team_id, TeamStatus::InactiveMissedPreliminary, t(1)).unwrap().clone();
        let twice = reg.mark_inactive(&r.team_id, TeamStatus::InactiveMissedPreliminary, t(2)).unwrap().clone();
        assert_eq!(once, twice);
        assert_eq!(twice.status, TeamStatus::InactiveMissedPreliminary);
        assert!(matches!(
            reg.mark_inactive(&TeamId::new("nope"), TeamStatus::Disqualified, t(3)),
            Err(RegistryError::UnknownTeam)
        ));
    }

    #[test]
    fn state_survives_reopen() {
        let (dir, mut reg) = open_registry();
        let r = reg.register_team(vec![contact("Ada", "ada@uni.edu")], five(), true, t(0), false).unwrap();
        reg.mark_inactive(&r.team_id, TeamStatus::Disqualified, t(1)).unwrap();
        let again = Registry::open(&dir.path().join("registry"), competition(&["I", "II", "III", "IV", "V"])).unwrap();
        assert_eq!(again.authenticate(&r.credential).unwrap(), r.team_id);
        assert_eq!(again.team(&r.team_id).unwrap().status, TeamStatus::Disqualified);
        let log = fs::read_to_string(dir.path().join("registry/log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 2);
    }

    #[test]
    fn move_member_between_teams() {
        let (_d, mut reg) = open_registry();
        let a = reg
            .register_team(vec![contact("Ada", "ada@uni.edu"), contact("Cy", "cy@uni.edu")], five(), true, t(0), false)
            .unwrap();
        let other = tokens(&[("I", "b1"), ("II", "b2"), ("III", "b3"), ("IV", "b4"), ("V", "b5")]);
        let b = reg.register_team(vec![contact("Bob", "bob@uni.edu")], other, true, t(0), false).unwrap();
        reg.move_member("cy@uni.edu", "bob@uni.edu", t(1)).unwrap();
        assert_eq!(reg.team_of_email("cy@uni.edu").unwrap().team_id, b.team_id);
        assert_eq!(reg.team(&a.team_id).unwrap().member_contacts.len(), 1);
        assert!(reg.move_member("ada@uni.edu", "bob@uni.edu", t(2)).is_err());
    }
}

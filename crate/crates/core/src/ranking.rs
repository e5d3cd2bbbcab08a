//! MAP@k for top-k ranking submissions.
//!
//! AP@k for one user is
//!
//! ```text
//! AP@k = 1/min(k, |R|) * sum_{r=1..min(k, n)} rel(r) * hits(r) / r
//! ```
//!
//! where `rel(r)` is 1 when the item at rank `r` is relevant and `hits(r)`
//! counts relevant items in ranks `1..=r`. MAP@k is the arithmetic mean over
//! users whose effective relevant set is non-empty. Sums run in rank order
//! with compensated summation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::config::{ListFilter, MapParams, RelevanceUniverse};
use crate::numeric::CompensatedSum;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RankingError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("relevant set is empty")]
    EmptyRelevant,
    #[error("item \"{item}\" appears more than once for user \"{user}\"")]
    DuplicateItem { user: String, item: String },
    #[error("ranked list contains a duplicate item")]
    DuplicateRankedItem,
    #[error("user \"{0}\" appears more than once")]
    DuplicateUser(String),
    #[error("user \"{0}\" is not part of the evaluation set")]
    UnknownUser(String),
    #[error("user \"{user}\" has {len} items but k is {k}")]
    ListTooLong { user: String, len: usize, k: u32 },
}

/// Average precision of `ranked` truncated at `k`, normalized by
/// `min(k, |relevant|)`.
pub fn average_precision<T: Ord>(
    ranked: &[T],
    relevant: &BTreeSet<T>,
    k: u32,
) -> Result<f64, RankingError> {
    if k == 0 {
        return Err(RankingError::ZeroK);
    }
    if relevant.is_empty() {
        return Err(RankingError::EmptyRelevant);
    }
    let mut seen = BTreeSet::new();
    if !ranked.iter().all(|item| seen.insert(item)) {
        return Err(RankingError::DuplicateRankedItem);
    }
    let cutoff = (k as usize).min(ranked.len());
    let normalizer = (k as usize).min(relevant.len()) as f64;
    let mut hits = 0u32;
    let mut sum = CompensatedSum::new();
    for (i, item) in ranked[..cutoff].iter().enumerate() {
        if relevant.contains(item) {
            hits += 1;
            sum.add(f64::from(hits) / (i + 1) as f64);
        }
    }
    Ok(sum.value() / normalizer)
}

/// Per-user ranked lists, best first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RankingSubmission {
    lists: BTreeMap<String, Vec<String>>,
}

impl RankingSubmission {
    /// Builds a submission, rejecting duplicate users and duplicate items
    /// within a user's list.
    pub fn new(
        lists: impl IntoIterator<Item = (String, Vec<String>)>,
    ) -> Result<Self, RankingError> {
        let mut out = BTreeMap::new();
        for (user, items) in lists {
            let mut seen = BTreeSet::new();
            for item in &items {
                if !seen.insert(item) {
                    return Err(RankingError::DuplicateItem { user, item: item.clone() });
                }
            }
            if out.contains_key(&user) {
                return Err(RankingError::DuplicateUser(user));
            }
            out.insert(user, items);
        }
        Ok(Self { lists: out })
    }

    pub fn list(&self, user: &str) -> Option<&[String]> {
        self.lists.get(user).map(Vec::as_slice)
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.lists.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub positive: bool,
    pub split: Split,
}

/// Holdout labels. Immutable after construction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GroundTruth {
    users: BTreeSet<String>,
    positives: BTreeMap<String, BTreeSet<String>>,
    test_items: BTreeSet<String>,
}

impl GroundTruth {
    pub fn from_interactions(rows: impl IntoIterator<Item = Interaction>) -> Self {
        let mut gt = Self::default();
        for row in rows {
            gt.users.insert(row.user.clone());
            if row.split == Split::Test {
                gt.test_items.insert(row.item.clone());
            }
            if row.positive {
                gt.positives.entry(row.user).or_default().insert(row.item);
            }
        }
        gt
    }

    pub fn knows_user(&self, user: &str) -> bool {
        self.users.contains(user)
    }

    pub fn test_item_universe(&self) -> &BTreeSet<String> {
        &self.test_items
    }

    /// Relevant items for `user` under the given universe.
    pub fn effective_relevant(&self, user: &str, universe: RelevanceUniverse) -> BTreeSet<String> {
        let Some(pos) = self.positives.get(user) else {
            return BTreeSet::new();
        };
        match universe {
            RelevanceUniverse::AllInteractions => pos.clone(),
            RelevanceUniverse::TestOnly => pos.intersection(&self.test_items).cloned().collect(),
        }
    }

    /// Users with a non-empty effective relevant set, in sorted order.
    pub fn evaluated_users(&self, universe: RelevanceUniverse) -> Vec<&str> {
        self.users
            .iter()
            .filter(|u| !self.effective_relevant(u, universe).is_empty())
            .map(String::as_str)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapOutcome {
    pub map: f64,
    pub per_user: Vec<(String, f64)>,
}

impl MapOutcome {
    pub fn evaluated_users(&self) -> u32 {
        self.per_user.len() as u32
    }

    /// Lowercase hex SHA-256 over the per-user AP values (user order,
    /// little-endian f64 bits).
    pub fn ap_digest(&self) -> String {
        let mut h = Sha256::new();
        for (_, ap) in &self.per_user {
            h.update(ap.to_le_bytes());
        }
        hex_lower(&h.finalize())
    }
}

/// MAP@k of a submission against the ground truth.
///
/// Users absent from the submission score 0; users with an empty effective
/// relevant set are excluded from the mean; a submission naming a user the
/// ground truth does not know is rejected whole.
pub fn evaluate_map(
    sub: &RankingSubmission,
    gt: &GroundTruth,
    params: &MapParams,
) -> Result<MapOutcome, RankingError> {
    if params.k == 0 {
        return Err(RankingError::ZeroK);
    }
    for (user, items) in &sub.lists {
        if !gt.knows_user(user) {
            return Err(RankingError::UnknownUser(user.clone()));
        }
        if items.len() > params.k as usize {
            return Err(RankingError::ListTooLong {
                user: user.clone(),
                len: items.len(),
                k: params.k,
            });
        }
    }

    let mut per_user = Vec::new();
    let mut total = CompensatedSum::new();
    for user in gt.evaluated_users(params.relevance_universe) {
        let relevant = gt.effective_relevant(user, params.relevance_universe);
        let ranked: Vec<&String> = match sub.list(user) {
            None => Vec::new(),
            Some(items) => match params.list_filter {
                ListFilter::None => items.iter().collect(),
                ListFilter::TestItemsOnly => {
                    items.iter().filter(|i| gt.test_items.contains(*i)).collect()
                }
            },
        };
        let relevant_refs: BTreeSet<&String> = relevant.iter().collect();
        let ap = average_precision(&ranked, &relevant_refs, params.k)?;
        total.add(ap);
        per_user.push((String::from(user), ap));
    }
    let map = if per_user.is_empty() { 0.0 } else { total.value() / per_user.len() as f64 };
    Ok(MapOutcome { map, per_user })
}

pub(crate) fn hex_lower(bytes: &[u8]) -> String {
    const HEX: &[u8; 16] = b"0123456789abcdef";
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push(HEX[(b >> 4) as usize] as char);
        s.push(HEX[(b & 0x0f) as usize] as char);
    }
    s
}

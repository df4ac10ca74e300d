//! Dataset handling: interaction-log ingestion, the preprocessing and
//! splitting protocol, candidate-set construction, and the synthetic
//! planted-preference generator used by tests and examples.

mod candidates;
pub(crate) mod ingest;
mod preprocess;
pub mod synth;

pub use candidates::{sample_all_candidates, sample_candidate_set};
pub use ingest::{
    load_interactions, read_candidates, read_catalog, read_split, write_candidates,
    write_catalog, write_split, LoadStats,
};
pub use preprocess::{
    build_sequences, preprocess_core, split_leave_one_out, window_sequence,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{PulseError, Result};

pub const CANDIDATES_PER_USER: usize = 10;
pub const NEGATIVES_PER_CANDIDATE_SET: usize = CANDIDATES_PER_USER - 1;
pub const CORE_THRESHOLD: usize = 5;
pub const MAX_SEQ_LEN: usize = 50;

/// One observed user-item interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rating: Option<f32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub review: Option<String>,
}

/// Catalog entry for one item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub title: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub domain: String,
}

/// Item id to metadata, sorted for stable serialization.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemCatalog {
    pub items: BTreeMap<String, ItemMeta>,
}

impl ItemCatalog {
    pub fn resolve(&self, item_id: &str) -> Result<&ItemMeta> {
        self.items
            .get(item_id)
            .ok_or_else(|| PulseError::UnknownItem(item_id.to_string()))
    }

    /// Candidate text used by the scorer: title plus description.
    pub fn item_text(&self, item_id: &str) -> Result<String> {
        let meta = self.resolve(item_id)?;
        if meta.description.is_empty() {
            Ok(meta.title.clone())
        } else {
            Ok(format!("{}. {}", meta.title, meta.description))
        }
    }
}

/// A user's chronologically ordered interactions with aligned side data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSequence {
    pub user_id: String,
    pub items: Vec<String>,
    pub ratings: Vec<Option<f32>>,
    pub reviews: Vec<Option<String>>,
}

impl UserSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Borrowed view of one user's leave-one-out split.
#[derive(Debug, Clone, Copy)]
pub struct SplitParts<'a> {
    /// Everything before the two held-out items.
    pub train: &'a [String],
    /// Second-to-last item, held out for validation.
    pub val: &'a str,
    /// Last item, held out for test.
    pub test: &'a str,
}

/// Leave-one-out split over preprocessed sequences.
///
/// Each user keeps their full sequence; the boundary is positional, so
/// train + val + test always reconstruct the original order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub users: BTreeMap<String, UserSequence>,
}

impl DatasetSplit {
    pub fn parts<'a>(&'a self, user_id: &str) -> Result<SplitParts<'a>> {
        let seq = self.users.get(user_id).ok_or_else(|| {
            PulseError::InvalidArgument(format!("no such user in split: {user_id:?}"))
        })?;
        split_parts(seq)
    }

    /// History visible when predicting the validation item.
    pub fn history_for_val<'a>(&'a self, user_id: &str) -> Result<&'a [String]> {
        Ok(self.parts(user_id)?.train)
    }

    /// History visible when predicting the test item: train plus val.
    pub fn history_for_test<'a>(&'a self, user_id: &str) -> Result<&'a [String]> {
        let seq = &self.users[user_id];
        Ok(&seq.items[..seq.len() - 1])
    }

    /// Training-time supervised pair: the last train item as target, the
    /// items before it as history. Keeps both held-out items unseen.
    pub fn train_pair<'a>(&'a self, user_id: &str) -> Result<(&'a [String], &'a str)> {
        let parts = self.parts(user_id)?;
        if parts.train.len() < 2 {
            return Err(PulseError::SplitError {
                user: user_id.to_string(),
                len: parts.train.len() + 2,
            });
        }
        let (gt, hist) = parts.train.split_last().unwrap();
        Ok((hist, gt))
    }

    pub fn user_ids(&self) -> impl Iterator<Item = &str> {
        self.users.keys().map(|s| s.as_str())
    }
}

pub(crate) fn split_parts(seq: &UserSequence) -> Result<SplitParts<'_>> {
    let n = seq.len();
    if n < 3 {
        return Err(PulseError::SplitError {
            user: seq.user_id.clone(),
            len: n,
        });
    }
    Ok(SplitParts {
        train: &seq.items[..n - 2],
        val: &seq.items[n - 2],
        test: &seq.items[n - 1],
    })
}

/// Fixed 10-item slate for one user: the ground truth plus nine negatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub user_id: String,
    pub candidates: Vec<String>,
    pub ground_truth_index: usize,
}

impl CandidateSet {
    pub fn ground_truth(&self) -> &str {
        &self.candidates[self.ground_truth_index]
    }
}

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{PulseError, Result};

use super::{split_parts, DatasetSplit, InteractionRecord, UserSequence, CORE_THRESHOLD};

/// Clean raw interactions: de-duplicate user-item pairs keeping the earliest
/// timestamp, sort each user chronologically (ties by item id), and apply
/// 5-core filtering of users and items iterated to a fixpoint.
pub fn preprocess_core(records: &[InteractionRecord]) -> Result<Vec<InteractionRecord>> {
    if records.is_empty() {
        return Err(PulseError::EmptyDataset("preprocessing empty input".into()));
    }

    // Earliest record per (user, item); first occurrence wins exact ties.
    let mut dedup: BTreeMap<(String, String), InteractionRecord> = BTreeMap::new();
    for r in records {
        let key = (r.user_id.clone(), r.item_id.clone());
        match dedup.get(&key) {
            Some(kept) if kept.timestamp <= r.timestamp => {}
            _ => {
                dedup.insert(key, r.clone());
            }
        }
    }
    let mut kept: Vec<InteractionRecord> = dedup.into_values().collect();

    // Iterative k-core: drop under-threshold users and items until stable.
    loop {
        let mut user_count: BTreeMap<&str, usize> = BTreeMap::new();
        let mut item_count: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &kept {
            *user_count.entry(&r.user_id).or_default() += 1;
            *item_count.entry(&r.item_id).or_default() += 1;
        }
        let bad_users: BTreeSet<String> = user_count
            .iter()
            .filter(|(_, &c)| c < CORE_THRESHOLD)
            .map(|(u, _)| u.to_string())
            .collect();
        let bad_items: BTreeSet<String> = item_count
            .iter()
            .filter(|(_, &c)| c < CORE_THRESHOLD)
            .map(|(i, _)| i.to_string())
            .collect();
        if bad_users.is_empty() && bad_items.is_empty() {
            break;
        }
        kept.retain(|r| !bad_users.contains(&r.user_id) && !bad_items.contains(&r.item_id));
        if kept.is_empty() {
            return Err(PulseError::EmptyDataset("5-core filtering".into()));
        }
    }

    kept.sort_by(|a, b| {
        (&a.user_id, a.timestamp, &a.item_id).cmp(&(&b.user_id, b.timestamp, &b.item_id))
    });
    Ok(kept)
}

/// Group cleaned records into per-user sequences, preserving their order.
pub fn build_sequences(records: &[InteractionRecord]) -> BTreeMap<String, UserSequence> {
    let mut users: BTreeMap<String, UserSequence> = BTreeMap::new();
    for r in records {
        let seq = users
            .entry(r.user_id.clone())
            .or_insert_with(|| UserSequence {
                user_id: r.user_id.clone(),
                items: Vec::new(),
                ratings: Vec::new(),
                reviews: Vec::new(),
            });
        seq.items.push(r.item_id.clone());
        seq.ratings.push(r.rating);
        seq.reviews.push(r.review.clone());
    }
    users
}

/// Keep each user's most recent `max_len` interactions.
pub fn window_sequence(seq: &UserSequence, max_len: usize) -> UserSequence {
    let n = seq.len();
    if n <= max_len {
        return seq.clone();
    }
    let start = n - max_len;
    UserSequence {
        user_id: seq.user_id.clone(),
        items: seq.items[start..].to_vec(),
        ratings: seq.ratings[start..].to_vec(),
        reviews: seq.reviews[start..].to_vec(),
    }
}

/// Hold out each user's last interaction for test and the second-to-last
/// for validation.
pub fn split_leave_one_out(sequences: &BTreeMap<String, UserSequence>) -> Result<DatasetSplit> {
    if sequences.is_empty() {
        return Err(PulseError::EmptyDataset("splitting empty sequence map".into()));
    }
    for seq in sequences.values() {
        split_parts(seq)?;
    }
    Ok(DatasetSplit {
        users: sequences.clone(),
    })
}

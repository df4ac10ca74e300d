use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PulseError, Result};
use crate::hashing::derive_seed;

use super::{CandidateSet, DatasetSplit, CANDIDATES_PER_USER, NEGATIVES_PER_CANDIDATE_SET};

/// Build one user's 10-item slate: the ground truth at a seeded-random
/// position plus nine negatives sampled uniformly without replacement from
/// the universe, excluding the user's full history.
pub fn sample_candidate_set(
    user_id: &str,
    ground_truth: &str,
    history: &BTreeSet<String>,
    universe: &[String],
    seed: u64,
) -> Result<CandidateSet> {
    let mut eligible: Vec<&String> = universe
        .iter()
        .filter(|i| !history.contains(i.as_str()) && i.as_str() != ground_truth)
        .collect();
    if eligible.len() < NEGATIVES_PER_CANDIDATE_SET {
        return Err(PulseError::CandidatePoolTooSmall {
            user: user_id.to_string(),
            eligible: eligible.len(),
            need: NEGATIVES_PER_CANDIDATE_SET,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (negatives, _) = eligible.partial_shuffle(&mut rng, NEGATIVES_PER_CANDIDATE_SET);
    let gt_index = rng.gen_range(0..CANDIDATES_PER_USER);

    let mut candidates: Vec<String> = Vec::with_capacity(CANDIDATES_PER_USER);
    let mut negs = negatives.iter();
    for pos in 0..CANDIDATES_PER_USER {
        if pos == gt_index {
            candidates.push(ground_truth.to_string());
        } else {
            candidates.push((*negs.next().unwrap()).clone());
        }
    }
    Ok(CandidateSet {
        user_id: user_id.to_string(),
        candidates,
        ground_truth_index: gt_index,
    })
}

/// Slates for every user in the split, with a per-user seed derived from the
/// global seed and a salt naming the slate's role (e.g. "train", "val",
/// "test"). The ground truth per role follows the split protocol; the
/// exclusion set is always the user's full sequence.
pub fn sample_all_candidates(
    split: &DatasetSplit,
    universe: &[String],
    salt: &str,
    global_seed: u64,
) -> Result<BTreeMap<String, CandidateSet>> {
    let mut out = BTreeMap::new();
    for (user_id, seq) in &split.users {
        let parts = split.parts(user_id)?;
        let ground_truth = match salt {
            "train" => split.train_pair(user_id)?.1,
            "val" => parts.val,
            "test" => parts.test,
            other => {
                return Err(PulseError::InvalidArgument(format!(
                    "unknown candidate salt {other:?} (expected train|val|test)"
                )))
            }
        };
        let history: BTreeSet<String> = seq.items.iter().cloned().collect();
        let seed = derive_seed(global_seed, &format!("candidates/{salt}/{user_id}"));
        let set = sample_candidate_set(user_id, ground_truth, &history, universe, seed)?;
        out.insert(user_id.clone(), set);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn universe(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("i{i:04}")).collect()
    }

    #[test]
    fn slate_contract_holds() {
        let uni = universe(50);
        let history: BTreeSet<String> =
            ["i0001", "i0002", "i0003"].iter().map(|s| s.to_string()).collect();
        let set = sample_candidate_set("u", "i0007", &history, &uni, 42).unwrap();
        assert_eq!(set.candidates.len(), 10);
        assert_eq!(set.ground_truth(), "i0007");
        assert_eq!(
            set.candidates.iter().filter(|c| *c == "i0007").count(),
            1
        );
        for (pos, c) in set.candidates.iter().enumerate() {
            if pos != set.ground_truth_index {
                assert!(!history.contains(c), "negative {c} is in history");
            }
        }
        let distinct: BTreeSet<&String> = set.candidates.iter().collect();
        assert_eq!(distinct.len(), 10);
    }

    #[test]
    fn same_seed_reproduces_forced_case_fills() {
        let uni = universe(50);
        let history = BTreeSet::new();
        let a = sample_candidate_set("u", "i0000", &history, &uni, 9).unwrap();
        let b = sample_candidate_set("u", "i0000", &history, &uni, 9).unwrap();
        assert_eq!(a, b);
        let c = sample_candidate_set("u", "i0000", &history, &uni, 10).unwrap();
        assert_ne!(a, c, "seed must matter");
    }

    #[test]
    fn exact_pool_forces_all_negatives() {
        // Universe = history + gt + exactly 9 others.
        let uni = universe(15);
        let history: BTreeSet<String> = uni[..5].iter().cloned().collect();
        let gt = &uni[5];
        let set = sample_candidate_set("u", gt, &history, &uni, 1).unwrap();
        let negatives: BTreeSet<&String> = set
            .candidates
            .iter()
            .enumerate()
            .filter(|(pos, _)| *pos != set.ground_truth_index)
            .map(|(_, c)| c)
            .collect();
        let expected: BTreeSet<&String> = uni[6..].iter().collect();
        assert_eq!(negatives, expected);
    }

    #[test]
    fn undersized_pool_is_rejected() {
        let uni = universe(9);
        let history = BTreeSet::new();
        assert!(matches!(
            sample_candidate_set("u", &uni[0], &history, &uni, 1),
            Err(PulseError::CandidatePoolTooSmall { eligible: 8, .. })
        ));
    }

    #[test]
    fn gt_position_varies_across_users() {
        let uni = universe(60);
        let history = BTreeSet::new();
        let positions: BTreeSet<usize> = (0..40)
            .map(|k| {
                sample_candidate_set(&format!("u{k}"), "i0000", &history, &uni, k)
                    .unwrap()
                    .ground_truth_index
            })
            .collect();
        assert!(positions.len() >= 5, "positions {positions:?} too clustered");
    }
}

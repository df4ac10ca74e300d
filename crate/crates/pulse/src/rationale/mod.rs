//! Rationale generation: prompt construction, depth-2 Tree-of-Thoughts
//! expansion, and the negative-pool rule for contrastive training.
//!
//! Prompt wording lives in `prompts/*.txt` shipped with the crate; builders
//! only fill placeholders, so identical inputs yield identical bytes.

pub mod backend;

pub use backend::{GenerationBackend, HttpBackend, MockBackend};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ItemCatalog, UserSequence};
use crate::error::{PulseError, Result};
use crate::hashing::derive_seed;

pub const MAX_RATIONALE_CHARS: usize = 2048;
pub const GEN_MAX_TOKENS: usize = 256;
pub const GEN_TEMPERATURE: f32 = 0.7;
pub const SIMILAR_ITEM_CAP: usize = 20;
pub const DEFAULT_IN_FLIGHT: usize = 4;

const PHASE1_TEMPLATE: &str = include_str!("../../prompts/phase1.txt");
const PHASE2_TEMPLATE: &str = include_str!("../../prompts/phase2.txt");
const REFINE_TEMPLATE: &str = include_str!("../../prompts/refine.txt");
const CANDIDATES_TEMPLATE: &str = include_str!("../../prompts/candidates.txt");

/// Marker the mock backend uses to tell refinement prompts apart.
pub(crate) const REFINE_MARKER: &str = "Refine this reason";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RationaleKind {
    Positive,
    Negative,
    Base,
    TotNode,
}

/// Position of a node in a rationale tree: level 1 children are (1, i, 0),
/// level 2 leaves are (2, i, j).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreePos {
    pub level: u8,
    pub i: usize,
    pub j: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rationale {
    #[serde(rename = "user_id")]
    pub source_user: String,
    pub kind: RationaleKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tree_pos: Option<TreePos>,
    pub text: String,
}

impl Rationale {
    /// Texts longer than [`MAX_RATIONALE_CHARS`] are clipped rather than
    /// rejected since generation length limits are soft.
    pub fn new(
        source_user: impl Into<String>,
        kind: RationaleKind,
        tree_pos: Option<TreePos>,
        text: impl Into<String>,
    ) -> Result<Self> {
        let mut text: String = text.into();
        if text.trim().is_empty() {
            return Err(PulseError::MissingRationale(
                "rationale text is empty".into(),
            ));
        }
        if text.chars().count() > MAX_RATIONALE_CHARS {
            text = text.chars().take(MAX_RATIONALE_CHARS).collect();
        }
        if kind == RationaleKind::TotNode && tree_pos.is_none() {
            return Err(PulseError::InvalidArgument(
                "tree node rationale needs a tree position".into(),
            ));
        }
        Ok(Rationale {
            source_user: source_user.into(),
            kind,
            tree_pos,
            text,
        })
    }
}

/// Depth-2 tree: one base reason, n children, n*m leaves in (i, j) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleTree {
    pub root: Rationale,
    pub children: Vec<Rationale>,
    pub leaves: Vec<Rationale>,
}

impl RationaleTree {
    pub fn n(&self) -> usize {
        self.children.len()
    }

    pub fn m(&self) -> usize {
        self.leaves.len() / self.children.len().max(1)
    }

    pub fn leaf(&self, i: usize, j: usize) -> &Rationale {
        &self.leaves[i * self.m() + j]
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.len() + self.leaves.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.children.len();
        if n == 0 || self.leaves.is_empty() || self.leaves.len() % n != 0 {
            return Err(PulseError::InvalidArgument(format!(
                "malformed rationale tree: {n} children, {} leaves",
                self.leaves.len()
            )));
        }
        let m = self.leaves.len() / n;
        for (idx, leaf) in self.leaves.iter().enumerate() {
            let want = TreePos {
                level: 2,
                i: idx / m,
                j: idx % m,
            };
            if leaf.tree_pos != Some(want) {
                return Err(PulseError::InvalidArgument(format!(
                    "leaf {idx} has position {:?}, expected {want:?}",
                    leaf.tree_pos
                )));
            }
        }
        Ok(())
    }
}

fn history_block(catalog: &ItemCatalog, seq: &UserSequence, len: usize) -> Result<String> {
    if len == 0 || len > seq.len() {
        return Err(PulseError::InvalidArgument(format!(
            "history length {len} outside [1, {}]",
            seq.len()
        )));
    }
    let mut lines = Vec::with_capacity(len);
    for pos in 0..len {
        let meta = catalog.resolve(&seq.items[pos])?;
        let mut line = format!("- {}", meta.title);
        if let Some(r) = seq.ratings[pos] {
            line.push_str(&format!(" (rating: {r})"));
        }
        if let Some(review) = &seq.reviews[pos] {
            if !review.is_empty() {
                line.push_str(&format!(" | review: {review}"));
            }
        }
        lines.push(line);
    }
    Ok(lines.join("\n"))
}

/// First-phase prompt: the user's history (titles with ratings and reviews
/// where present, in order) followed by the chosen item and an instruction
/// to explain why it was chosen.
pub fn build_phase1_prompt(
    catalog: &ItemCatalog,
    seq: &UserSequence,
    history_len: usize,
    ground_truth: &str,
) -> Result<String> {
    let history = history_block(catalog, seq, history_len)?;
    let target = &catalog.resolve(ground_truth)?.title;
    Ok(PHASE1_TEMPLATE
        .replace("{history}", &history)
        .replace("{target}", target))
}

/// Second-phase prompt: history plus what similar users consumed, asking for
/// a reason about the next choice. Similar items are deduplicated and capped
/// at [`SIMILAR_ITEM_CAP`], most frequent first, ties by title. Candidate
/// titles are only appended when explicitly enabled; the default keeps the
/// slate out of the prompt.
pub fn build_phase2_prompt(
    catalog: &ItemCatalog,
    seq: &UserSequence,
    history_len: usize,
    similar_items: &[String],
    candidates: Option<&[String]>,
) -> Result<String> {
    if similar_items.is_empty() {
        return Err(PulseError::InvalidArgument(
            "similar-user item list is empty".into(),
        ));
    }
    let history = history_block(catalog, seq, history_len)?;

    let mut counts: BTreeMap<&String, usize> = BTreeMap::new();
    for item in similar_items {
        *counts.entry(item).or_insert(0) += 1;
    }
    let mut ranked: Vec<(&String, usize, String)> = Vec::with_capacity(counts.len());
    for (item, count) in counts {
        ranked.push((item, count, catalog.resolve(item)?.title.clone()));
    }
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.2.cmp(&b.2)));
    ranked.truncate(SIMILAR_ITEM_CAP);
    let similar: Vec<String> = ranked.iter().map(|(_, _, t)| format!("- {t}")).collect();

    let mut prompt = PHASE2_TEMPLATE
        .replace("{history}", &history)
        .replace("{similar}", &similar.join("\n"));
    if let Some(cands) = candidates {
        let mut lines = Vec::with_capacity(cands.len());
        for c in cands {
            lines.push(format!("- {}", catalog.resolve(c)?.title));
        }
        prompt.push('\n');
        prompt.push_str(&CANDIDATES_TEMPLATE.replace("{candidates}", &lines.join("\n")));
    }
    Ok(prompt)
}

pub fn build_refine_prompt(parent_text: &str) -> String {
    REFINE_TEMPLATE.replace("{parent}", parent_text)
}

fn request(prompt: String, seed: u64) -> backend::GenerationRequest {
    backend::GenerationRequest {
        prompt,
        max_tokens: GEN_MAX_TOKENS,
        temperature: GEN_TEMPERATURE,
        seed: Some(seed),
    }
}

/// Expand one base reason into a depth-2 tree: n refinements of the root,
/// then m refinements of each child, issuing exactly n + n*m generation
/// calls. Any backend failure rejects the whole tree.
pub fn expand_tot(
    backend: &dyn GenerationBackend,
    base: &Rationale,
    n: usize,
    m: usize,
    seed: u64,
    in_flight: usize,
) -> Result<RationaleTree> {
    if n == 0 || m == 0 {
        return Err(PulseError::InvalidArgument(format!(
            "tree branching must be positive, got n={n} m={m}"
        )));
    }
    let user = &base.source_user;

    let child_reqs: Vec<_> = (0..n)
        .map(|i| {
            request(
                build_refine_prompt(&base.text),
                derive_seed(seed, &format!("tot/1/{i}/0")),
            )
        })
        .collect();
    let child_texts = backend::run_requests(backend, child_reqs, in_flight)?;
    let mut children = Vec::with_capacity(n);
    for (i, resp) in child_texts.into_iter().enumerate() {
        children.push(Rationale::new(
            user.clone(),
            RationaleKind::TotNode,
            Some(TreePos { level: 1, i, j: 0 }),
            resp.text,
        )?);
    }

    let mut leaf_reqs = Vec::with_capacity(n * m);
    for (i, child) in children.iter().enumerate() {
        for j in 0..m {
            leaf_reqs.push(request(
                build_refine_prompt(&child.text),
                derive_seed(seed, &format!("tot/2/{i}/{j}")),
            ));
        }
    }
    let leaf_texts = backend::run_requests(backend, leaf_reqs, in_flight)?;
    let mut leaves = Vec::with_capacity(n * m);
    for (idx, resp) in leaf_texts.into_iter().enumerate() {
        leaves.push(Rationale::new(
            user.clone(),
            RationaleKind::TotNode,
            Some(TreePos {
                level: 2,
                i: idx / m,
                j: idx % m,
            }),
            resp.text,
        )?);
    }

    let tree = RationaleTree {
        root: base.clone(),
        children,
        leaves,
    };
    tree.validate()?;
    Ok(tree)
}

/// Contrastive negatives: within each batch, a user's negatives are exactly
/// the other members' positive rationales, relabeled as negative but keeping
/// their original source user.
pub fn gen_negative_pool(
    positives: &BTreeMap<String, Rationale>,
    batches: &[Vec<String>],
) -> Result<BTreeMap<String, Vec<Rationale>>> {
    let mut pools: BTreeMap<String, Vec<Rationale>> = BTreeMap::new();
    for batch in batches {
        if batch.len() < 2 {
            return Err(PulseError::NoNegativesAvailable(format!(
                "batch of {} users cannot supply cross-user negatives",
                batch.len()
            )));
        }
        for user in batch {
            if !positives.contains_key(user) {
                return Err(PulseError::MissingRationale(format!(
                    "no positive rationale for user {user}"
                )));
            }
        }
        for anchor in batch {
            let pool = pools.entry(anchor.clone()).or_default();
            for other in batch {
                if other == anchor {
                    continue;
                }
                let mut neg = positives[other].clone();
                neg.kind = RationaleKind::Negative;
                pool.push(neg);
            }
        }
    }
    Ok(pools)
}

pub fn write_rationales(path: &Path, rationales: &[Rationale]) -> Result<()> {
    crate::data::ingest::write_jsonl(path, rationales.iter())
}

pub fn read_rationales(path: &Path) -> Result<Vec<Rationale>> {
    crate::data::ingest::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::backend::GenerationResponse;
    use super::*;
    use crate::data::ItemMeta;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn catalog_of(titles: &[(&str, &str)]) -> ItemCatalog {
        let mut catalog = ItemCatalog::default();
        for (id, title) in titles {
            catalog.items.insert(
                id.to_string(),
                ItemMeta {
                    title: title.to_string(),
                    description: String::new(),
                    domain: "test".into(),
                },
            );
        }
        catalog
    }

    fn seq(items: &[&str]) -> UserSequence {
        UserSequence {
            user_id: "u1".into(),
            items: items.iter().map(|s| s.to_string()).collect(),
            ratings: vec![None; items.len()],
            reviews: vec![None; items.len()],
        }
    }

    #[test]
    fn phase1_prompt_keeps_order_and_side_data() {
        let catalog = catalog_of(&[("a", "amber soap"), ("b", "basil tea"), ("c", "cedar box")]);
        let mut s = seq(&["a", "b", "c"]);
        s.ratings[0] = Some(5.0);
        s.reviews[0] = Some("great scent".into());
        s.reviews[1] = Some(String::new());
        let prompt = build_phase1_prompt(&catalog, &s, 2, "c").unwrap();

        let pa = prompt.find("amber soap").unwrap();
        let pb = prompt.find("basil tea").unwrap();
        let pc = prompt.find("cedar box").unwrap();
        assert!(pa < pb && pb < pc, "titles out of order");
        assert!(prompt.contains("rating: 5"));
        assert!(prompt.contains("review: great scent"));
        assert!(!prompt.contains("review: \n"), "empty review line leaked");
        assert!(prompt.to_lowercase().contains("why"));
        assert_eq!(prompt, build_phase1_prompt(&catalog, &s, 2, "c").unwrap());
    }

    #[test]
    fn phase1_rejects_unknown_items() {
        let catalog = catalog_of(&[("a", "amber soap")]);
        let s = seq(&["a", "zz"]);
        assert!(matches!(
            build_phase1_prompt(&catalog, &s, 2, "a"),
            Err(PulseError::UnknownItem(_))
        ));
    }

    #[test]
    fn phase2_dedups_and_caps_similar_items() {
        let ids: Vec<String> = (0..30).map(|i| format!("s{i:02}")).collect();
        let mut entries: Vec<(&str, &str)> = vec![("h1", "history one")];
        let titles: Vec<String> = (0..30).map(|i| format!("similar title {i:02}")).collect();
        for (i, id) in ids.iter().enumerate() {
            entries.push((id, &titles[i]));
        }
        let catalog = catalog_of(&entries);
        let s = seq(&["h1"]);

        // s00 appears three times, s01 twice, everything else once.
        let mut similar: Vec<String> = ids.clone();
        similar.push("s00".into());
        similar.push("s00".into());
        similar.push("s01".into());
        let prompt = build_phase2_prompt(&catalog, &s, 1, &similar, None).unwrap();

        assert_eq!(prompt.matches("similar title 00").count(), 1, "not deduped");
        let retained = (0..30)
            .filter(|i| prompt.contains(&format!("similar title {i:02}")))
            .count();
        assert_eq!(retained, SIMILAR_ITEM_CAP);
        // Most frequent first; ties fall back to title order, so the last
        // two singletons (28, 29) are the ones cut.
        assert!(prompt.contains("similar title 19"));
        assert!(!prompt.contains("similar title 28"));
        assert!(!prompt.contains("similar title 29"));
        let p0 = prompt.find("similar title 00").unwrap();
        let p1 = prompt.find("similar title 01").unwrap();
        let p2 = prompt.find("similar title 02").unwrap();
        assert!(p0 < p1 && p1 < p2);
        assert!(!prompt.contains("Candidate items"));
    }

    #[test]
    fn phase2_candidate_section_is_opt_in() {
        let catalog = catalog_of(&[("h1", "history one"), ("s1", "similar one"), ("c1", "cand one")]);
        let s = seq(&["h1"]);
        let similar = vec!["s1".to_string()];
        let with = build_phase2_prompt(&catalog, &s, 1, &similar, Some(&["c1".to_string()]))
            .unwrap();
        assert!(with.contains("Candidate items"));
        assert!(with.contains("cand one"));
    }

    /// Backend that counts calls and can fail from a given call onward.
    struct CountingBackend {
        calls: AtomicUsize,
        fail_from: usize,
    }

    impl CountingBackend {
        fn new(fail_from: usize) -> Self {
            CountingBackend {
                calls: AtomicUsize::new(0),
                fail_from,
            }
        }
    }

    impl GenerationBackend for CountingBackend {
        fn generate(
            &self,
            req: &backend::GenerationRequest,
        ) -> Result<GenerationResponse> {
            let k = self.calls.fetch_add(1, Ordering::SeqCst);
            if k >= self.fail_from {
                return Err(PulseError::BackendUnavailable {
                    attempts: 1,
                    detail: "injected".into(),
                });
            }
            Ok(GenerationResponse {
                text: format!("reason {} of seed {:?}", k, req.seed),
                logprob: Some(-1.0),
            })
        }
    }

    fn base() -> Rationale {
        Rationale::new("u1", RationaleKind::Base, None, "likes amber things").unwrap()
    }

    #[test]
    fn expand_tot_issues_exactly_n_plus_nm_calls() {
        let be = CountingBackend::new(usize::MAX);
        let tree = expand_tot(&be, &base(), 3, 3, 42, 1).unwrap();
        assert_eq!(be.calls.load(Ordering::SeqCst), 12);
        assert_eq!(tree.node_count(), 13);
        assert_eq!(tree.leaves.len(), 9);
        assert_eq!(
            tree.leaf(2, 1).tree_pos,
            Some(TreePos { level: 2, i: 2, j: 1 })
        );
        for leaf in &tree.leaves {
            assert_eq!(leaf.kind, RationaleKind::TotNode);
            assert_eq!(leaf.source_user, "u1");
        }
    }

    #[test]
    fn expand_tot_degenerate_tree() {
        let be = CountingBackend::new(usize::MAX);
        let tree = expand_tot(&be, &base(), 1, 1, 0, 1).unwrap();
        assert_eq!(be.calls.load(Ordering::SeqCst), 2);
        assert_eq!(tree.node_count(), 3);
    }

    #[test]
    fn expand_tot_rejects_partial_trees() {
        let be = CountingBackend::new(7);
        assert!(expand_tot(&be, &base(), 3, 3, 0, 1).is_err());
    }

    #[test]
    fn expand_tot_is_deterministic_with_mock() {
        let be = MockBackend::synthetic(5);
        let a = expand_tot(&be, &base(), 2, 2, 9, 1).unwrap();
        let b = expand_tot(&be, &base(), 2, 2, 9, 4).unwrap();
        assert_eq!(a, b, "in-flight cap changed the tree");
    }

    #[test]
    fn negative_pools_only_cross_users() {
        let mut positives = BTreeMap::new();
        for u in ["u1", "u2", "u3"] {
            positives.insert(
                u.to_string(),
                Rationale::new(u, RationaleKind::Positive, None, format!("{u} likes x"))
                    .unwrap(),
            );
        }
        let batches = vec![vec!["u1".to_string(), "u2".to_string()]];
        let pools = gen_negative_pool(&positives, &batches).unwrap();
        assert_eq!(pools["u1"].len(), 1);
        assert_eq!(pools["u1"][0].source_user, "u2");
        assert_eq!(pools["u1"][0].kind, RationaleKind::Negative);
        assert_eq!(pools["u2"][0].source_user, "u1");

        let big: Vec<String> = (0..32).map(|i| format!("b{i:02}")).collect();
        let mut positives = BTreeMap::new();
        for u in &big {
            positives.insert(
                u.clone(),
                Rationale::new(u, RationaleKind::Positive, None, format!("{u} text")).unwrap(),
            );
        }
        let pools = gen_negative_pool(&positives, &[big.clone()]).unwrap();
        for u in &big {
            assert_eq!(pools[u].len(), 31);
            assert!(pools[u].iter().all(|r| &r.source_user != u));
        }
    }

    #[test]
    fn singleton_batch_has_no_negatives() {
        let mut positives = BTreeMap::new();
        positives.insert(
            "u1".to_string(),
            Rationale::new("u1", RationaleKind::Positive, None, "alone").unwrap(),
        );
        assert!(matches!(
            gen_negative_pool(&positives, &[vec!["u1".to_string()]]),
            Err(PulseError::NoNegativesAvailable(_))
        ));
    }

    #[test]
    fn rationale_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rationales.jsonl");
        let rows = vec![
            Rationale::new("u1", RationaleKind::Positive, None, "plain positive").unwrap(),
            Rationale::new(
                "u2",
                RationaleKind::TotNode,
                Some(TreePos { level: 2, i: 1, j: 0 }),
                "leaf text",
            )
            .unwrap(),
        ];
        write_rationales(&path, &rows).unwrap();
        let back = read_rationales(&path).unwrap();
        assert_eq!(rows, back);
        let raw = std::fs::read_to_string(&path).unwrap();
        assert!(raw.lines().next().unwrap().contains("\"user_id\":\"u1\""));
        assert!(!raw.lines().next().unwrap().contains("tree_pos"));
    }

    #[test]
    fn oversized_text_is_clipped_and_empty_rejected() {
        let long = "x".repeat(MAX_RATIONALE_CHARS + 100);
        let r = Rationale::new("u", RationaleKind::Base, None, long).unwrap();
        assert_eq!(r.text.chars().count(), MAX_RATIONALE_CHARS);
        assert!(Rationale::new("u", RationaleKind::Base, None, "  ").is_err());
        assert!(Rationale::new("u", RationaleKind::TotNode, None, "no pos").is_err());
    }
}

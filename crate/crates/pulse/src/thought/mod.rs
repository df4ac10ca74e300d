//! First training phase: align rationales with behavioral text in one
//! embedding space via a contrastive objective, then use the learned
//! agreement score to pick the best leaf of a rationale tree.

mod encoder;
mod pca;

pub use encoder::{EncoderConfig, ThoughtSpace, E1_PREFIX, E2_PREFIX};
pub use pca::{project_embeddings_2d, write_projection_csv, PROJECTION_HEADER};

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ItemCatalog, UserSequence};
use crate::error::{PulseError, Result};
use crate::hashing::derive_seed;
use crate::rationale::{Rationale, RationaleTree, TreePos};
use crate::tensor::optim::{AdamW, LrSchedule};
use crate::tensor::{write_checkpoint, Binder, Tape, Var};

pub const NEGATIVES_PER_USER: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThoughtSpaceConfig {
    pub encoder: EncoderConfig,
    pub temperature: f32,
    pub batch_size: usize,
    pub lr_encoders: f32,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub weight_decay: f32,
    pub seed: u64,
}

impl Default for ThoughtSpaceConfig {
    fn default() -> Self {
        ThoughtSpaceConfig {
            encoder: EncoderConfig::default(),
            temperature: 0.07,
            batch_size: 32,
            lr_encoders: 2e-5,
            epochs: 5,
            warmup_fraction: 0.10,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl ThoughtSpaceConfig {
    fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(PulseError::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.batch_size < 2 || self.epochs == 0 {
            return Err(PulseError::InvalidArgument(
                "batch_size must be >= 2 and epochs positive".into(),
            ));
        }
        Ok(())
    }
}

/// Serialized view of one user's history joined with the chosen next item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehavioralText {
    pub user_id: String,
    pub text: String,
}

/// "history: <t1> | <t2> ; next: <gt>" over catalog titles. Any '|' inside
/// a title is mapped to '¦' so the separator stays unambiguous.
pub fn build_behavior_text(
    seq: &UserSequence,
    history_len: usize,
    ground_truth: &str,
    catalog: &ItemCatalog,
) -> Result<BehavioralText> {
    if history_len == 0 || history_len > seq.len() {
        return Err(PulseError::InvalidArgument(format!(
            "history length {history_len} outside [1, {}]",
            seq.len()
        )));
    }
    let escape = |t: &str| t.replace('|', "¦");
    let mut titles = Vec::with_capacity(history_len);
    for item in &seq.items[..history_len] {
        titles.push(escape(&catalog.resolve(item)?.title));
    }
    let gt_title = escape(&catalog.resolve(ground_truth)?.title);
    Ok(BehavioralText {
        user_id: seq.user_id.clone(),
        text: format!("history: {} ; next: {}", titles.join(" | "), gt_title),
    })
}

/// "history: <t1> | <t2>" with the same escaping but no next-item clause.
/// This is what the candidate scorer sees, where the next item is exactly
/// what must stay hidden.
pub fn build_history_text(
    seq: &UserSequence,
    history_len: usize,
    catalog: &ItemCatalog,
) -> Result<String> {
    if history_len == 0 || history_len > seq.len() {
        return Err(PulseError::InvalidArgument(format!(
            "history length {history_len} outside [1, {}]",
            seq.len()
        )));
    }
    let escape = |t: &str| t.replace('|', "¦");
    let mut titles = Vec::with_capacity(history_len);
    for item in &seq.items[..history_len] {
        titles.push(escape(&catalog.resolve(item)?.title));
    }
    Ok(format!("history: {}", titles.join(" | ")))
}

/// One user's contrastive example: their positive, ten borrowed negatives,
/// and the behavior anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveExample {
    pub user_id: String,
    pub positive: Rationale,
    pub negatives: Vec<Rationale>,
    pub behavior: BehavioralText,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub examples: Vec<ContrastiveExample>,
}

/// Assemble a batch: each user's negatives are sampled from the other batch
/// members' positives, without replacement when at least ten others exist,
/// with replacement (and a warning) otherwise.
pub fn sample_rationale_negatives(
    batch_users: &[String],
    positives: &BTreeMap<String, Rationale>,
    behaviors: &BTreeMap<String, BehavioralText>,
    negatives_per_user: usize,
    seed: u64,
) -> Result<ContrastiveBatch> {
    if batch_users.len() < 2 {
        return Err(PulseError::NoNegativesAvailable(format!(
            "batch of {} users",
            batch_users.len()
        )));
    }
    for user in batch_users {
        if !positives.contains_key(user) {
            return Err(PulseError::MissingRationale(user.clone()));
        }
        if !behaviors.contains_key(user) {
            return Err(PulseError::InvalidArgument(format!(
                "no behavior text for user {user}"
            )));
        }
    }

    let mut examples = Vec::with_capacity(batch_users.len());
    for user in batch_users {
        let mut others: Vec<&String> = batch_users.iter().filter(|u| *u != user).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("negatives/{user}")));
        let sources: Vec<&String> = if others.len() >= negatives_per_user {
            let (picked, _) = others.partial_shuffle(&mut rng, negatives_per_user);
            picked.to_vec()
        } else {
            log::warn!(
                "user {user}: only {} negative sources for {negatives_per_user} negatives, sampling with replacement",
                others.len()
            );
            (0..negatives_per_user)
                .map(|_| others[rand::Rng::gen_range(&mut rng, 0..others.len())])
                .collect()
        };
        let negatives = sources
            .into_iter()
            .map(|src| {
                let mut r = positives[src].clone();
                r.kind = crate::rationale::RationaleKind::Negative;
                r
            })
            .collect();
        examples.push(ContrastiveExample {
            user_id: user.clone(),
            positive: positives[user].clone(),
            negatives,
            behavior: behaviors[user].clone(),
        });
    }
    Ok(ContrastiveBatch { examples })
}

/// The contrastive loss for one user, computed outside any graph:
/// -log( e^{cos(p,h)/τ} / (e^{cos(p,h)/τ} + Σ_j e^{cos(n_j,h)/τ}) ).
pub fn infonce_loss(
    z_p: &[f32],
    z_h: &[f32],
    z_negatives: &[Vec<f32>],
    temperature: f32,
) -> Result<f32> {
    if z_negatives.is_empty() {
        return Err(PulseError::InvalidArgument(
            "contrastive loss needs at least one negative".into(),
        ));
    }
    if !(temperature > 0.0) {
        return Err(PulseError::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut logits = Vec::with_capacity(z_negatives.len() + 1);
    logits.push(crate::tensor::cosine_similarity(z_p, z_h)? / temperature);
    for z_n in z_negatives {
        logits.push(crate::tensor::cosine_similarity(z_n, z_h)? / temperature);
    }
    crate::tensor::cross_entropy(&logits, 0)
}

/// Cosine between the rationale's E1 embedding and the behavior's E2
/// embedding.
pub fn agreement_score(space: &ThoughtSpace, rationale: &str, behavior: &str) -> Result<f32> {
    let z_r = space.encode_rationale(rationale)?;
    let z_h = space.encode_behavior(behavior)?;
    crate::tensor::cosine_similarity(&z_r, &z_h)
}

/// The selected leaf of a tree: highest agreement, ties to the smallest
/// (i, j).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedRationale {
    pub user_id: String,
    pub text: String,
    pub score: f32,
    pub tree_pos: TreePos,
}

/// Score every leaf against the behavior text and return the argmax. Only
/// leaves compete; inner nodes are scaffolding. Encoders are read-only.
pub fn select_best_rationale(
    space: &ThoughtSpace,
    tree: &RationaleTree,
    behavior: &BehavioralText,
) -> Result<SelectedRationale> {
    tree.validate().map_err(|_| {
        PulseError::InvalidArgument("cannot select from a malformed or empty tree".into())
    })?;
    let z_h = space.encode_behavior(&behavior.text)?;
    let mut best: Option<SelectedRationale> = None;
    for leaf in &tree.leaves {
        let z_r = space.encode_rationale(&leaf.text)?;
        let score = crate::tensor::cosine_similarity(&z_r, &z_h)?;
        // Strictly greater keeps the first (lowest (i, j)) of any ties,
        // since leaves are stored in (i, j) order.
        if best.as_ref().map_or(true, |b| score > b.score) {
            best = Some(SelectedRationale {
                user_id: leaf.source_user.clone(),
                text: leaf.text.clone(),
                score,
                tree_pos: leaf.tree_pos.unwrap(),
            });
        }
    }
    Ok(best.unwrap())
}

pub fn write_selected(path: &Path, selected: &[SelectedRationale]) -> Result<()> {
    crate::data::ingest::write_jsonl(path, selected.iter())
}

pub fn read_selected(path: &Path) -> Result<Vec<SelectedRationale>> {
    crate::data::ingest::read_jsonl(path)
}

/// Graph-side loss for one batch, reusing each member's encoded positive as
/// the others' negatives.
fn batch_loss(
    space: &ThoughtSpace,
    tape: &mut Tape,
    binder: &mut Binder,
    batch: &ContrastiveBatch,
    token_cache: &BTreeMap<String, (Vec<usize>, Vec<usize>)>,
    temperature: f32,
) -> Result<Var> {
    let (rat_prefix, beh_prefix) = space.prefixes();
    let mut z_pos: BTreeMap<&str, Var> = BTreeMap::new();
    let mut z_beh: BTreeMap<&str, Var> = BTreeMap::new();
    for ex in &batch.examples {
        let (rat_tokens, beh_tokens) = &token_cache[&ex.user_id];
        z_pos.insert(
            ex.user_id.as_str(),
            space.forward(tape, binder, rat_prefix, rat_tokens)?,
        );
        z_beh.insert(
            ex.user_id.as_str(),
            space.forward(tape, binder, beh_prefix, beh_tokens)?,
        );
    }

    let mut losses = Vec::with_capacity(batch.examples.len());
    for ex in &batch.examples {
        let zh = z_beh[ex.user_id.as_str()];
        let mut sims = Vec::with_capacity(1 + ex.negatives.len());
        sims.push(tape.cosine(z_pos[ex.user_id.as_str()], zh)?);
        for neg in &ex.negatives {
            sims.push(tape.cosine(z_pos[neg.source_user.as_str()], zh)?);
        }
        let stacked = tape.stack_scalars(&sims)?;
        let scaled = tape.scale(stacked, 1.0 / temperature)?;
        losses.push(tape.cross_entropy(scaled, 0)?);
    }
    tape.mean_scalars(&losses)
}

/// Train both encoders jointly. Returns the trained space and per-epoch
/// mean losses; when `checkpoint_dir` is given, parameters are saved after
/// every epoch as `thought_epoch{K}.ckpt`.
pub fn train_thought_space(
    positives: &BTreeMap<String, Rationale>,
    behaviors: &BTreeMap<String, BehavioralText>,
    config: &ThoughtSpaceConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(ThoughtSpace, Vec<f64>)> {
    config.validate()?;
    let space = ThoughtSpace::new(config.encoder.clone(), config.seed)?;
    train_thought_space_from(space, positives, behaviors, config, checkpoint_dir)
}

/// Same loop but starting from an existing (possibly externally seeded)
/// space.
pub fn train_thought_space_from(
    mut space: ThoughtSpace,
    positives: &BTreeMap<String, Rationale>,
    behaviors: &BTreeMap<String, BehavioralText>,
    config: &ThoughtSpaceConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<(ThoughtSpace, Vec<f64>)> {
    config.validate()?;
    let users: Vec<String> = positives.keys().cloned().collect();
    if users.len() < 2 {
        return Err(PulseError::NoNegativesAvailable(format!(
            "{} training users",
            users.len()
        )));
    }
    for user in &users {
        if !behaviors.contains_key(user) {
            return Err(PulseError::InvalidArgument(format!(
                "no behavior text for user {user}"
            )));
        }
    }

    let mut token_cache: BTreeMap<String, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for user in &users {
        token_cache.insert(
            user.clone(),
            (
                space.tokens(&positives[user].text)?,
                space.tokens(&behaviors[user].text)?,
            ),
        );
    }

    let steps_per_epoch = users.len().div_ceil(config.batch_size);
    let schedule = LrSchedule::warmup_fraction(
        config.lr_encoders,
        (steps_per_epoch * config.epochs) as u64,
        config.warmup_fraction,
    );
    let mut opt = AdamW::new(config.weight_decay);
    let mut curve = Vec::with_capacity(config.epochs);
    let mut step: u64 = 0;

    for epoch in 0..config.epochs {
        let mut order = users.clone();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &format!("thought/epoch/{epoch}")));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            if chunk.len() < 2 {
                log::warn!("skipping trailing batch of 1 user");
                continue;
            }
            let batch = sample_rationale_negatives(
                chunk,
                positives,
                behaviors,
                NEGATIVES_PER_USER,
                derive_seed(config.seed, &format!("thought/neg/{epoch}/{batch_idx}")),
            )?;
            let mut tape = Tape::new();
            let mut binder = Binder::new(&space.params, true);
            let loss = batch_loss(
                &space,
                &mut tape,
                &mut binder,
                &batch,
                &token_cache,
                config.temperature,
            )?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(PulseError::TrainingDiverged { step: step as usize });
            }
            epoch_loss += loss_val as f64;
            batches += 1;
            let grads = tape.backward(loss)?;
            let named = binder.collect_grads(&grads);
            opt.step(&mut space.params, &named, schedule.lr_at(step))?;
            step += 1;
        }

        let mean = epoch_loss / batches.max(1) as f64;
        curve.push(mean);
        log::info!("thought-space epoch {epoch}: mean loss {mean:.4}");
        if let Some(dir) = checkpoint_dir {
            write_checkpoint(&dir.join(format!("thought_epoch{epoch}.ckpt")), &space.params)?;
        }
    }
    Ok((space, curve))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ItemMeta;
    use crate::rationale::RationaleKind;

    fn catalog() -> ItemCatalog {
        let mut c = ItemCatalog::default();
        for (id, title) in [
            ("i1", "amber soap"),
            ("i2", "weird | title"),
            ("i3", "cedar box"),
        ] {
            c.items.insert(
                id.to_string(),
                ItemMeta {
                    title: title.to_string(),
                    description: String::new(),
                    domain: "d".into(),
                },
            );
        }
        c
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
    fn behavior_text_format_and_escaping() {
        let c = catalog();
        let s = seq(&["i1", "i2", "i3"]);
        let b = build_behavior_text(&s, 2, "i3", &c).unwrap();
        assert_eq!(b.text, "history: amber soap | weird ¦ title ; next: cedar box");
        assert_eq!(b, build_behavior_text(&s, 2, "i3", &c).unwrap());

        let single = build_behavior_text(&s, 1, "i3", &c).unwrap();
        assert_eq!(single.text, "history: amber soap ; next: cedar box");
        assert!(build_behavior_text(&s, 2, "zz", &c).is_err());
    }

    fn fixtures(n: usize) -> (BTreeMap<String, Rationale>, BTreeMap<String, BehavioralText>) {
        let mut positives = BTreeMap::new();
        let mut behaviors = BTreeMap::new();
        for k in 0..n {
            let u = format!("u{k:02}");
            positives.insert(
                u.clone(),
                Rationale::new(&u, RationaleKind::Positive, None, format!("likes trait {k}"))
                    .unwrap(),
            );
            behaviors.insert(
                u.clone(),
                BehavioralText {
                    user_id: u.clone(),
                    text: format!("history: item {k} ; next: item {}", k + 1),
                },
            );
        }
        (positives, behaviors)
    }

    #[test]
    fn negative_sampling_contract() {
        let (positives, behaviors) = fixtures(32);
        let users: Vec<String> = positives.keys().cloned().collect();
        let batch =
            sample_rationale_negatives(&users, &positives, &behaviors, 10, 7).unwrap();
        for ex in &batch.examples {
            assert_eq!(ex.negatives.len(), 10);
            let sources: std::collections::BTreeSet<&str> =
                ex.negatives.iter().map(|n| n.source_user.as_str()).collect();
            assert_eq!(sources.len(), 10, "negatives must be distinct sources");
            assert!(!sources.contains(ex.user_id.as_str()));
        }
        let again = sample_rationale_negatives(&users, &positives, &behaviors, 10, 7).unwrap();
        assert_eq!(batch, again);
        let other = sample_rationale_negatives(&users, &positives, &behaviors, 10, 8).unwrap();
        assert_ne!(batch, other);
    }

    #[test]
    fn small_batches_fall_back_to_replacement() {
        let (positives, behaviors) = fixtures(5);
        let users: Vec<String> = positives.keys().cloned().collect();
        let batch =
            sample_rationale_negatives(&users, &positives, &behaviors, 10, 1).unwrap();
        for ex in &batch.examples {
            assert_eq!(ex.negatives.len(), 10);
            assert!(ex.negatives.iter().all(|n| n.source_user != ex.user_id));
        }
        let solo = vec!["u00".to_string()];
        assert!(matches!(
            sample_rationale_negatives(&solo, &positives, &behaviors, 10, 1),
            Err(PulseError::NoNegativesAvailable(_))
        ));
    }

    #[test]
    fn infonce_matches_hand_oracles() {
        // Perfect positive, orthogonal negatives, tau 1.
        let d = 4;
        let z_h = vec![1.0, 0.0, 0.0, 0.0];
        let z_p = z_h.clone();
        let z_n = vec![vec![0.0, 1.0, 0.0, 0.0]; 10];
        let loss = infonce_loss(&z_p, &z_h, &z_n, 1.0).unwrap();
        let expected = (1.0f64 + 10.0 / std::f64::consts::E).ln();
        assert!(
            (loss as f64 - expected).abs() < 1e-4,
            "loss {loss} vs {expected}"
        );

        // All similarities equal: uniform over 11.
        let z_p = z_h.clone();
        let z_n = vec![z_h.clone(); 10];
        let loss = infonce_loss(&z_p, &z_h, &z_n, 1.0).unwrap();
        assert!((loss as f64 - 11.0f64.ln()).abs() < 1e-6);
        let _ = d;
    }

    #[test]
    fn infonce_decreases_as_positive_aligns() {
        let z_h = vec![1.0, 0.0];
        let negs = vec![vec![0.0, 1.0]; 10];
        let mut last = f32::INFINITY;
        for steps in 0..=4 {
            let angle = std::f32::consts::FRAC_PI_2 * (1.0 - steps as f32 / 4.0);
            let z_p = vec![angle.cos(), angle.sin()];
            let loss = infonce_loss(&z_p, &z_h, &negs, 0.5).unwrap();
            assert!(loss < last, "loss must fall as cos rises");
            last = loss;
        }
    }

    #[test]
    fn infonce_rejects_bad_inputs() {
        let v = vec![1.0, 0.0];
        assert!(infonce_loss(&v, &v, &[], 1.0).is_err());
        assert!(infonce_loss(&v, &v, &[v.clone()], 0.0).is_err());
    }

    #[test]
    fn infonce_respects_unit_vector_bounds() {
        // loss in [0, ln(1 + M e^{2/tau})] for unit vectors.
        let tau = 0.5f32;
        let m = 10;
        let bound = (1.0 + m as f64 * (2.0f64 / tau as f64).exp()).ln();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let unit = |rng: &mut rand_chacha::ChaCha8Rng| {
                let mut v: Vec<f32> = (0..8).map(|_| rand::Rng::gen_range(rng, -1.0..1.0)).collect();
                crate::tensor::l2_normalize(&mut v).unwrap();
                v
            };
            let z_h = unit(&mut rng);
            let z_p = unit(&mut rng);
            let negs: Vec<Vec<f32>> = (0..m).map(|_| unit(&mut rng)).collect();
            let loss = infonce_loss(&z_p, &z_h, &negs, tau).unwrap() as f64;
            assert!(loss >= 0.0 && loss <= bound, "loss {loss} outside [0, {bound}]");
        }
    }

    fn training_fixture(
        n: usize,
    ) -> (BTreeMap<String, Rationale>, BTreeMap<String, BehavioralText>) {
        // Planted signal: user k prefers trait word A or B by parity; the
        // rationale names the same word as the behavior text.
        let mut positives = BTreeMap::new();
        let mut behaviors = BTreeMap::new();
        for k in 0..n {
            let word = if k % 2 == 0 { "amber" } else { "basil" };
            let u = format!("u{k:02}");
            positives.insert(
                u.clone(),
                Rationale::new(
                    &u,
                    RationaleKind::Positive,
                    None,
                    format!("the user clearly prefers {word} products"),
                )
                .unwrap(),
            );
            behaviors.insert(
                u.clone(),
                BehavioralText {
                    user_id: u.clone(),
                    text: format!(
                        "history: {word} soap {k} | {word} candle ; next: {word} oil"
                    ),
                },
            );
        }
        (positives, behaviors)
    }

    fn separation(
        space: &ThoughtSpace,
        positives: &BTreeMap<String, Rationale>,
        behaviors: &BTreeMap<String, BehavioralText>,
    ) -> f64 {
        let users: Vec<&String> = positives.keys().collect();
        let mut pos_sum = 0.0f64;
        let mut neg_sum = 0.0f64;
        let mut neg_n = 0usize;
        for (idx, u) in users.iter().enumerate() {
            let z_h = space.encode_behavior(&behaviors[*u].text).unwrap();
            let z_p = space.encode_rationale(&positives[*u].text).unwrap();
            pos_sum += crate::tensor::cosine_similarity(&z_p, &z_h).unwrap() as f64;
            let other = users[(idx + 1) % users.len()];
            if positives[other].text != positives[*u].text {
                let z_n = space.encode_rationale(&positives[other].text).unwrap();
                neg_sum += crate::tensor::cosine_similarity(&z_n, &z_h).unwrap() as f64;
                neg_n += 1;
            }
        }
        pos_sum / users.len() as f64 - neg_sum / neg_n.max(1) as f64
    }

    #[test]
    fn training_reduces_loss_and_separates() {
        let (positives, behaviors) = training_fixture(24);
        let config = ThoughtSpaceConfig {
            encoder: EncoderConfig {
                hash_vocab_size: 2048,
                embed_dim: 32,
                shared_weights: false,
            },
            temperature: 0.07,
            batch_size: 8,
            lr_encoders: 2e-3,
            epochs: 12,
            warmup_fraction: 0.1,
            weight_decay: 0.0,
            seed: 11,
        };
        let (space, curve) = train_thought_space(&positives, &behaviors, &config, None).unwrap();
        assert_eq!(curve.len(), 12);
        assert!(
            curve[0] > *curve.last().unwrap(),
            "loss did not fall: {curve:?}"
        );
        let sep = separation(&space, &positives, &behaviors);
        assert!(sep > 0.2, "separation {sep} too small");
    }

    #[test]
    fn training_is_deterministic() {
        let (positives, behaviors) = training_fixture(8);
        let config = ThoughtSpaceConfig {
            encoder: EncoderConfig {
                hash_vocab_size: 512,
                embed_dim: 16,
                shared_weights: false,
            },
            batch_size: 4,
            lr_encoders: 1e-3,
            epochs: 2,
            seed: 5,
            ..ThoughtSpaceConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let dir_a = dir.path().join("a");
        let dir_b = dir.path().join("b");
        std::fs::create_dir_all(&dir_a).unwrap();
        std::fs::create_dir_all(&dir_b).unwrap();
        let (_, curve_a) =
            train_thought_space(&positives, &behaviors, &config, Some(&dir_a)).unwrap();
        let (_, curve_b) =
            train_thought_space(&positives, &behaviors, &config, Some(&dir_b)).unwrap();
        assert_eq!(curve_a, curve_b);
        for epoch in 0..2 {
            let name = format!("thought_epoch{epoch}.ckpt");
            let a = std::fs::read(dir_a.join(&name)).unwrap();
            let b = std::fs::read(dir_b.join(&name)).unwrap();
            assert_eq!(a, b, "checkpoint {name} differs between runs");
        }
    }

    #[test]
    fn graph_loss_matches_scalar_loss() {
        let (positives, behaviors) = training_fixture(6);
        let config = ThoughtSpaceConfig {
            encoder: EncoderConfig {
                hash_vocab_size: 512,
                embed_dim: 16,
                shared_weights: false,
            },
            batch_size: 6,
            ..ThoughtSpaceConfig::default()
        };
        let space = ThoughtSpace::new(config.encoder.clone(), 3).unwrap();
        let users: Vec<String> = positives.keys().cloned().collect();
        let batch =
            sample_rationale_negatives(&users, &positives, &behaviors, 10, 2).unwrap();

        let mut cache = BTreeMap::new();
        for u in &users {
            cache.insert(
                u.clone(),
                (
                    space.tokens(&positives[u].text).unwrap(),
                    space.tokens(&behaviors[u].text).unwrap(),
                ),
            );
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&space.params, false);
        let graph = batch_loss(&space, &mut tape, &mut binder, &batch, &cache, 0.07).unwrap();
        let graph_val = tape.value(graph).item();

        let mut scalar_sum = 0.0f64;
        for ex in &batch.examples {
            let z_p = space.encode_rationale(&ex.positive.text).unwrap();
            let z_h = space.encode_behavior(&ex.behavior.text).unwrap();
            let z_n: Vec<Vec<f32>> = ex
                .negatives
                .iter()
                .map(|n| space.encode_rationale(&n.text).unwrap())
                .collect();
            scalar_sum += infonce_loss(&z_p, &z_h, &z_n, 0.07).unwrap() as f64;
        }
        let scalar_mean = scalar_sum / batch.examples.len() as f64;
        assert!(
            (graph_val as f64 - scalar_mean).abs() < 1e-4,
            "graph {graph_val} vs scalar {scalar_mean}"
        );
    }

    fn two_leaf_tree(texts: [&str; 2]) -> RationaleTree {
        let base = Rationale::new("u1", RationaleKind::Base, None, "base").unwrap();
        let child = |i: usize| {
            Rationale::new(
                "u1",
                RationaleKind::TotNode,
                Some(TreePos { level: 1, i, j: 0 }),
                format!("child {i}"),
            )
            .unwrap()
        };
        let leaf = |i: usize, text: &str| {
            Rationale::new(
                "u1",
                RationaleKind::TotNode,
                Some(TreePos { level: 2, i, j: 0 }),
                text,
            )
            .unwrap()
        };
        RationaleTree {
            root: base,
            children: vec![child(0), child(1)],
            leaves: vec![leaf(0, texts[0]), leaf(1, texts[1])],
        }
    }

    #[test]
    fn selection_takes_argmax_and_breaks_ties_low() {
        let space = ThoughtSpace::new(
            EncoderConfig {
                hash_vocab_size: 512,
                embed_dim: 16,
                shared_weights: false,
            },
            1,
        )
        .unwrap();
        let behavior = BehavioralText {
            user_id: "u1".into(),
            text: "history: amber soap ; next: amber oil".into(),
        };

        let tree = two_leaf_tree(["totally different words", "amber soap and amber oil"]);
        let selected = select_best_rationale(&space, &tree, &behavior).unwrap();
        let brute: Vec<f32> = tree
            .leaves
            .iter()
            .map(|l| agreement_score(&space, &l.text, &behavior.text).unwrap())
            .collect();
        let max = brute.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert_eq!(selected.score, max);

        // Bit-equal leaves: the lower (i, j) must win.
        let tied = two_leaf_tree(["same words here", "same words here"]);
        let selected = select_best_rationale(&space, &tied, &behavior).unwrap();
        assert_eq!(selected.tree_pos, TreePos { level: 2, i: 0, j: 0 });
    }

    #[test]
    fn selection_is_invariant_to_monotone_score_maps() {
        // Rank order of cosines is preserved under s -> 2s + 1, so the
        // argmax leaf cannot change; verify against a brute-force argmax of
        // the transformed scores.
        let space = ThoughtSpace::new(
            EncoderConfig {
                hash_vocab_size: 512,
                embed_dim: 16,
                shared_weights: false,
            },
            2,
        )
        .unwrap();
        let behavior = BehavioralText {
            user_id: "u1".into(),
            text: "history: basil tea ; next: basil jam".into(),
        };
        let tree = two_leaf_tree(["cedar box talk", "basil tea and basil jam"]);
        let selected = select_best_rationale(&space, &tree, &behavior).unwrap();

        let transformed: Vec<f32> = tree
            .leaves
            .iter()
            .map(|l| 2.0 * agreement_score(&space, &l.text, &behavior.text).unwrap() + 1.0)
            .collect();
        let best_idx = transformed
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap()
            .0;
        assert_eq!(tree.leaves[best_idx].text, selected.text);
    }

    #[test]
    fn selected_rationales_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("selected.jsonl");
        let rows = vec![SelectedRationale {
            user_id: "u1".into(),
            text: "prefers amber".into(),
            score: 0.75,
            tree_pos: TreePos { level: 2, i: 1, j: 2 },
        }];
        write_selected(&path, &rows).unwrap();
        assert_eq!(read_selected(&path).unwrap(), rows);
    }
}

//! Second training phase: a small scoring head over frozen embeddings,
//! trained with cross entropy over each user's 10-candidate slate.
//!
//! The head sees [z_h ; z_r ; z_c ; z_h*z_c ; z_r*z_c] per candidate, where
//! z_h is the history embedding, z_r the rationale embedding (zero when the
//! run uses no rationale), and z_c the candidate-text embedding. Encoders
//! never enter the training graph: their outputs are baked into constant
//! feature tensors, so the freeze contract holds by construction.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CandidateSet, ItemCatalog, CANDIDATES_PER_USER};
use crate::error::{PulseError, Result};
use crate::hashing::{derive_seed, fnv1a64};
use crate::rationale::{GenerationBackend, RationaleTree};
use crate::tensor::optim::{AdamW, LrSchedule};
use crate::tensor::{Binder, ParamStore, Tape, Tensor};
use crate::thought::{SelectedRationale, ThoughtSpace};

pub const HEAD_HIDDEN: usize = 128;
pub const FEATURE_BLOCKS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    None,
    BaseReason,
    TotLoglik,
    TotThoughtSpace,
    /// Uniform leaf choice; a control arm, not a recommendation strategy.
    RandomLeaf,
}

impl SelectionMethod {
    pub fn label(self) -> &'static str {
        match self {
            SelectionMethod::None => "none",
            SelectionMethod::BaseReason => "base_reason",
            SelectionMethod::TotLoglik => "tot_loglik",
            SelectionMethod::TotThoughtSpace => "tot_thought_space",
            SelectionMethod::RandomLeaf => "random_leaf",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateEncoder {
    E1,
    E2,
}

/// Phase II hyperparameters. The LoRA and inference-batch fields are
/// provenance only: the head has no adapters and inference batching does
/// not change results.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SftConfig {
    pub lr_head: f32,
    pub epochs: usize,
    pub patience: usize,
    /// Examples whose gradients are averaged per optimizer step; 1 matches
    /// the strict batch-of-one regime.
    pub grad_accumulation: usize,
    pub candidate_encoder: CandidateEncoder,
    pub weight_decay: f32,
    pub warmup_fraction: f64,
    pub infer_batch: usize,
    pub lora_rank: usize,
    pub lora_alpha: usize,
    pub lora_dropout: f32,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            lr_head: 2e-4,
            epochs: 20,
            patience: 3,
            grad_accumulation: 1,
            candidate_encoder: CandidateEncoder::E1,
            weight_decay: 0.0,
            warmup_fraction: 0.10,
            infer_batch: 2,
            lora_rank: 8,
            lora_alpha: 16,
            lora_dropout: 0.05,
        }
    }
}

impl SftConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr_head > 0.0) || self.epochs == 0 || self.patience == 0 {
            return Err(PulseError::InvalidArgument(
                "sft config needs positive lr, epochs, patience".into(),
            ));
        }
        if self.grad_accumulation == 0 {
            return Err(PulseError::InvalidArgument(
                "grad_accumulation must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One scoring instance: a user's history text, the rationale chosen for
/// them (empty when the method is `none`), and their candidate slate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub user_id: String,
    pub history_text: String,
    pub rationale_text: String,
    pub candidate_ids: Vec<String>,
    pub candidate_texts: Vec<String>,
    pub label: usize,
}

/// One example per candidate-set user. `rationales` maps user to the
/// already-selected rationale text and is required for every method except
/// `none`.
pub fn build_sft_dataset(
    histories: &BTreeMap<String, String>,
    candidates: &BTreeMap<String, CandidateSet>,
    catalog: &ItemCatalog,
    rationales: Option<&BTreeMap<String, String>>,
    method: SelectionMethod,
) -> Result<Vec<SftExample>> {
    let mut examples = Vec::with_capacity(candidates.len());
    for (user, set) in candidates {
        let history_text = histories
            .get(user)
            .ok_or_else(|| PulseError::InvalidArgument(format!("no history text for {user}")))?
            .clone();
        let rationale_text = match method {
            SelectionMethod::None => String::new(),
            _ => rationales
                .ok_or_else(|| {
                    PulseError::InvalidArgument(format!(
                        "selection method {method:?} needs rationales"
                    ))
                })?
                .get(user)
                .ok_or_else(|| PulseError::MissingRationale(user.clone()))?
                .clone(),
        };
        if set.candidates.len() != CANDIDATES_PER_USER || set.ground_truth_index >= set.candidates.len() {
            return Err(PulseError::InvalidArgument(format!(
                "malformed candidate set for {user}"
            )));
        }
        let mut candidate_texts = Vec::with_capacity(set.candidates.len());
        for item in &set.candidates {
            candidate_texts.push(catalog.item_text(item)?);
        }
        examples.push(SftExample {
            user_id: user.clone(),
            history_text,
            rationale_text,
            candidate_ids: set.candidates.clone(),
            candidate_texts,
            label: set.ground_truth_index,
        });
    }
    Ok(examples)
}

/// Memoized frozen-encoder lookups, keyed by text hash. Embeddings never
/// change during Phase II, so entries are valid for the whole run.
#[derive(Default)]
pub struct EmbeddingCache {
    e1: BTreeMap<u64, Vec<f32>>,
    e2: BTreeMap<u64, Vec<f32>>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn rationale(&mut self, space: &ThoughtSpace, text: &str) -> Result<Vec<f32>> {
        match self.e1.entry(fnv1a64(text.as_bytes())) {
            std::collections::btree_map::Entry::Occupied(e) => Ok(e.get().clone()),
            std::collections::btree_map::Entry::Vacant(e) => {
                Ok(e.insert(space.encode_rationale(text)?).clone())
            }
        }
    }

    fn behavior(&mut self, space: &ThoughtSpace, text: &str) -> Result<Vec<f32>> {
        match self.e2.entry(fnv1a64(text.as_bytes())) {
            std::collections::btree_map::Entry::Occupied(e) => Ok(e.get().clone()),
            std::collections::btree_map::Entry::Vacant(e) => {
                Ok(e.insert(space.encode_behavior(text)?).clone())
            }
        }
    }

    fn candidate(
        &mut self,
        space: &ThoughtSpace,
        text: &str,
        encoder: CandidateEncoder,
    ) -> Result<Vec<f32>> {
        match encoder {
            CandidateEncoder::E1 => self.rationale(space, text),
            CandidateEncoder::E2 => self.behavior(space, text),
        }
    }
}

/// The (10, 5d) feature matrix for one example.
pub fn example_features(
    space: &ThoughtSpace,
    cache: &mut EmbeddingCache,
    example: &SftExample,
    encoder: CandidateEncoder,
) -> Result<Tensor> {
    let d = space.config.embed_dim;
    let z_h = cache.behavior(space, &example.history_text)?;
    let z_r = if example.rationale_text.is_empty() {
        vec![0.0f32; d]
    } else {
        cache.rationale(space, &example.rationale_text)?
    };
    let n = example.candidate_texts.len();
    let mut data = Vec::with_capacity(n * FEATURE_BLOCKS * d);
    for text in &example.candidate_texts {
        let z_c = cache.candidate(space, text, encoder)?;
        data.extend_from_slice(&z_h);
        data.extend_from_slice(&z_r);
        data.extend_from_slice(&z_c);
        data.extend(z_h.iter().zip(&z_c).map(|(a, b)| a * b));
        data.extend(z_r.iter().zip(&z_c).map(|(a, b)| a * b));
    }
    Tensor::new(vec![n, FEATURE_BLOCKS * d], data)
}

/// Fresh head parameters phi: feature -> hidden 128 -> scalar logit. The
/// output bias is omitted since a shared offset cancels in both softmax and
/// argmax.
pub fn init_head(embed_dim: usize, seed: u64) -> Result<ParamStore> {
    let mut params = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "sft/init"));
    let fdim = FEATURE_BLOCKS * embed_dim;
    params.insert("phi.w1", Tensor::randn(&[fdim, HEAD_HIDDEN], 0.05, &mut rng))?;
    params.insert("phi.b1", Tensor::zeros(&[HEAD_HIDDEN]))?;
    params.insert("phi.w2", Tensor::randn(&[1, HEAD_HIDDEN], 0.05, &mut rng))?;
    Ok(params)
}

fn head_logits(tape: &mut Tape, binder: &mut Binder, features: crate::tensor::Var) -> Result<crate::tensor::Var> {
    let w1 = binder.get(tape, "phi.w1")?;
    let b1 = binder.get(tape, "phi.b1")?;
    let w2 = binder.get(tape, "phi.w2")?;
    let mut h = tape.matmul(features, w1)?;
    h = tape.add(h, b1)?;
    h = tape.relu(h)?;
    tape.matmul_nt(w2, h)
}

/// Logits for every candidate in the example, lowest index first.
pub fn score_candidates(
    head: &ParamStore,
    space: &ThoughtSpace,
    cache: &mut EmbeddingCache,
    example: &SftExample,
    encoder: CandidateEncoder,
) -> Result<Vec<f32>> {
    let features = example_features(space, cache, example, encoder)?;
    let mut tape = Tape::new();
    let mut binder = Binder::new(head, false);
    let f = tape.constant(features);
    let logits = head_logits(&mut tape, &mut binder, f)?;
    Ok(tape.value(logits).data().to_vec())
}

/// Eq. 3: cross entropy of the slate logits against the ground-truth index.
pub fn sft_loss(logits: &[f32], label: usize) -> Result<f32> {
    crate::tensor::cross_entropy(logits, label)
}

pub(crate) fn argmax_low(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Argmax candidate index, ties to the lowest index.
pub fn predict_top1(
    head: &ParamStore,
    space: &ThoughtSpace,
    cache: &mut EmbeddingCache,
    example: &SftExample,
    encoder: CandidateEncoder,
) -> Result<usize> {
    Ok(argmax_low(&score_candidates(head, space, cache, example, encoder)?))
}

fn hr_at_1_features(head: &ParamStore, features: &[(Tensor, usize)]) -> Result<f64> {
    let mut hits = 0usize;
    for (f, label) in features {
        let mut tape = Tape::new();
        let mut binder = Binder::new(head, false);
        let c = tape.constant(f.clone());
        let logits = head_logits(&mut tape, &mut binder, c)?;
        if argmax_low(tape.value(logits).data()) == *label {
            hits += 1;
        }
    }
    Ok(hits as f64 / features.len().max(1) as f64)
}

/// Train the head on precomputed frozen features, early-stopping on
/// validation HR@1. Returns the head at its best validation epoch plus the
/// per-epoch validation curve.
pub fn train_sft(
    space: &ThoughtSpace,
    train: &[SftExample],
    val: &[SftExample],
    config: &SftConfig,
    seed: u64,
) -> Result<(ParamStore, Vec<f64>)> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(PulseError::EmptyDataset("sft training or validation".into()));
    }

    let mut cache = EmbeddingCache::new();
    let mut train_features = Vec::with_capacity(train.len());
    for ex in train {
        train_features.push((
            example_features(space, &mut cache, ex, config.candidate_encoder)?,
            ex.label,
        ));
    }
    let mut val_features = Vec::with_capacity(val.len());
    for ex in val {
        val_features.push((
            example_features(space, &mut cache, ex, config.candidate_encoder)?,
            ex.label,
        ));
    }

    let mut head = init_head(space.config.embed_dim, seed)?;
    let steps_per_epoch = train.len().div_ceil(config.grad_accumulation);
    let schedule = LrSchedule::warmup_fraction(
        config.lr_head,
        (steps_per_epoch * config.epochs) as u64,
        config.warmup_fraction,
    );
    let mut opt = AdamW::new(config.weight_decay);

    let mut best_hr = f64::NEG_INFINITY;
    let mut best_head: Option<ParamStore> = None;
    let mut since_best = 0usize;
    let mut curve = Vec::with_capacity(config.epochs);
    let mut step: u64 = 0;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("sft/epoch/{epoch}")));
        order.shuffle(&mut rng);

        for group in order.chunks(config.grad_accumulation) {
            let mut tape = Tape::new();
            let mut binder = Binder::new(&head, true);
            let mut losses = Vec::with_capacity(group.len());
            for &idx in group {
                let (features, label) = &train_features[idx];
                let f = tape.constant(features.clone());
                let logits = head_logits(&mut tape, &mut binder, f)?;
                losses.push(tape.cross_entropy(logits, *label)?);
            }
            let loss = tape.mean_scalars(&losses)?;
            if !tape.value(loss).item().is_finite() {
                return Err(PulseError::TrainingDiverged { step: step as usize });
            }
            let grads = tape.backward(loss)?;
            let named = binder.collect_grads(&grads);
            opt.step(&mut head, &named, schedule.lr_at(step))?;
            step += 1;
        }

        let hr = hr_at_1_features(&head, &val_features)?;
        curve.push(hr);
        log::info!("sft epoch {epoch}: val HR@1 {hr:.4}");
        if hr > best_hr {
            best_hr = hr;
            best_head = Some(head.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }

    Ok((best_head.unwrap_or(head), curve))
}

/// Likelihood-based leaf selection: the leaf whose backend log-likelihood,
/// divided by its whitespace token count, is highest. Ties break to the
/// lowest (i, j).
pub fn ll_select(
    tree: &RationaleTree,
    backend: &dyn GenerationBackend,
) -> Result<SelectedRationale> {
    tree.validate().map_err(|_| {
        PulseError::InvalidArgument("cannot select from a malformed or empty tree".into())
    })?;
    let mut best: Option<SelectedRationale> = None;
    for leaf in &tree.leaves {
        let logprob = backend.score_text(&leaf.text)?;
        let tokens = leaf.text.split_whitespace().count().max(1);
        let score = (logprob / tokens as f64) as f32;
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

/// Per-user outcome of candidate scoring, for audit and recounts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub user_id: String,
    pub predicted_index: usize,
    pub ground_truth_index: usize,
    pub logits: Vec<f32>,
}

pub fn write_predictions(path: &Path, rows: &[PredictionRecord]) -> Result<()> {
    crate::data::ingest::write_jsonl(path, rows.iter())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    crate::data::ingest::read_jsonl(path)
}

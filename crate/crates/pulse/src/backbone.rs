//! Self-attention next-item predictor.
//!
//! A small causal transformer over item-id sequences trained with
//! full-softmax cross entropy on every prefix position. Besides baseline
//! candidate ranking it supplies user embeddings (final-position hidden
//! state) and similar-user retrieval for the second-phase prompts.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CandidateSet, DatasetSplit, ItemCatalog};
use crate::error::{PulseError, Result};
use crate::hashing::derive_seed;
use crate::tensor::optim::{AdamW, LrSchedule};
use crate::tensor::{l2_normalize, Binder, ParamStore, Tape, Tensor, Var};

pub const PAD_ID: usize = 0;
const ATTN_MASK: f32 = -1e9;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub dropout: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub warmup_fraction: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            embed_dim: 64,
            n_layers: 2,
            n_heads: 2,
            max_len: 50,
            dropout: 0.2,
            batch_size: 32,
            epochs: 20,
            patience: 3,
            lr: 1e-3,
            weight_decay: 0.0,
            warmup_fraction: 0.10,
        }
    }
}

impl BackboneConfig {
    fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(PulseError::InvalidArgument(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.max_len == 0 || self.batch_size == 0 || self.epochs == 0 || self.patience == 0 {
            return Err(PulseError::InvalidArgument(
                "max_len, batch_size, epochs, patience must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Item-id vocabulary: string ids map to dense indices, 0 reserved for pad.
/// Unknown ids (the cross-domain case) map to pad rather than erroring.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemVocab {
    to_id: BTreeMap<String, usize>,
    ids: Vec<String>,
}

impl ItemVocab {
    pub fn from_catalog(catalog: &ItemCatalog) -> Self {
        let ids: Vec<String> = catalog.items.keys().cloned().collect();
        let to_id = ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i + 1))
            .collect();
        ItemVocab { to_id, ids }
    }

    /// Including pad.
    pub fn len(&self) -> usize {
        self.ids.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn map(&self, item_id: &str) -> usize {
        self.to_id.get(item_id).copied().unwrap_or(PAD_ID)
    }

    pub fn map_all(&self, item_ids: &[String]) -> Vec<usize> {
        item_ids.iter().map(|i| self.map(i)).collect()
    }

    pub fn contains(&self, item_id: &str) -> bool {
        self.to_id.contains_key(item_id)
    }
}

pub struct Backbone {
    pub config: BackboneConfig,
    pub vocab: ItemVocab,
    pub params: ParamStore,
}

impl Backbone {
    pub fn new(config: BackboneConfig, vocab: ItemVocab, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "backbone/init"));
        let mut params = ParamStore::new();
        let d = config.embed_dim;
        let dh = d / config.n_heads;
        let std = 0.02;

        params.insert("bb.item_emb", Tensor::randn(&[vocab.len(), d], std, &mut rng))?;
        params.insert("bb.pos_emb", Tensor::randn(&[config.max_len, d], std, &mut rng))?;
        for l in 0..config.n_layers {
            for h in 0..config.n_heads {
                for w in ["wq", "wk", "wv"] {
                    params.insert(
                        &format!("bb.l{l}.h{h}.{w}"),
                        Tensor::randn(&[d, dh], std, &mut rng),
                    )?;
                }
            }
            params.insert(&format!("bb.l{l}.wo"), Tensor::randn(&[d, d], std, &mut rng))?;
            params.insert(&format!("bb.l{l}.ln1.g"), ones(d))?;
            params.insert(&format!("bb.l{l}.ln1.b"), Tensor::zeros(&[d]))?;
            params.insert(&format!("bb.l{l}.ln2.g"), ones(d))?;
            params.insert(&format!("bb.l{l}.ln2.b"), Tensor::zeros(&[d]))?;
            params.insert(&format!("bb.l{l}.ffn.w1"), Tensor::randn(&[d, d], std, &mut rng))?;
            params.insert(&format!("bb.l{l}.ffn.b1"), Tensor::zeros(&[d]))?;
            params.insert(&format!("bb.l{l}.ffn.w2"), Tensor::randn(&[d, d], std, &mut rng))?;
            params.insert(&format!("bb.l{l}.ffn.b2"), Tensor::zeros(&[d]))?;
        }
        params.insert("bb.ln_f.g", ones(d))?;
        params.insert("bb.ln_f.b", Tensor::zeros(&[d]))?;

        Ok(Backbone {
            config,
            vocab,
            params,
        })
    }

    /// Rebuild a model around checkpointed parameters. Names and shapes are
    /// validated against a reference initialization of the same config and
    /// vocabulary.
    pub fn from_parts(config: BackboneConfig, vocab: ItemVocab, params: ParamStore) -> Result<Self> {
        let reference = Backbone::new(config.clone(), vocab.clone(), 0)?;
        for (name, tensor) in reference.params.iter() {
            let loaded = params.get(name)?;
            if loaded.shape() != tensor.shape() {
                return Err(PulseError::InvalidArgument(format!(
                    "checkpoint tensor {name} has shape {:?}, expected {:?}",
                    loaded.shape(),
                    tensor.shape()
                )));
            }
        }
        Ok(Backbone {
            config,
            vocab,
            params,
        })
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if ids.is_empty() || ids.len() > self.config.max_len {
            return Err(PulseError::InvalidArgument(format!(
                "sequence length {} outside [1, {}]",
                ids.len(),
                self.config.max_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab.len()) {
            return Err(PulseError::UnknownItem(format!("dense id {bad}")));
        }
        Ok(())
    }

    /// Hidden states for a sequence; pre-norm residual blocks with causal
    /// attention. `dropout_rng` present means training mode.
    fn hidden(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        ids: &[usize],
        dropout_rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        self.check_ids(ids)?;
        let cfg = &self.config;
        let t = ids.len();
        let dh = cfg.embed_dim / cfg.n_heads;

        let item_emb = binder.get(tape, "bb.item_emb")?;
        let pos_emb = binder.get(tape, "bb.pos_emb")?;
        let tok = tape.embedding(item_emb, ids)?;
        let positions: Vec<usize> = (0..t).collect();
        let pos = tape.embedding(pos_emb, &positions)?;
        let mut x = tape.add(tok, pos)?;
        x = self.maybe_dropout(tape, x, dropout_rng)?;

        let mask = tape.constant(causal_mask(t));
        let scale = 1.0 / (dh as f32).sqrt();

        for l in 0..cfg.n_layers {
            let ln1g = binder.get(tape, &format!("bb.l{l}.ln1.g"))?;
            let ln1b = binder.get(tape, &format!("bb.l{l}.ln1.b"))?;
            let a = tape.layer_norm(x, ln1g, ln1b)?;

            let mut heads = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let wq = binder.get(tape, &format!("bb.l{l}.h{h}.wq"))?;
                let wk = binder.get(tape, &format!("bb.l{l}.h{h}.wk"))?;
                let wv = binder.get(tape, &format!("bb.l{l}.h{h}.wv"))?;
                let q = tape.matmul(a, wq)?;
                let k = tape.matmul(a, wk)?;
                let v = tape.matmul(a, wv)?;
                let scores = tape.matmul_nt(q, k)?;
                let scores = tape.scale(scores, scale)?;
                let scores = tape.add(scores, mask)?;
                let mut weights = tape.softmax_rows(scores)?;
                weights = self.maybe_dropout(tape, weights, dropout_rng)?;
                heads.push(tape.matmul(weights, v)?);
            }
            let ctx = tape.concat_cols(&heads)?;
            let wo = binder.get(tape, &format!("bb.l{l}.wo"))?;
            let mut attn_out = tape.matmul(ctx, wo)?;
            attn_out = self.maybe_dropout(tape, attn_out, dropout_rng)?;
            x = tape.add(x, attn_out)?;

            let ln2g = binder.get(tape, &format!("bb.l{l}.ln2.g"))?;
            let ln2b = binder.get(tape, &format!("bb.l{l}.ln2.b"))?;
            let f = tape.layer_norm(x, ln2g, ln2b)?;
            let w1 = binder.get(tape, &format!("bb.l{l}.ffn.w1"))?;
            let b1 = binder.get(tape, &format!("bb.l{l}.ffn.b1"))?;
            let w2 = binder.get(tape, &format!("bb.l{l}.ffn.w2"))?;
            let b2 = binder.get(tape, &format!("bb.l{l}.ffn.b2"))?;
            let mut ff = tape.matmul(f, w1)?;
            ff = tape.add(ff, b1)?;
            ff = tape.relu(ff)?;
            ff = tape.matmul(ff, w2)?;
            ff = tape.add(ff, b2)?;
            ff = self.maybe_dropout(tape, ff, dropout_rng)?;
            x = tape.add(x, ff)?;
        }

        let lfg = binder.get(tape, "bb.ln_f.g")?;
        let lfb = binder.get(tape, "bb.ln_f.b")?;
        tape.layer_norm(x, lfg, lfb)
    }

    fn maybe_dropout(
        &self,
        tape: &mut Tape,
        x: Var,
        dropout_rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var> {
        match dropout_rng {
            Some(rng) => tape.dropout(x, self.config.dropout, *rng),
            None => Ok(x),
        }
    }

    /// Inference forward: logits over the vocabulary at each position plus
    /// the per-position hidden states.
    pub fn forward_next_item(&self, ids: &[usize]) -> Result<(Tensor, Tensor)> {
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params, false);
        let hidden = self.hidden(&mut tape, &mut binder, ids, &mut None)?;
        let item_emb = binder.get(&mut tape, "bb.item_emb")?;
        let logits = tape.matmul_nt(hidden, item_emb)?;
        Ok((tape.value(logits).clone(), tape.value(hidden).clone()))
    }

    /// Next-item prediction from the final position, pad excluded; ties by
    /// lowest id.
    pub fn predict_next(&self, ids: &[usize]) -> Result<usize> {
        let (logits, _) = self.forward_next_item(ids)?;
        let last = logits.row(logits.rows() - 1);
        let mut best = 1;
        for (i, &v) in last.iter().enumerate().skip(1) {
            if v > last[best] {
                best = i;
            }
        }
        Ok(best)
    }

    /// Final-position contextual state, unit-normalized.
    pub fn user_embedding(&self, history: &[String]) -> Result<Vec<f32>> {
        if history.is_empty() {
            return Err(PulseError::InvalidArgument(
                "user_embedding of empty history".into(),
            ));
        }
        let ids = self.window_ids(history);
        let (_, hidden) = self.forward_next_item(&ids)?;
        let mut z = hidden.row(hidden.rows() - 1).to_vec();
        l2_normalize(&mut z)?;
        Ok(z)
    }

    /// Rank a candidate slate by dot product against the final hidden state;
    /// returns the winning index, ties by lowest index.
    pub fn predict_among(&self, history: &[String], candidates: &[String]) -> Result<usize> {
        let ids = self.window_ids(history);
        let (_, hidden) = self.forward_next_item(&ids)?;
        let h = hidden.row(hidden.rows() - 1);
        let emb = self.params.get("bb.item_emb")?;
        let mut best = 0usize;
        let mut best_score = f32::NEG_INFINITY;
        for (pos, cand) in candidates.iter().enumerate() {
            let row = emb.row(self.vocab.map(cand));
            let score: f32 = h.iter().zip(row).map(|(a, b)| a * b).sum();
            if score > best_score {
                best_score = score;
                best = pos;
            }
        }
        Ok(best)
    }

    /// Map string ids (unknown becomes pad) and keep the most recent window.
    pub fn window_ids(&self, history: &[String]) -> Vec<usize> {
        let ids = self.vocab.map_all(history);
        let start = ids.len().saturating_sub(self.config.max_len);
        ids[start..].to_vec()
    }

    /// Mean next-item cross entropy over one sequence's prefix positions.
    fn sequence_loss(&self, tape: &mut Tape, binder: &mut Binder, ids: &[usize],
        dropout_rng: &mut Option<&mut ChaCha8Rng>) -> Result<Var> {
        let inputs = &ids[..ids.len() - 1];
        let targets = &ids[1..];
        let hidden = self.hidden(tape, binder, inputs, dropout_rng)?;
        let item_emb = binder.get(tape, "bb.item_emb")?;
        let logits = tape.matmul_nt(hidden, item_emb)?;
        tape.cross_entropy_rows(logits, targets)
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::new(vec![n], vec![1.0; n]).unwrap()
}

fn causal_mask(t: usize) -> Tensor {
    let mut data = vec![0.0f32; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = ATTN_MASK;
        }
    }
    Tensor::new(vec![t, t], data).unwrap()
}

/// Validation HR@1 over candidate slates.
pub fn backbone_hr_at_1(
    model: &Backbone,
    histories: &BTreeMap<String, Vec<String>>,
    candidates: &BTreeMap<String, CandidateSet>,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (user, set) in candidates {
        let history = histories.get(user).ok_or_else(|| {
            PulseError::InvalidArgument(format!("no history for candidate user {user}"))
        })?;
        let pred = model.predict_among(history, &set.candidates)?;
        hits += usize::from(pred == set.ground_truth_index);
        total += 1;
    }
    if total == 0 {
        return Err(PulseError::InvalidArgument("no users to evaluate".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Train on each user's train prefix, early-stopping on validation HR@1.
/// Returns the model at its best validation epoch plus the per-epoch curve.
pub fn train_backbone(
    split: &DatasetSplit,
    val_candidates: &BTreeMap<String, CandidateSet>,
    catalog: &ItemCatalog,
    config: BackboneConfig,
    seed: u64,
) -> Result<(Backbone, Vec<f64>)> {
    let vocab = ItemVocab::from_catalog(catalog);
    let mut model = Backbone::new(config, vocab, seed)?;
    let cfg = model.config.clone();

    // Train sequences: window the train prefix; need >= 2 items for one
    // next-item pair.
    let mut train_seqs: Vec<(String, Vec<usize>)> = Vec::new();
    let mut val_histories: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for user in split.users.keys() {
        let parts = split.parts(user)?;
        let ids = model.vocab.map_all(parts.train);
        let start = ids.len().saturating_sub(cfg.max_len);
        let ids = ids[start..].to_vec();
        if ids.len() >= 2 {
            train_seqs.push((user.clone(), ids));
        }
        val_histories.insert(user.clone(), parts.train.to_vec());
    }
    if train_seqs.is_empty() {
        return Err(PulseError::EmptyDataset("no trainable sequences".into()));
    }

    let steps_per_epoch = train_seqs.len().div_ceil(cfg.batch_size);
    let schedule = LrSchedule::warmup_fraction(
        cfg.lr,
        (steps_per_epoch * cfg.epochs) as u64,
        cfg.warmup_fraction,
    );
    let mut opt = AdamW::new(cfg.weight_decay);

    let mut best_hr = f64::NEG_INFINITY;
    let mut best_params: Option<ParamStore> = None;
    let mut since_best = 0usize;
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_seqs.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("backbone/epoch/{epoch}")));
        order.shuffle(&mut shuffle_rng);

        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(
                seed,
                &format!("backbone/dropout/{epoch}/{batch_idx}"),
            ));
            let mut tape = Tape::new();
            let mut binder = Binder::new(&model.params, true);
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let mut rng_opt = Some(&mut dropout_rng);
                let loss =
                    model.sequence_loss(&mut tape, &mut binder, &train_seqs[i].1, &mut rng_opt)?;
                losses.push(loss);
            }
            let batch_loss = tape.mean_scalars(&losses)?;
            let loss_val = tape.value(batch_loss).item();
            if !loss_val.is_finite() {
                return Err(PulseError::TrainingDiverged { step: step as usize });
            }
            let grads = tape.backward(batch_loss)?;
            let named = binder.collect_grads(&grads);
            opt.step(&mut model.params, &named, schedule.lr_at(step))?;
            step += 1;
        }

        let hr = backbone_hr_at_1(&model, &val_histories, val_candidates)?;
        curve.push(hr);
        log::info!("backbone epoch {epoch}: val HR@1 {hr:.4}");
        if hr > best_hr {
            best_hr = hr;
            best_params = Some(model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    if let Some(best) = best_params {
        model.params = best;
    }
    Ok((model, curve))
}

/// Top-k most similar users by embedding cosine; the target is excluded and
/// ties break lexicographically by user id.
pub fn similar_users(
    embeddings: &BTreeMap<String, Vec<f32>>,
    target: &str,
    k: usize,
) -> Result<Vec<String>> {
    let anchor = embeddings.get(target).ok_or_else(|| {
        PulseError::InvalidArgument(format!("no embedding for target user {target}"))
    })?;
    let mut scored: Vec<(&String, f32)> = Vec::new();
    for (user, emb) in embeddings {
        if user == target {
            continue;
        }
        let score = crate::tensor::cosine_similarity(anchor, emb)?;
        scored.push((user, score));
    }
    if scored.len() < k {
        log::warn!(
            "similar_users: requested {k} but only {} available",
            scored.len()
        );
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(b.0))
    });
    Ok(scored.into_iter().take(k).map(|(u, _)| u.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_sequences, split_leave_one_out, synth, ItemMeta, UserSequence};

    fn tiny_catalog(n: usize) -> ItemCatalog {
        let mut catalog = ItemCatalog::default();
        for i in 0..n {
            catalog.items.insert(
                format!("i{i:03}"),
                ItemMeta {
                    title: format!("item {i}"),
                    description: String::new(),
                    domain: "test".into(),
                },
            );
        }
        catalog
    }

    fn tiny_model(n_items: usize) -> Backbone {
        let catalog = tiny_catalog(n_items);
        let vocab = ItemVocab::from_catalog(&catalog);
        let config = BackboneConfig {
            max_len: 16,
            ..BackboneConfig::default()
        };
        Backbone::new(config, vocab, 7).unwrap()
    }

    #[test]
    fn causality_logits_ignore_suffix_edits() {
        let model = tiny_model(20);
        let a = vec![3, 5, 7, 9, 11];
        let b = vec![3, 5, 7, 2, 4]; // same first three, different suffix
        let (la, _) = model.forward_next_item(&a).unwrap();
        let (lb, _) = model.forward_next_item(&b).unwrap();
        for k in 0..3 {
            assert_eq!(la.row(k), lb.row(k), "position {k} leaked future info");
        }
        assert_ne!(la.row(4), lb.row(4));
    }

    #[test]
    fn single_item_and_pad_sequences_stay_finite() {
        let model = tiny_model(10);
        let (logits, hidden) = model.forward_next_item(&[4]).unwrap();
        assert!(logits.is_finite());
        assert!(hidden.is_finite());
        let (logits, _) = model.forward_next_item(&[PAD_ID, PAD_ID]).unwrap();
        assert!(logits.is_finite());
    }

    #[test]
    fn sequence_bounds_are_enforced() {
        let model = tiny_model(10);
        assert!(model.forward_next_item(&[]).is_err());
        assert!(model.forward_next_item(&vec![1; 17]).is_err());
        assert!(model.forward_next_item(&[99]).is_err());
    }

    #[test]
    fn unknown_items_map_to_pad() {
        let model = tiny_model(10);
        let ids = model.window_ids(&["i003".to_string(), "missing".to_string()]);
        assert_eq!(ids, vec![4, PAD_ID]);
    }

    #[test]
    fn user_embedding_is_unit_norm_and_deterministic() {
        let model = tiny_model(10);
        let hist: Vec<String> = ["i001", "i004", "i002"].iter().map(|s| s.to_string()).collect();
        let a = model.user_embedding(&hist).unwrap();
        let b = model.user_embedding(&hist).unwrap();
        assert_eq!(a, b);
        let norm: f32 = a.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn similar_users_excludes_target_and_finds_duplicate() {
        let mut embs = BTreeMap::new();
        embs.insert("u1".to_string(), vec![1.0, 0.0]);
        embs.insert("u2".to_string(), vec![1.0, 0.0]);
        embs.insert("u3".to_string(), vec![0.0, 1.0]);
        let top = similar_users(&embs, "u1", 1).unwrap();
        assert_eq!(top, vec!["u2".to_string()]);
        let all = similar_users(&embs, "u1", 10).unwrap();
        assert_eq!(all.len(), 2);
        assert!(!all.contains(&"u1".to_string()));
    }

    /// Small deterministic cycle: every user walks i -> i+1 mod n. The cycle
    /// successor is the oracle for next-item prediction.
    fn cyclic_setup(
        n_items: usize,
        n_users: usize,
        len: usize,
    ) -> (DatasetSplit, BTreeMap<String, CandidateSet>, ItemCatalog) {
        let catalog = tiny_catalog(n_items);
        let mut users = BTreeMap::new();
        for u in 0..n_users {
            let user_id = format!("u{u:03}");
            let items: Vec<String> = (0..len)
                .map(|p| format!("i{:03}", (u * 7 + p) % n_items))
                .collect();
            users.insert(
                user_id.clone(),
                UserSequence {
                    user_id,
                    items,
                    ratings: vec![None; len],
                    reviews: vec![None; len],
                },
            );
        }
        let split = split_leave_one_out(&users).unwrap();
        let universe: Vec<String> = catalog.items.keys().cloned().collect();
        let vals = crate::data::sample_all_candidates(&split, &universe, "val", 11).unwrap();
        (split, vals, catalog)
    }

    #[test]
    fn training_learns_a_small_cycle_and_is_seed_stable() {
        let (split, vals, catalog) = cyclic_setup(24, 48, 9);
        let config = BackboneConfig {
            max_len: 16,
            epochs: 6,
            patience: 6,
            dropout: 0.1,
            batch_size: 16,
            ..BackboneConfig::default()
        };
        let (model, curve) = train_backbone(&split, &vals, &catalog, config.clone(), 3).unwrap();
        assert!(!curve.is_empty());
        assert!(
            curve.last().unwrap() >= &0.5,
            "cycle not learned: curve {curve:?}"
        );

        let (model2, curve2) = train_backbone(&split, &vals, &catalog, config, 3).unwrap();
        assert_eq!(curve, curve2);
        for (name, t) in model.params.iter() {
            assert_eq!(t, model2.params.get(name).unwrap(), "param {name} differs");
        }
    }

    #[test]
    fn synthetic_users_with_same_trait_embed_closer() {
        let spec = synth::SynthSpec {
            n_users: 24,
            n_items: 60,
            n_traits: 2,
            noise: 0.0,
            seq_len_range: (6, 8),
            seed: 9,
            ..synth::SynthSpec::default()
        };
        let (records, catalog, hidden) = synth::gen_synthetic_dataset(&spec).unwrap();
        let seqs = build_sequences(&records);
        let split = split_leave_one_out(&seqs).unwrap();
        let universe: Vec<String> = catalog.items.keys().cloned().collect();
        let vals = crate::data::sample_all_candidates(&split, &universe, "val", 5).unwrap();
        let config = BackboneConfig {
            max_len: 16,
            epochs: 4,
            patience: 4,
            batch_size: 8,
            dropout: 0.1,
            ..BackboneConfig::default()
        };
        let (model, _) = train_backbone(&split, &vals, &catalog, config, 5).unwrap();

        let mut embs = BTreeMap::new();
        for (user, _) in &split.users {
            let hist = split.history_for_val(user).unwrap();
            embs.insert(user.clone(), model.user_embedding(hist).unwrap());
        }
        let users: Vec<&String> = embs.keys().collect();
        let (mut same_sum, mut same_n, mut diff_sum, mut diff_n) = (0.0f64, 0, 0.0f64, 0);
        for i in 0..users.len() {
            for j in (i + 1)..users.len() {
                let cos =
                    crate::tensor::cosine_similarity(&embs[users[i]], &embs[users[j]]).unwrap()
                        as f64;
                if hidden.user_trait[users[i]] == hidden.user_trait[users[j]] {
                    same_sum += cos;
                    same_n += 1;
                } else {
                    diff_sum += cos;
                    diff_n += 1;
                }
            }
        }
        let same_mean = same_sum / same_n as f64;
        let diff_mean = diff_sum / diff_n as f64;
        assert!(
            same_mean > diff_mean,
            "same-trait {same_mean:.3} vs diff-trait {diff_mean:.3}"
        );
    }
}

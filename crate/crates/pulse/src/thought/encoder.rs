//! The two text encoders that span the shared embedding space: E1 for
//! rationales, E2 for behavioral text. Same architecture, separate weights
//! unless sharing is enabled.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PulseError, Result};
use crate::hashing::derive_seed;
use crate::tensor::{read_checkpoint, Binder, ParamStore, Tape, Tensor, Var};
use crate::text::{tokenize, MAX_TOKENS};

pub const E1_PREFIX: &str = "e1";
pub const E2_PREFIX: &str = "e2";
const ENC_HEADS: usize = 2;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hash_vocab_size: usize,
    pub embed_dim: usize,
    pub shared_weights: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            hash_vocab_size: crate::text::DEFAULT_HASH_VOCAB,
            embed_dim: 64,
            shared_weights: false,
        }
    }
}

impl EncoderConfig {
    fn validate(&self) -> Result<()> {
        if self.hash_vocab_size == 0 || self.embed_dim == 0 || self.embed_dim % ENC_HEADS != 0 {
            return Err(PulseError::InvalidArgument(format!(
                "bad encoder config: vocab {}, dim {}",
                self.hash_vocab_size, self.embed_dim
            )));
        }
        Ok(())
    }
}

/// Both encoders plus their parameter store. Texts are hashed into a fixed
/// vocabulary, contextualized by one bidirectional attention block, mean
/// pooled, projected, and unit-normalized.
pub struct ThoughtSpace {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

impl ThoughtSpace {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "thought/init"));
        init_encoder(&mut params, E1_PREFIX, &config, &mut rng)?;
        if !config.shared_weights {
            init_encoder(&mut params, E2_PREFIX, &config, &mut rng)?;
        }
        Ok(ThoughtSpace { config, params })
    }

    pub fn from_params(config: EncoderConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        for name in required_names(E1_PREFIX) {
            params.get(&name)?;
        }
        if !config.shared_weights {
            for name in required_names(E2_PREFIX) {
                params.get(&name)?;
            }
        }
        Ok(ThoughtSpace { config, params })
    }

    /// Replace both token tables with an externally supplied embedding file
    /// (checkpoint containing one entry named "embedding"). Supports parity
    /// runs where the space is spanned by vectors trained elsewhere.
    pub fn load_embedding_table(&mut self, path: &Path) -> Result<()> {
        let external = read_checkpoint(path)?;
        let table = external.get("embedding")?;
        let want = [self.config.hash_vocab_size, self.config.embed_dim];
        if table.shape() != want {
            return Err(PulseError::InvalidArgument(format!(
                "external embedding shape {:?} does not match {want:?}",
                table.shape()
            )));
        }
        self.params.set(&format!("{E1_PREFIX}.tok_emb"), table.clone())?;
        if !self.config.shared_weights {
            self.params.set(&format!("{E2_PREFIX}.tok_emb"), table.clone())?;
        }
        Ok(())
    }

    fn behavior_prefix(&self) -> &'static str {
        if self.config.shared_weights {
            E1_PREFIX
        } else {
            E2_PREFIX
        }
    }

    /// Graph-building forward used by training; `tokens` must be non-empty.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        prefix: &str,
        tokens: &[usize],
    ) -> Result<Var> {
        let d = self.config.embed_dim;
        let dh = d / ENC_HEADS;
        let scale = 1.0 / (dh as f32).sqrt();

        let tok_emb = binder.get(tape, &format!("{prefix}.tok_emb"))?;
        let mut x = tape.embedding(tok_emb, tokens)?;

        let g1 = binder.get(tape, &format!("{prefix}.ln1.g"))?;
        let b1 = binder.get(tape, &format!("{prefix}.ln1.b"))?;
        let a = tape.layer_norm(x, g1, b1)?;
        let mut heads = Vec::with_capacity(ENC_HEADS);
        for h in 0..ENC_HEADS {
            let wq = binder.get(tape, &format!("{prefix}.h{h}.wq"))?;
            let wk = binder.get(tape, &format!("{prefix}.h{h}.wk"))?;
            let wv = binder.get(tape, &format!("{prefix}.h{h}.wv"))?;
            let q = tape.matmul(a, wq)?;
            let k = tape.matmul(a, wk)?;
            let v = tape.matmul(a, wv)?;
            let scores = tape.matmul_nt(q, k)?;
            let scores = tape.scale(scores, scale)?;
            let weights = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(weights, v)?);
        }
        let ctx = tape.concat_cols(&heads)?;
        let wo = binder.get(tape, &format!("{prefix}.wo"))?;
        let attn = tape.matmul(ctx, wo)?;
        x = tape.add(x, attn)?;

        let g2 = binder.get(tape, &format!("{prefix}.ln2.g"))?;
        let b2 = binder.get(tape, &format!("{prefix}.ln2.b"))?;
        let f = tape.layer_norm(x, g2, b2)?;
        let w1 = binder.get(tape, &format!("{prefix}.ffn.w1"))?;
        let c1 = binder.get(tape, &format!("{prefix}.ffn.b1"))?;
        let w2 = binder.get(tape, &format!("{prefix}.ffn.w2"))?;
        let c2 = binder.get(tape, &format!("{prefix}.ffn.b2"))?;
        let mut ff = tape.matmul(f, w1)?;
        ff = tape.add(ff, c1)?;
        ff = tape.relu(ff)?;
        ff = tape.matmul(ff, w2)?;
        ff = tape.add(ff, c2)?;
        x = tape.add(x, ff)?;

        let gf = binder.get(tape, &format!("{prefix}.ln_f.g"))?;
        let bf = binder.get(tape, &format!("{prefix}.ln_f.b"))?;
        x = tape.layer_norm(x, gf, bf)?;

        let pooled = tape.mean_rows(x)?;
        let proj = binder.get(tape, &format!("{prefix}.proj"))?;
        let z = tape.matmul(pooled, proj)?;
        tape.l2_normalize_rows(z)
    }

    pub(crate) fn tokens(&self, text: &str) -> Result<Vec<usize>> {
        tokenize(text, self.config.hash_vocab_size, MAX_TOKENS)
    }

    fn encode(&self, prefix: &str, text: &str) -> Result<Vec<f32>> {
        let tokens = self.tokens(text)?;
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params, false);
        let z = self.forward(&mut tape, &mut binder, prefix, &tokens)?;
        Ok(tape.value(z).data().to_vec())
    }

    /// E1: rationale text to unit vector.
    pub fn encode_rationale(&self, text: &str) -> Result<Vec<f32>> {
        self.encode(E1_PREFIX, text)
    }

    /// E2: behavioral text to unit vector.
    pub fn encode_behavior(&self, text: &str) -> Result<Vec<f32>> {
        self.encode(self.behavior_prefix(), text)
    }

    pub(crate) fn prefixes(&self) -> (&'static str, &'static str) {
        (E1_PREFIX, self.behavior_prefix())
    }
}

fn init_encoder(
    params: &mut ParamStore,
    prefix: &str,
    config: &EncoderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let d = config.embed_dim;
    let dh = d / ENC_HEADS;
    let std = 0.02;
    params.insert(
        &format!("{prefix}.tok_emb"),
        Tensor::randn(&[config.hash_vocab_size, d], std, rng),
    )?;
    for h in 0..ENC_HEADS {
        for w in ["wq", "wk", "wv"] {
            params.insert(&format!("{prefix}.h{h}.{w}"), Tensor::randn(&[d, dh], std, rng))?;
        }
    }
    params.insert(&format!("{prefix}.wo"), Tensor::randn(&[d, d], std, rng))?;
    for ln in ["ln1", "ln2", "ln_f"] {
        params.insert(
            &format!("{prefix}.{ln}.g"),
            Tensor::new(vec![d], vec![1.0; d]).unwrap(),
        )?;
        params.insert(&format!("{prefix}.{ln}.b"), Tensor::zeros(&[d]))?;
    }
    params.insert(&format!("{prefix}.ffn.w1"), Tensor::randn(&[d, d], std, rng))?;
    params.insert(&format!("{prefix}.ffn.b1"), Tensor::zeros(&[d]))?;
    params.insert(&format!("{prefix}.ffn.w2"), Tensor::randn(&[d, d], std, rng))?;
    params.insert(&format!("{prefix}.ffn.b2"), Tensor::zeros(&[d]))?;
    params.insert(&format!("{prefix}.proj"), Tensor::randn(&[d, d], std, rng))?;
    Ok(())
}

fn required_names(prefix: &str) -> Vec<String> {
    let mut names = vec![
        format!("{prefix}.tok_emb"),
        format!("{prefix}.wo"),
        format!("{prefix}.proj"),
    ];
    for h in 0..ENC_HEADS {
        for w in ["wq", "wk", "wv"] {
            names.push(format!("{prefix}.h{h}.{w}"));
        }
    }
    for ln in ["ln1", "ln2", "ln_f"] {
        names.push(format!("{prefix}.{ln}.g"));
        names.push(format!("{prefix}.{ln}.b"));
    }
    for p in ["w1", "b1", "w2", "b2"] {
        names.push(format!("{prefix}.ffn.{p}"));
    }
    names
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ThoughtSpace {
        let config = EncoderConfig {
            hash_vocab_size: 512,
            embed_dim: 32,
            shared_weights: false,
        };
        ThoughtSpace::new(config, 3).unwrap()
    }

    #[test]
    fn outputs_are_unit_norm_and_deterministic() {
        let ts = small();
        let a = ts.encode_rationale("the user loves amber scented candles").unwrap();
        let b = ts.encode_rationale("the user loves amber scented candles").unwrap();
        assert_eq!(a, b);
        let norm: f32 = a.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5, "norm {norm}");
        let h = ts.encode_behavior("history: a | b ; next: c").unwrap();
        let norm: f32 = h.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
    }

    #[test]
    fn encoders_differ_unless_shared() {
        let ts = small();
        let r = ts.encode_rationale("identical words here").unwrap();
        let h = ts.encode_behavior("identical words here").unwrap();
        assert_ne!(r, h, "separate encoders should disagree at init");

        let shared = ThoughtSpace::new(
            EncoderConfig {
                hash_vocab_size: 512,
                embed_dim: 32,
                shared_weights: true,
            },
            3,
        )
        .unwrap();
        let r = shared.encode_rationale("identical words here").unwrap();
        let h = shared.encode_behavior("identical words here").unwrap();
        assert_eq!(r, h, "shared weights must collapse the two encoders");
    }

    #[test]
    fn empty_text_is_rejected() {
        let ts = small();
        assert!(matches!(
            ts.encode_rationale("!!! ---"),
            Err(PulseError::EmptyText(_))
        ));
    }

    #[test]
    fn external_embedding_table_is_loaded() {
        let mut ts = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("external.ckpt");
        let mut external = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        external
            .insert("embedding", Tensor::randn(&[512, 32], 0.5, &mut rng))
            .unwrap();
        crate::tensor::write_checkpoint(&path, &external).unwrap();

        let before = ts.encode_rationale("amber things").unwrap();
        ts.load_embedding_table(&path).unwrap();
        let after = ts.encode_rationale("amber things").unwrap();
        assert_ne!(before, after);

        let mut bad = ParamStore::new();
        bad.insert("embedding", Tensor::zeros(&[4, 4])).unwrap();
        let bad_path = dir.path().join("bad.ckpt");
        crate::tensor::write_checkpoint(&bad_path, &bad).unwrap();
        assert!(ts.load_embedding_table(&bad_path).is_err());
    }

    #[test]
    fn from_params_round_trips_and_validates() {
        let ts = small();
        let rebuilt = ThoughtSpace::from_params(ts.config.clone(), ts.params.clone()).unwrap();
        let a = ts.encode_rationale("same text").unwrap();
        let b = rebuilt.encode_rationale("same text").unwrap();
        assert_eq!(a, b);

        let mut partial = ParamStore::new();
        partial.insert("e1.tok_emb", Tensor::zeros(&[512, 32])).unwrap();
        assert!(ThoughtSpace::from_params(ts.config.clone(), partial).is_err());
    }
}

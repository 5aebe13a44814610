//! Reformer-style encoder: token and learned absolute position embeddings
//! followed by post-norm blocks of shared-QK LSH attention and a GELU
//! feed-forward network.

use rand::Rng as _;

use crate::attention::{head_plans, AttentionInstrumentation, AttentionKind, LshSettings};
use crate::autograd::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct ReformerConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    /// Width of the token embedding table; projected to `d_model` when different.
    pub embedding_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub max_seq_len: usize,
    /// `None` picks `2 * ceil(L / chunk_size)` buckets per sequence.
    pub n_buckets: Option<usize>,
    pub n_hash_rounds: usize,
    pub chunk_size: usize,
    pub attention_dropout: f64,
    pub hidden_dropout: f64,
    pub seed: u64,
    pub attention: AttentionKind,
}

impl Default for ReformerConfig {
    fn default() -> Self {
        ReformerConfig {
            vocab_size: 30_522,
            d_model: 256,
            embedding_dim: 256,
            n_heads: 4,
            n_layers: 6,
            d_ffn: 1024,
            max_seq_len: 8192,
            n_buckets: None,
            n_hash_rounds: 4,
            chunk_size: 64,
            attention_dropout: 0.1,
            hidden_dropout: 0.1,
            seed: 0,
            attention: AttentionKind::Lsh,
        }
    }
}

impl ReformerConfig {
    /// A very small configuration for unit tests.
    pub fn tiny(vocab_size: usize) -> Self {
        ReformerConfig {
            vocab_size,
            d_model: 8,
            embedding_dim: 8,
            n_heads: 2,
            n_layers: 1,
            d_ffn: 16,
            max_seq_len: 64,
            n_buckets: Some(2),
            n_hash_rounds: 2,
            chunk_size: 4,
            attention_dropout: 0.0,
            hidden_dropout: 0.0,
            seed: 1,
            attention: AttentionKind::Lsh,
        }
    }

    pub fn lsh_settings(&self) -> LshSettings {
        LshSettings {
            n_buckets: self.n_buckets,
            n_rounds: self.n_hash_rounds,
            chunk_size: self.chunk_size,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("embedding_dim", self.embedding_dim),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ffn", self.d_ffn),
            ("max_seq_len", self.max_seq_len),
            ("n_hash_rounds", self.n_hash_rounds),
            ("chunk_size", self.chunk_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "n_heads",
                format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads),
            ));
        }
        if let Some(nb) = self.n_buckets {
            if nb < 2 || nb % 2 != 0 {
                return Err(Error::config("n_buckets", format!("must be even and at least 2, got {nb}")));
            }
        }
        for (key, p) in [
            ("attention_dropout", self.attention_dropout),
            ("hidden_dropout", self.hidden_dropout),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(key, format!("must lie in [0, 1), got {p}")));
            }
        }
        Ok(())
    }
}

impl ReformerConfig {
    /// Writes the configuration as an exact metadata record `meta.<tag>`.
    pub fn write_meta(&self, ckpt: &mut Checkpoint, tag: &str) {
        let ints = [
            self.vocab_size,
            self.d_model,
            self.embedding_dim,
            self.n_heads,
            self.n_layers,
            self.d_ffn,
            self.max_seq_len,
            self.n_buckets.unwrap_or(0),
            self.n_hash_rounds,
            self.chunk_size,
        ];
        let mut v: Vec<u64> = ints.iter().map(|&i| i as u64).collect();
        v.push(self.attention_dropout.to_bits());
        v.push(self.hidden_dropout.to_bits());
        v.push(self.seed);
        v.push(match self.attention {
            AttentionKind::Lsh => 0,
            AttentionKind::Full => 1,
        });
        ckpt.insert_u64s(&format!("meta.{tag}"), &v);
    }

    pub fn read_meta(ckpt: &Checkpoint, tag: &str) -> Result<Self> {
        let name = format!("meta.{tag}");
        let v = ckpt.get_u64s(&name)?;
        if v.len() != 14 {
            return Err(Error::Format(format!("record {name} has {} fields, expected 14", v.len())));
        }
        let u = |i: usize| v[i] as usize;
        let cfg = ReformerConfig {
            vocab_size: u(0),
            d_model: u(1),
            embedding_dim: u(2),
            n_heads: u(3),
            n_layers: u(4),
            d_ffn: u(5),
            max_seq_len: u(6),
            n_buckets: (v[7] > 0).then(|| u(7)),
            n_hash_rounds: u(8),
            chunk_size: u(9),
            attention_dropout: f64::from_bits(v[10]),
            hidden_dropout: f64::from_bits(v[11]),
            seed: v[12],
            attention: if v[13] == 1 { AttentionKind::Full } else { AttentionKind::Lsh },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One encoder whose parameters live in a [`ParamStore`] under `prefix`.
#[derive(Clone, Debug)]
pub struct ReformerModel {
    pub cfg: ReformerConfig,
    prefix: String,
    token_embedding: String,
}

impl ReformerModel {
    pub fn new(cfg: ReformerConfig, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        Ok(ReformerModel {
            token_embedding: format!("{prefix}embed.tok"),
            prefix: prefix.to_string(),
            cfg,
        })
    }

    /// Reads the token embedding from another model's table instead of owning one.
    pub fn sharing_token_embedding(mut self, name: &str) -> Self {
        self.token_embedding = name.to_string();
        self
    }

    pub fn token_embedding_name(&self) -> &str {
        &self.token_embedding
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn name(&self, suffix: &str) -> String {
        format!("{}{}", self.prefix, suffix)
    }

    /// Registers every parameter of this model. A shared token embedding that
    /// is already present in the store is reused.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        let c = &self.cfg;
        if store.contains(&self.token_embedding) {
            let shape = store.get(&self.token_embedding)?.shape().to_vec();
            if shape != [c.vocab_size, c.embedding_dim] {
                return Err(Error::shape(&shape, &[c.vocab_size, c.embedding_dim], "shared token embedding"));
            }
        } else {
            store.init_normal(&self.token_embedding, &[c.vocab_size, c.embedding_dim], INIT_STD, rng)?;
        }
        if c.embedding_dim != c.d_model {
            store.init_normal(&self.name("embed.proj"), &[c.embedding_dim, c.d_model], INIT_STD, rng)?;
        }
        store.init_normal(&self.name("embed.pos"), &[c.max_seq_len, c.d_model], INIT_STD, rng)?;
        for i in 0..c.n_layers {
            let p = |s: &str| self.name(&format!("layer.{i}.{s}"));
            store.init_normal(&p("attn.qk"), &[c.d_model, c.d_model], INIT_STD, rng)?;
            store.init_normal(&p("attn.v"), &[c.d_model, c.d_model], INIT_STD, rng)?;
            store.init_normal(&p("attn.out"), &[c.d_model, c.d_model], INIT_STD, rng)?;
            store.init_const(&p("ln1.gamma"), &[c.d_model], 1.0)?;
            store.init_const(&p("ln1.beta"), &[c.d_model], 0.0)?;
            store.init_normal(&p("ffn.w1"), &[c.d_model, c.d_ffn], INIT_STD, rng)?;
            store.init_const(&p("ffn.b1"), &[c.d_ffn], 0.0)?;
            store.init_normal(&p("ffn.w2"), &[c.d_ffn, c.d_model], INIT_STD, rng)?;
            store.init_const(&p("ffn.b2"), &[c.d_model], 0.0)?;
            store.init_const(&p("ln2.gamma"), &[c.d_model], 1.0)?;
            store.init_const(&p("ln2.beta"), &[c.d_model], 0.0)?;
        }
        Ok(())
    }

    fn dropout(&self, g: &mut Graph, x: Var, p: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
        if mode == Mode::Eval || p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask = (0..g.value(x).len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        g.dropout_with_mask(x, mask)
    }

    /// Encodes `ids` into hidden states `[L, d_model]`.
    ///
    /// `key_valid[i] == false` marks a padding position, which no query attends to.
    /// `rng` drives dropout and is untouched in eval mode.
    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        store: &ParamStore,
        ids: &[usize],
        key_valid: &[bool],
        mode: Mode,
        rng: &mut Rng,
        instr: &mut AttentionInstrumentation,
    ) -> Result<Var> {
        self.forward_at(g, bind, store, ids, key_valid, 0, mode, rng, instr)
    }

    /// Like [`ReformerModel::forward`] but with position ids starting at
    /// `pos_start`; used to train position rows beyond short examples.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_at(
        &self,
        g: &mut Graph,
        bind: &mut Binding,
        store: &ParamStore,
        ids: &[usize],
        key_valid: &[bool],
        pos_start: usize,
        mode: Mode,
        rng: &mut Rng,
        instr: &mut AttentionInstrumentation,
    ) -> Result<Var> {
        let c = &self.cfg;
        let len = ids.len();
        if len + pos_start > c.max_seq_len {
            return Err(Error::Length {
                len: len + pos_start,
                max: c.max_seq_len,
            });
        }
        if len == 0 {
            return Err(Error::Contract("cannot encode an empty sequence".into()));
        }
        if key_valid.len() != len {
            return Err(Error::Shape(format!("{} key flags for {len} tokens", key_valid.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= c.vocab_size) {
            return Err(Error::Index(format!("token id {bad} outside vocabulary of {}", c.vocab_size)));
        }

        let tok_table = bind.named(g, store, &self.token_embedding)?;
        let mut x = g.embedding(tok_table, ids)?;
        if c.embedding_dim != c.d_model {
            let proj = bind.named(g, store, &self.name("embed.proj"))?;
            x = g.matmul(x, proj)?;
        }
        let pos_table = bind.named(g, store, &self.name("embed.pos"))?;
        let positions: Vec<usize> = (pos_start..pos_start + len).collect();
        let pos = g.embedding(pos_table, &positions)?;
        x = g.add(x, pos)?;
        x = self.dropout(g, x, c.hidden_dropout, mode, rng)?;

        for layer in 0..c.n_layers {
            let mut p = |s: &str| bind.named(g, store, &self.name(&format!("layer.{layer}.{s}")));
            let (wqk, wv, wout) = (p("attn.qk")?, p("attn.v")?, p("attn.out")?);
            let (g1, b1n) = (p("ln1.gamma")?, p("ln1.beta")?);
            let (w1, b1, w2, b2) = (p("ffn.w1")?, p("ffn.b1")?, p("ffn.w2")?, p("ffn.b2")?);
            let (g2, b2n) = (p("ln2.gamma")?, p("ln2.beta")?);

            let qk = g.matmul(x, wqk)?;
            let v = g.matmul(x, wv)?;
            let mut plans = head_plans(
                g.value(qk),
                len,
                c.d_model,
                c.n_heads,
                key_valid,
                c.attention,
                &c.lsh_settings(),
                c.seed,
                layer,
                instr,
            );
            if mode == Mode::Train && c.attention_dropout > 0.0 {
                for plan in &mut plans {
                    plan.apply_dropout(c.attention_dropout, rng);
                }
            }
            let attn = g.planned_attention(qk, v, plans, 1.0 / (c.d_head() as f64).sqrt())?;
            let attn = g.matmul(attn, wout)?;
            let attn = self.dropout(g, attn, c.hidden_dropout, mode, rng)?;
            let res = g.add(x, attn)?;
            x = g.layer_norm(res, g1, b1n)?;

            let h = g.linear(x, w1, b1)?;
            let h = g.gelu(h);
            let h = g.linear(h, w2, b2)?;
            let h = self.dropout(g, h, c.hidden_dropout, mode, rng)?;
            let res = g.add(x, h)?;
            x = g.layer_norm(res, g2, b2n)?;
        }
        Ok(x)
    }
}

/// Convenience forward pass that returns detached hidden states.
pub fn reformer_forward(model: &ReformerModel, store: &ParamStore, ids: &[usize], mode: Mode, rng: &mut Rng) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut bind = Binding::new();
    let mut instr = AttentionInstrumentation::default();
    let valid = vec![true; ids.len()];
    let h = model.forward(&mut g, &mut bind, store, ids, &valid, mode, rng, &mut instr)?;
    Ok(g.tensor(h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn model(cfg: ReformerConfig) -> (ReformerModel, ParamStore) {
        let m = ReformerModel::new(cfg, "").unwrap();
        let mut store = ParamStore::new();
        m.init_params(&mut store, &mut Rng::seed_from_u64(5)).unwrap();
        (m, store)
    }

    #[test]
    fn output_shape_and_eval_determinism() {
        let (m, store) = model(ReformerConfig::tiny(20));
        let mut rng = Rng::seed_from_u64(0);
        for len in [1, 3, 17] {
            let ids: Vec<usize> = (0..len).map(|i| i % 20).collect();
            let a = reformer_forward(&m, &store, &ids, Mode::Eval, &mut rng).unwrap();
            let b = reformer_forward(&m, &store, &ids, Mode::Eval, &mut rng).unwrap();
            assert_eq!(a.shape(), &[len, 8]);
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn errors_on_bad_input() {
        let (m, store) = model(ReformerConfig::tiny(20));
        let mut rng = Rng::seed_from_u64(0);
        assert!(matches!(
            reformer_forward(&m, &store, &[20], Mode::Eval, &mut rng),
            Err(Error::Index(_))
        ));
        let long = vec![1; 65];
        assert!(matches!(
            reformer_forward(&m, &store, &long, Mode::Eval, &mut rng),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = ReformerConfig::tiny(10);
        c.n_heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "n_heads"));
        let mut c = ReformerConfig::tiny(10);
        c.n_buckets = Some(3);
        assert!(c.validate().is_err());
        assert!(ReformerConfig::default().validate().is_ok());
    }

    #[test]
    fn parameter_names_follow_checkpoint_contract() {
        let (_, store) = model(ReformerConfig::tiny(20));
        for name in [
            "embed.tok",
            "embed.pos",
            "layer.0.attn.qk",
            "layer.0.attn.v",
            "layer.0.attn.out",
            "layer.0.ffn.w1",
            "layer.0.ffn.w2",
            "layer.0.ffn.b1",
            "layer.0.ffn.b2",
            "layer.0.ln1.gamma",
            "layer.0.ln1.beta",
            "layer.0.ln2.gamma",
            "layer.0.ln2.beta",
        ] {
            assert!(store.contains(name), "{name}");
        }
    }
}

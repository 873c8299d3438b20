//! Transformer text encoder trained from random initialisation.
//!
//! Post-norm BERT layout: token plus learned position embeddings, layer norm,
//! then `num_layers` blocks of multi-head self-attention and a GELU
//! feed-forward network, each wrapped in a residual connection and layer
//! norm. The `[CLS]` row of the last layer is the pooled sentence state.
//!
//! Dropout is active only when a seed is supplied. Masks are drawn from a
//! ChaCha stream seeded per call, so two passes with the same seed are
//! bitwise identical and two passes with different seeds give the twin
//! views used by the contrastive loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{self, INIT_STD};
use crate::params::{Matrix, ParameterStore};
use crate::text::{MaxLengths, TokenSequence, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_len: MaxLengths,
    /// Upper bound on vocabulary size when building from a corpus.
    pub vocab_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            dropout: 0.1,
            max_len: MaxLengths::default(),
            vocab_size: 8192,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_len.query", self.max_len.query),
            ("max_len.event", self.max_len.event),
            ("max_len.document", self.max_len.document),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder.{name} must be >= 1")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "encoder.hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "encoder.dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.max_len.query < 2 || self.max_len.event < 2 || self.max_len.document < 2 {
            return Err(Error::Config(
                "encoder.max_len values must leave room for [CLS] and [SEP]".into(),
            ));
        }
        if self.vocab_size <= crate::text::SPECIALS.len() {
            return Err(Error::Config("encoder.vocab_size too small".into()));
        }
        Ok(())
    }
}

/// Per-token final states (`L × C`) and the pooled `[CLS]` row (`1 × C`).
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub states: Matrix,
    pub pooled: Matrix,
    /// `attention_mask` of the sequence these states came from.
    pub mask: Vec<u8>,
}

/// Tape handles for an encoded sequence.
#[derive(Debug, Clone)]
pub struct EncodedVars {
    pub states: Var,
    pub pooled: Var,
    pub keep: Vec<bool>,
}

/// Seeded inverted dropout.
pub struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn new(rate: f64, seed: Option<u64>) -> Self {
        let rng = match seed {
            Some(s) if rate > 0.0 => Some(ChaCha8Rng::seed_from_u64(s)),
            _ => None,
        };
        Self { rate, rng }
    }

    pub fn apply(&mut self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        let keep = 1.0 - self.rate;
        let scale = 1.0 / keep;
        let mask = Matrix::from_shape_simple_fn(tape.shape(x), || {
            if rng.gen::<f64>() < keep {
                scale
            } else {
                0.0
            }
        });
        tape.mul_const(x, mask)
    }
}

/// Scaled dot-product attention over already projected `q`, `k`, `v`,
/// split into `heads` column blocks; returns the heads concatenated.
pub fn attend(
    tape: &mut Tape<'_>,
    q: Var,
    k: Var,
    v: Var,
    keep: &[bool],
    heads: usize,
) -> Result<Var> {
    let width = tape.shape(q).1;
    if tape.shape(k).1 != width || tape.shape(v).1 != width || !width.is_multiple_of(heads) {
        return Err(Error::DimensionMismatch(format!(
            "attention widths q={width} k={} v={} heads={heads}",
            tape.shape(k).1,
            tape.shape(v).1
        )));
    }
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, lo, hi)?,
                tape.slice_cols(k, lo, hi)?,
                tape.slice_cols(v, lo, hi)?,
            )
        };
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.masked_softmax(scores, keep)?;
        outs.push(tape.matmul(probs, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    prefix: String,
    config: EncoderConfig,
    vocab_size: usize,
}

impl Encoder {
    pub fn new(prefix: impl Into<String>, config: EncoderConfig, vocab_size: usize) -> Self {
        Self {
            prefix: prefix.into(),
            config,
            vocab_size,
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn init<R: Rng>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        let c = self.config.hidden_dim;
        let p = &self.prefix;
        store.insert_normal(format!("{p}.tok_emb"), self.vocab_size, c, INIT_STD, rng)?;
        store.insert_normal(
            format!("{p}.pos_emb"),
            self.config.max_len.longest(),
            c,
            INIT_STD,
            rng,
        )?;
        layers::init_layer_norm(store, &format!("{p}.emb_ln"), c)?;
        for l in 0..self.config.num_layers {
            let lp = format!("{p}.layer{l}");
            for proj in ["wq", "wk", "wv", "wo"] {
                layers::init_linear(store, &format!("{lp}.attn.{proj}"), c, c, rng)?;
            }
            layers::init_layer_norm(store, &format!("{lp}.attn_ln"), c)?;
            layers::init_linear(store, &format!("{lp}.ffn.fc1"), c, self.config.ffn_dim, rng)?;
            layers::init_linear(store, &format!("{lp}.ffn.fc2"), self.config.ffn_dim, c, rng)?;
            layers::init_layer_norm(store, &format!("{lp}.ffn_ln"), c)?;
        }
        Ok(())
    }

    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        tokens: &TokenSequence,
        dropout_seed: Option<u64>,
    ) -> Result<EncodedVars> {
        let p = &self.prefix;
        let len = tokens.len();
        if len == 0 || len != tokens.attention_mask.len() {
            return Err(Error::DimensionMismatch(
                "token ids and attention mask lengths differ".into(),
            ));
        }
        if len > self.config.max_len.longest() {
            return Err(Error::DimensionMismatch(format!(
                "sequence of {len} tokens exceeds {} positions",
                self.config.max_len.longest()
            )));
        }
        let keep: Vec<bool> = tokens.attention_mask.iter().map(|&m| m == 1).collect();
        if let Some(&id) = tokens
            .ids
            .iter()
            .zip(&keep)
            .find(|(&id, &k)| k && id >= self.vocab_size)
            .map(|(id, _)| id)
        {
            return Err(Error::TokenOutOfVocab {
                id,
                vocab_size: self.vocab_size,
            });
        }
        let ids: Vec<usize> = tokens
            .ids
            .iter()
            .zip(&keep)
            .map(|(&id, &k)| if k { id } else { Vocabulary::PAD_ID })
            .collect();
        let positions: Vec<usize> = (0..len).collect();

        let mut dropout = Dropout::new(self.config.dropout, dropout_seed);

        let tok_table = tape.param_named(&format!("{p}.tok_emb"))?;
        let pos_table = tape.param_named(&format!("{p}.pos_emb"))?;
        let tok = tape.gather(tok_table, &ids)?;
        let pos = tape.gather(pos_table, &positions)?;
        let x = tape.add(tok, pos)?;
        let x = layers::layer_norm(tape, x, &format!("{p}.emb_ln"))?;
        let mut x = dropout.apply(tape, x)?;

        for l in 0..self.config.num_layers {
            let lp = format!("{p}.layer{l}");
            let q = layers::linear(tape, x, &format!("{lp}.attn.wq"))?;
            let k = layers::linear(tape, x, &format!("{lp}.attn.wk"))?;
            let v = layers::linear(tape, x, &format!("{lp}.attn.wv"))?;
            let heads = attend(tape, q, k, v, &keep, self.config.num_heads)?;
            let attn = layers::linear(tape, heads, &format!("{lp}.attn.wo"))?;
            let attn = dropout.apply(tape, attn)?;
            let res = tape.add(x, attn)?;
            let h = layers::layer_norm(tape, res, &format!("{lp}.attn_ln"))?;

            let f = layers::linear(tape, h, &format!("{lp}.ffn.fc1"))?;
            let f = tape.gelu(f);
            let f = layers::linear(tape, f, &format!("{lp}.ffn.fc2"))?;
            let f = dropout.apply(tape, f)?;
            let res = tape.add(h, f)?;
            x = layers::layer_norm(tape, res, &format!("{lp}.ffn_ln"))?;
        }

        // Padded rows are zeroed so their content never reaches any output.
        if keep.iter().any(|k| !k) {
            let c = tape.shape(x).1;
            let mask = Matrix::from_shape_fn((len, c), |(r, _)| if keep[r] { 1.0 } else { 0.0 });
            x = tape.mul_const(x, mask)?;
        }
        let pooled = tape.row(x, 0);
        Ok(EncodedVars {
            states: x,
            pooled,
            keep,
        })
    }

    /// Inference-style forward returning plain matrices.
    pub fn encode(
        &self,
        tokens: &TokenSequence,
        params: &ParameterStore,
        dropout_seed: Option<u64>,
    ) -> Result<HiddenStates> {
        let mut tape = Tape::new(params);
        let out = self.forward(&mut tape, tokens, dropout_seed)?;
        Ok(HiddenStates {
            states: tape.value(out.states).to_owned(),
            pooled: tape.value(out.pooled).to_owned(),
            mask: tokens.attention_mask.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Field;

    fn tiny(dropout: f64) -> (Encoder, ParameterStore, Vocabulary) {
        let vocab = Vocabulary::build(["green poole conflict harbour news today"], 16).unwrap();
        let cfg = EncoderConfig {
            num_layers: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            dropout,
            ..EncoderConfig::default()
        };
        let enc = Encoder::new("enc", cfg, vocab.len());
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        enc.init(&mut store, &mut rng).unwrap();
        (enc, store, vocab)
    }

    #[test]
    fn seeded_dropout_is_bitwise_reproducible() {
        let (enc, store, vocab) = tiny(0.1);
        let t = vocab.tokenize("green poole conflict", Field::Query, &MaxLengths::default());
        let a = enc.encode(&t, &store, Some(42)).unwrap();
        let b = enc.encode(&t, &store, Some(42)).unwrap();
        assert_eq!(a, b);
        let c = enc.encode(&t, &store, Some(43)).unwrap();
        assert_ne!(a.states, c.states);
    }

    #[test]
    fn zero_rate_ignores_seed() {
        let (enc, store, vocab) = tiny(0.0);
        let t = vocab.tokenize("green news", Field::Query, &MaxLengths::default());
        let a = enc.encode(&t, &store, Some(1)).unwrap();
        let b = enc.encode(&t, &store, Some(2)).unwrap();
        let c = enc.encode(&t, &store, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn output_shape_is_l_by_c() {
        let (enc, store, vocab) = tiny(0.0);
        let t = vocab.tokenize("green poole conflict today", Field::Document, &MaxLengths::default());
        let h = enc.encode(&t, &store, None).unwrap();
        assert_eq!(h.states.dim(), (6, 8));
        assert_eq!(h.pooled.dim(), (1, 8));
        assert_eq!(h.pooled.row(0), h.states.row(0));
        assert!(h.states.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn padded_content_never_changes_outputs() {
        let (enc, store, vocab) = tiny(0.1);
        let t = vocab
            .tokenize("green poole", Field::Query, &MaxLengths::default())
            .padded(7);
        let mut other = t.clone();
        other.ids[5] = 9;
        other.ids[6] = 10_000;
        let a = enc.encode(&t, &store, Some(5)).unwrap();
        let b = enc.encode(&other, &store, Some(5)).unwrap();
        assert_eq!(a, b);
        assert!(a.states.row(6).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn out_of_range_id_is_rejected() {
        let (enc, store, vocab) = tiny(0.0);
        let mut t = vocab.tokenize("green", Field::Query, &MaxLengths::default());
        t.ids[1] = vocab.len();
        assert!(matches!(
            enc.encode(&t, &store, None),
            Err(Error::TokenOutOfVocab { .. })
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = EncoderConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.num_heads = 3;
        assert!(cfg.validate().is_err());
        cfg = EncoderConfig {
            dropout: 1.0,
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg = EncoderConfig {
            num_layers: 0,
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}

//! Post-layer-norm bidirectional Transformer encoder.
//!
//! Parameter names:
//! `embedding.{token,position,ln.gamma,ln.beta}` and
//! `encoder.layer{i}.{attn.{q,k,v,o},ffn.{in,out}}.{weight,bias}` plus
//! `encoder.layer{i}.{attn_ln,ffn_ln}.{gamma,beta}`. Linear weights are stored
//! `[in, out]`. The key projection has no bias: a per-query constant added to
//! every score cancels in the softmax, so its gradient is identically zero.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Mode, ParamStore, Rng, Tensor, Var};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;
/// Additive attention logit for padded keys.
pub const PAD_LOGIT: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub ffn_inner_size: usize,
    pub num_heads: usize,
    pub head_size: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub max_position: usize,
    pub vocab_size: usize,
}

impl EncoderConfig {
    /// Two layers, hidden 64, four heads of 16, FFN 256.
    pub fn desk(vocab_size: usize) -> Self {
        EncoderConfig {
            num_layers: 2,
            hidden_size: 64,
            ffn_inner_size: 256,
            num_heads: 4,
            head_size: 16,
            dropout: 0.1,
            attention_dropout: 0.1,
            max_position: 128,
            vocab_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("ffn_inner_size", self.ffn_inner_size),
            ("num_heads", self.num_heads),
            ("head_size", self.head_size),
            ("max_position", self.max_position),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder.{name} must be at least 1")));
        }
        if self.num_heads * self.head_size != self.hidden_size {
            return Err(Error::Config(format!(
                "hidden_size {} != num_heads {} x head_size {}",
                self.hidden_size, self.num_heads, self.head_size
            )));
        }
        for (name, p) in [("dropout", self.dropout), ("attention_dropout", self.attention_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("encoder.{name} = {p} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Token ids and key mask of a right-padded batch, row-major `batch x len`.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    pub input_ids: &'a [usize],
    pub attention_mask: &'a [bool],
    pub batch: usize,
    pub len: usize,
}

impl<'a> EncoderInput<'a> {
    pub fn from_batch(b: &'a crate::corpus::MaskedBatch) -> Self {
        EncoderInput {
            input_ids: &b.input_ids,
            attention_mask: &b.attention_mask,
            batch: b.batch,
            len: b.max_len,
        }
    }
}

/// Encoder output: `representations` is `[batch, len, hidden]`.
#[derive(Clone, Debug)]
pub struct ContextBatch {
    pub representations: Var,
    pub batch: usize,
    pub len: usize,
    pub attention_mask: Vec<bool>,
    /// Per-layer attention probabilities, `[batch * heads, len, len]`.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
}

fn linear(g: &mut Graph, store: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let w = g.param(store, &format!("{prefix}.weight"))?;
    let b = g.param(store, &format!("{prefix}.bias"))?;
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

pub(crate) fn init_linear(store: &mut ParamStore, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
    store.insert(format!("{prefix}.weight"), Tensor::randn(&[fan_in, fan_out], INIT_STD, rng));
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
}

fn init_ln(store: &mut ParamStore, prefix: &str, width: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::ones(&[width]));
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[width]));
}

fn layer_norm(g: &mut Graph, store: &ParamStore, x: Var, prefix: &str) -> Result<Var> {
    let gamma = g.param(store, &format!("{prefix}.gamma"))?;
    let beta = g.param(store, &format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Encoder { config })
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut Rng) {
        let c = &self.config;
        let h = c.hidden_size;
        store.insert("embedding.token", Tensor::randn(&[c.vocab_size, h], INIT_STD, rng));
        store.insert("embedding.position", Tensor::randn(&[c.max_position, h], INIT_STD, rng));
        init_ln(store, "embedding.ln", h);
        for l in 0..c.num_layers {
            let p = format!("encoder.layer{l}");
            for name in ["q", "k", "v", "o"] {
                init_linear(store, &format!("{p}.attn.{name}"), h, h, rng);
            }
            store.remove(&format!("{p}.attn.k.bias"));
            init_ln(store, &format!("{p}.attn_ln"), h);
            init_linear(store, &format!("{p}.ffn.in"), h, c.ffn_inner_size, rng);
            init_linear(store, &format!("{p}.ffn.out"), c.ffn_inner_size, h, rng);
            init_ln(store, &format!("{p}.ffn_ln"), h);
        }
    }

    /// Token + position embedding, layer norm, dropout. Positions run
    /// `0..len` in every row. Returns `[batch * len, hidden]`.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, input: &EncoderInput, mode: Mode, rng: &mut Rng) -> Result<Var> {
        let EncoderInput { input_ids, batch, len, .. } = *input;
        if input_ids.len() != batch * len {
            return Err(Error::shape("embed", &[batch, len], &[input_ids.len()]));
        }
        if len > self.config.max_position {
            return Err(Error::invalid(
                "embed",
                format!("sequence length {len} exceeds max_position {}", self.config.max_position),
            ));
        }
        let tok_table = g.param(store, "embedding.token")?;
        let pos_table = g.param(store, "embedding.position")?;
        let tok = g.embedding(tok_table, input_ids)?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let pos = g.embedding(pos_table, &positions)?;
        let x = g.add(tok, pos)?;
        let x = layer_norm(g, store, x, "embedding.ln")?;
        g.dropout(x, self.config.dropout, mode, rng)
    }

    /// Runs all layers over `embedded` (`[batch * len, hidden]`).
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        embedded: Var,
        input: &EncoderInput,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<ContextBatch> {
        let EncoderInput { attention_mask, batch, len, .. } = *input;
        let c = &self.config;
        let h = c.hidden_size;
        if attention_mask.len() != batch * len {
            return Err(Error::shape("encode", &[batch, len], &[attention_mask.len()]));
        }
        if g.shape(embedded) != [batch * len, h] {
            return Err(Error::shape("encode", &[batch * len, h], g.shape(embedded)));
        }
        let heads = c.num_heads;
        let hs = c.head_size;

        let mut bias = Vec::with_capacity(batch * heads * len * len);
        for b in 0..batch {
            let key_bias: Vec<f64> = attention_mask[b * len..(b + 1) * len]
                .iter()
                .map(|&m| if m { 0.0 } else { PAD_LOGIT })
                .collect();
            for _ in 0..heads * len {
                bias.extend_from_slice(&key_bias);
            }
        }
        let mask_bias = g.constant(Tensor::new(vec![batch * heads, len, len], bias)?);

        let split = |g: &mut Graph, x: Var| -> Result<Var> {
            let x = g.reshape(x, &[batch, len, heads, hs])?;
            let x = g.transpose(x, &[0, 2, 1, 3])?;
            g.reshape(x, &[batch * heads, len, hs])
        };

        let mut x = embedded;
        let mut attention = Vec::with_capacity(c.num_layers);
        for l in 0..c.num_layers {
            let p = format!("encoder.layer{l}");
            let q = linear(g, store, x, &format!("{p}.attn.q"))?;
            let wk = g.param(store, &format!("{p}.attn.k.weight"))?;
            let k = g.matmul(x, wk)?;
            let v = linear(g, store, x, &format!("{p}.attn.v"))?;
            let q = split(g, q)?;
            let k = split(g, k)?;
            let v = split(g, v)?;
            let kt = g.transpose(k, &[0, 2, 1])?;
            let scores = g.matmul(q, kt)?;
            let scores = g.scale(scores, 1.0 / (hs as f64).sqrt())?;
            let scores = g.add(scores, mask_bias)?;
            let probs = g.softmax(scores)?;
            attention.push(probs);
            let probs = g.dropout(probs, c.attention_dropout, mode, rng)?;
            let ctx = g.matmul(probs, v)?;
            let ctx = g.reshape(ctx, &[batch, heads, len, hs])?;
            let ctx = g.transpose(ctx, &[0, 2, 1, 3])?;
            let ctx = g.reshape(ctx, &[batch * len, h])?;
            let attn_out = linear(g, store, ctx, &format!("{p}.attn.o"))?;
            let attn_out = g.dropout(attn_out, c.dropout, mode, rng)?;
            let res = g.add(x, attn_out)?;
            x = layer_norm(g, store, res, &format!("{p}.attn_ln"))?;

            let inner = linear(g, store, x, &format!("{p}.ffn.in"))?;
            let inner = g.gelu(inner)?;
            let ffn_out = linear(g, store, inner, &format!("{p}.ffn.out"))?;
            let ffn_out = g.dropout(ffn_out, c.dropout, mode, rng)?;
            let res = g.add(x, ffn_out)?;
            x = layer_norm(g, store, res, &format!("{p}.ffn_ln"))?;
        }
        let representations = g.reshape(x, &[batch, len, h])?;
        Ok(ContextBatch {
            representations,
            batch,
            len,
            attention_mask: attention_mask.to_vec(),
            attention,
        })
    }

    /// `embed` followed by `encode`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, input: &EncoderInput, mode: Mode, rng: &mut Rng) -> Result<ContextBatch> {
        let e = self.embed(g, store, input, mode, rng)?;
        self.encode(g, store, e, input, mode, rng)
    }
}

impl ContextBatch {
    /// Representations flattened to `[batch * len, hidden]`.
    pub fn rows(&self, g: &mut Graph) -> Result<Var> {
        let h = *g.shape(self.representations).last().unwrap();
        g.reshape(self.representations, &[self.batch * self.len, h])
    }
}

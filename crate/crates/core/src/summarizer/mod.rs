//! Transformer encoder-decoder with topic-aware gating.
//!
//! Encoder and decoder are pre-norm stacks with sinusoidal positions. After
//! the encoder, every state (CLS included) is blended with a topic-aware
//! projection of `[h_i; θ]`:
//!
//! ```text
//! λ_E  = σ(h_cls W_E + b_E)
//! c_i  = tanh([h_i; θ] W_c + b_c)
//! h'_i = λ_E ⊙ c_i + (1 − λ_E) ⊙ h_i
//! ```
//!
//! The decoder output is gated the same way with
//! `λ_D = σ(h'_cls W1_D + s_cls W2_D + b_D)`.

mod beam;

pub use beam::{beam_search, greedy, normalized_score, rank, BeamConfig, Hypothesis, StepScorer};

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::corpus::{Batch, CLS};
use crate::numerics::{AttentionSpec, Graph, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;
const PREFIX: &str = "sum";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers_enc: usize,
    pub layers_dec: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
    pub dropout: f64,
    /// Share the input embedding with the output projection.
    pub tie_embeddings: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers_enc: 2,
            layers_dec: 2,
            model_dim: 128,
            heads: 4,
            ffn_dim: 256,
            max_positions: 512,
            dropout: 0.1,
            tie_embeddings: true,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.layers_enc,
            self.layers_dec,
            self.model_dim,
            self.heads,
            self.ffn_dim,
            self.max_positions,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("transformer dimensions must be positive: {self:?}")));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

/// How the gate values λ are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum GateMode {
    #[default]
    Learned,
    /// Every gate component pinned to the given value.
    Forced(f64),
}

/// Dropout is active only in `Train`.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    ln_attn: Norm,
    attn: Attention,
    ln_ff: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone, Copy)]
struct DecoderLayer {
    ln_self: Norm,
    self_attn: Attention,
    ln_cross: Norm,
    cross_attn: Attention,
    ln_ff: Norm,
    ff: FeedForward,
}

/// Gate and topic-projection parameters.
#[derive(Debug, Clone, Copy)]
pub struct GateParams {
    enc: Linear,
    enc_topic: Linear,
    dec_w1: ParamId,
    dec_w2: ParamId,
    dec_b: ParamId,
    dec_topic: Linear,
}

enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

/// Creates fresh parameters or re-binds existing ones by name.
enum Builder<'a> {
    Create {
        store: &'a mut ParamStore,
        rng: &'a mut dyn RngCore,
    },
    Lookup(&'a ParamStore),
}

impl Builder<'_> {
    fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let name = format!("{PREFIX}.{name}");
        match self {
            Builder::Create { store, rng } => Ok(match init {
                Init::Normal(std) => store.add_normal(name, shape, std, *rng),
                Init::Zeros => store.add_zeros(name, shape),
                Init::Ones => store.add_full(name, shape, 1.0),
            }),
            Builder::Lookup(store) => {
                let id = store
                    .find(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
                if store.value(id).shape() != shape {
                    return Err(Error::Checkpoint(format!(
                        "{name}: expected shape {shape:?}, found {:?}",
                        store.value(id).shape()
                    )));
                }
                Ok(id)
            }
        }
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        Ok(Linear {
            w: self.param(
                &format!("{name}.weight"),
                &[fan_in, fan_out],
                Init::Normal(1.0 / (fan_in as f64).sqrt()),
            )?,
            b: self.param(&format!("{name}.bias"), &[fan_out], Init::Zeros)?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<Norm> {
        Ok(Norm {
            gain: self.param(&format!("{name}.gain"), &[d], Init::Ones)?,
            bias: self.param(&format!("{name}.bias"), &[d], Init::Zeros)?,
        })
    }

    fn attention(&mut self, name: &str, d: usize) -> Result<Attention> {
        Ok(Attention {
            q: self.linear(&format!("{name}.q"), d, d)?,
            k: self.linear(&format!("{name}.k"), d, d)?,
            v: self.linear(&format!("{name}.v"), d, d)?,
            o: self.linear(&format!("{name}.o"), d, d)?,
        })
    }

    fn feed_forward(&mut self, name: &str, d: usize, f: usize) -> Result<FeedForward> {
        Ok(FeedForward {
            up: self.linear(&format!("{name}.up"), d, f)?,
            down: self.linear(&format!("{name}.down"), f, d)?,
        })
    }
}

/// Encoder output for a batch, `h: [batch * len, d]`.
#[derive(Debug, Clone)]
pub struct EncoderStates {
    pub h: Var,
    pub batch: usize,
    pub len: usize,
    pub mask: Vec<bool>,
}

impl EncoderStates {
    fn cls_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.len).collect()
    }
}

/// Result of a teacher-forced pass.
#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    /// Gated decoder states `[B * M, d]` (ungated when the topic path is off).
    pub states: Var,
    /// `[B * M, V_tok]`
    pub logits: Var,
    pub encoder_gate: Option<Var>,
    pub decoder_gate: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Summarizer {
    pub config: TransformerConfig,
    pub vocab_size: usize,
    pub topics: usize,
    embed: ParamId,
    out_proj: Option<ParamId>,
    out_bias: ParamId,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
    pub gates: GateParams,
}

fn repeat_rows(per_example: usize, batch: usize) -> Vec<usize> {
    (0..batch).flat_map(|b| std::iter::repeat_n(b, per_example)).collect()
}

/// Sinusoidal position table for `len` positions, tiled over `batch`.
pub fn positional_encoding(batch: usize, len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(batch * len * d);
    for _ in 0..batch {
        for pos in 0..len {
            for i in 0..d {
                let exponent = (2 * (i / 2)) as f64 / d as f64;
                let angle = pos as f64 / 10000f64.powf(exponent);
                data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
            }
        }
    }
    Tensor::new(vec![batch * len, d], data).expect("shape")
}

impl Summarizer {
    pub fn new<R: Rng>(
        config: TransformerConfig,
        vocab_size: usize,
        topics: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        Self::build(config, vocab_size, topics, Builder::Create { store, rng })
    }

    pub fn from_store(config: TransformerConfig, vocab_size: usize, topics: usize, store: &ParamStore) -> Result<Self> {
        Self::build(config, vocab_size, topics, Builder::Lookup(store))
    }

    fn build(config: TransformerConfig, vocab_size: usize, topics: usize, mut b: Builder<'_>) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 || topics == 0 {
            return Err(Error::Config("vocabulary size and topic count must be positive".into()));
        }
        let d = config.model_dim;
        let f = config.ffn_dim;
        let embed = b.param("embed", &[vocab_size, d], Init::Normal(1.0 / (d as f64).sqrt()))?;
        let mut encoder = Vec::with_capacity(config.layers_enc);
        for l in 0..config.layers_enc {
            encoder.push(EncoderLayer {
                ln_attn: b.norm(&format!("enc.{l}.ln_attn"), d)?,
                attn: b.attention(&format!("enc.{l}.attn"), d)?,
                ln_ff: b.norm(&format!("enc.{l}.ln_ff"), d)?,
                ff: b.feed_forward(&format!("enc.{l}.ff"), d, f)?,
            });
        }
        let enc_norm = b.norm("enc.ln_out", d)?;
        let mut decoder = Vec::with_capacity(config.layers_dec);
        for l in 0..config.layers_dec {
            decoder.push(DecoderLayer {
                ln_self: b.norm(&format!("dec.{l}.ln_self"), d)?,
                self_attn: b.attention(&format!("dec.{l}.self_attn"), d)?,
                ln_cross: b.norm(&format!("dec.{l}.ln_cross"), d)?,
                cross_attn: b.attention(&format!("dec.{l}.cross_attn"), d)?,
                ln_ff: b.norm(&format!("dec.{l}.ln_ff"), d)?,
                ff: b.feed_forward(&format!("dec.{l}.ff"), d, f)?,
            });
        }
        let dec_norm = b.norm("dec.ln_out", d)?;
        let out_proj = if config.tie_embeddings {
            None
        } else {
            Some(b.param("out.weight", &[vocab_size, d], Init::Normal(1.0 / (d as f64).sqrt()))?)
        };
        let out_bias = b.param("out.bias", &[vocab_size], Init::Zeros)?;
        let std = 1.0 / (d as f64).sqrt();
        let gates = GateParams {
            enc: b.linear("gate.enc", d, d)?,
            enc_topic: b.linear("gate.enc_topic", d + topics, d)?,
            dec_w1: b.param("gate.dec.w1", &[d, d], Init::Normal(std))?,
            dec_w2: b.param("gate.dec.w2", &[d, d], Init::Normal(std))?,
            dec_b: b.param("gate.dec.bias", &[d], Init::Zeros)?,
            dec_topic: b.linear("gate.dec_topic", d + topics, d)?,
        };
        Ok(Self {
            config,
            vocab_size,
            topics,
            embed,
            out_proj,
            out_bias,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
            gates,
        })
    }

    /// Gate-matrix handles `(W_E, b_E, W1_D, W2_D, b_D)`, for tests and
    /// diagnostics.
    pub fn gate_param_ids(&self) -> [ParamId; 5] {
        let g = &self.gates;
        [g.enc.w, g.enc.b, g.dec_w1, g.dec_w2, g.dec_b]
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embed
    }

    pub fn output_bias_id(&self) -> ParamId {
        self.out_bias
    }

    fn linear(g: &mut Graph, store: &ParamStore, x: Var, l: Linear) -> Result<Var> {
        let w = g.param(store, l.w)?;
        let b = g.param(store, l.b)?;
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }

    fn norm(g: &mut Graph, store: &ParamStore, x: Var, n: Norm) -> Result<Var> {
        let y = g.layer_norm(x, LN_EPS)?;
        let gain = g.param(store, n.gain)?;
        let bias = g.param(store, n.bias)?;
        let y = g.mul_row(y, gain)?;
        Ok(g.add_row(y, bias)?)
    }

    fn dropout(&self, g: &mut Graph, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
        let p = self.config.dropout;
        let Mode::Train(rng) = mode else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = g.constant(Tensor::new(shape, data)?)?;
        Ok(g.mul(x, mask)?)
    }

    fn attention(
        g: &mut Graph,
        store: &ParamStore,
        p: &Attention,
        xq: Var,
        xkv: Var,
        spec: AttentionSpec,
    ) -> Result<Var> {
        let q = Self::linear(g, store, xq, p.q)?;
        let k = Self::linear(g, store, xkv, p.k)?;
        let v = Self::linear(g, store, xkv, p.v)?;
        let a = g.attention(q, k, v, spec)?;
        Self::linear(g, store, a, p.o)
    }

    fn feed_forward(g: &mut Graph, store: &ParamStore, x: Var, p: &FeedForward) -> Result<Var> {
        let h = Self::linear(g, store, x, p.up)?;
        let h = g.relu(h)?;
        Self::linear(g, store, h, p.down)
    }

    fn embed_tokens(&self, g: &mut Graph, store: &ParamStore, ids: &[usize], batch: usize, len: usize) -> Result<Var> {
        if len > self.config.max_positions {
            return Err(Error::Model(format!(
                "sequence length {len} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        if ids.len() != batch * len {
            return Err(Error::Model(format!("expected {} ids, got {}", batch * len, ids.len())));
        }
        let d = self.config.model_dim;
        let table = g.param(store, self.embed)?;
        let e = g.gather_rows(table, ids)?;
        let e = g.scale(e, (d as f64).sqrt())?;
        let pe = g.constant(positional_encoding(batch, len, d))?;
        Ok(g.add(e, pe)?)
    }

    /// Encodes a right-padded `[batch, len]` id matrix whose rows start with CLS.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ids: &[usize],
        mask: &[bool],
        batch: usize,
        len: usize,
        mode: &mut Mode<'_>,
    ) -> Result<EncoderStates> {
        if mask.len() != ids.len() {
            return Err(Error::Model("source mask and ids differ in length".into()));
        }
        if (0..batch).any(|b| ids[b * len] != CLS || !mask[b * len]) {
            return Err(Error::Model("every source row must start with [CLS]".into()));
        }
        let x = self.embed_tokens(g, store, ids, batch, len)?;
        let mut x = self.dropout(g, x, mode)?;
        let spec = AttentionSpec {
            batch,
            heads: self.config.heads,
            q_len: len,
            k_len: len,
            key_mask: mask.to_vec(),
            causal: false,
        };
        for layer in &self.encoder {
            let h = Self::norm(g, store, x, layer.ln_attn)?;
            let a = Self::attention(g, store, &layer.attn, h, h, spec.clone())?;
            let a = self.dropout(g, a, mode)?;
            x = g.add(x, a)?;
            let h = Self::norm(g, store, x, layer.ln_ff)?;
            let f = Self::feed_forward(g, store, h, &layer.ff)?;
            let f = self.dropout(g, f, mode)?;
            x = g.add(x, f)?;
        }
        let h = Self::norm(g, store, x, self.enc_norm)?;
        Ok(EncoderStates {
            h,
            batch,
            len,
            mask: mask.to_vec(),
        })
    }

    /// `λ ⊙ c + (1 − λ) ⊙ h` with per-example `λ: [B, d]` and `θ: [B, T]`
    /// broadcast over `per_example` rows of `h`.
    fn blend(
        g: &mut Graph,
        store: &ParamStore,
        h: Var,
        lambda: Var,
        theta: Var,
        topic: Linear,
        per_example: usize,
        batch: usize,
    ) -> Result<Var> {
        let rows = repeat_rows(per_example, batch);
        let lam = g.gather_rows(lambda, &rows)?;
        let th = g.gather_rows(theta, &rows)?;
        let u = g.concat(h, th)?;
        let c = Self::linear(g, store, u, topic)?;
        let c = g.tanh(c)?;
        let a = g.mul(lam, c)?;
        let keep = g.one_minus(lam)?;
        let b = g.mul(keep, h)?;
        Ok(g.add(a, b)?)
    }

    fn forced(g: &mut Graph, batch: usize, d: usize, value: f64) -> Result<Var> {
        Ok(g.constant(Tensor::full(&[batch, d], value))?)
    }

    fn check_theta(&self, g: &Graph, theta: Var, batch: usize) -> Result<()> {
        if g.shape(theta) != [batch, self.topics] {
            return Err(Error::Model(format!(
                "topic mixture has shape {:?}, expected [{batch}, {}]",
                g.shape(theta),
                self.topics
            )));
        }
        Ok(())
    }

    /// Gates every encoder state, returning the new states and `λ_E: [B, d]`.
    pub fn encoder_gate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        states: &EncoderStates,
        theta: Var,
        mode: GateMode,
    ) -> Result<(EncoderStates, Var)> {
        self.check_theta(g, theta, states.batch)?;
        let lambda = match mode {
            GateMode::Learned => {
                let cls = g.gather_rows(states.h, &states.cls_rows())?;
                let pre = Self::linear(g, store, cls, self.gates.enc)?;
                g.sigmoid(pre)?
            }
            GateMode::Forced(v) => Self::forced(g, states.batch, self.config.model_dim, v)?,
        };
        let h = Self::blend(
            g,
            store,
            states.h,
            lambda,
            theta,
            self.gates.enc_topic,
            states.len,
            states.batch,
        )?;
        Ok((
            EncoderStates {
                h,
                ..states.clone()
            },
            lambda,
        ))
    }

    /// Runs the decoder over a right-padded `[batch, len]` prefix matrix whose
    /// rows start with CLS. Returns ungated states `[batch * len, d]`.
    pub fn decode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        encoded: &EncoderStates,
        ids: &[usize],
        mask: &[bool],
        len: usize,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let batch = encoded.batch;
        if mask.len() != ids.len() {
            return Err(Error::Model("target mask and ids differ in length".into()));
        }
        let x = self.embed_tokens(g, store, ids, batch, len)?;
        let mut x = self.dropout(g, x, mode)?;
        let self_spec = AttentionSpec {
            batch,
            heads: self.config.heads,
            q_len: len,
            k_len: len,
            key_mask: mask.to_vec(),
            causal: true,
        };
        let cross_spec = AttentionSpec {
            batch,
            heads: self.config.heads,
            q_len: len,
            k_len: encoded.len,
            key_mask: encoded.mask.clone(),
            causal: false,
        };
        for layer in &self.decoder {
            let h = Self::norm(g, store, x, layer.ln_self)?;
            let a = Self::attention(g, store, &layer.self_attn, h, h, self_spec.clone())?;
            let a = self.dropout(g, a, mode)?;
            x = g.add(x, a)?;
            let h = Self::norm(g, store, x, layer.ln_cross)?;
            let a = Self::attention(g, store, &layer.cross_attn, h, encoded.h, cross_spec.clone())?;
            let a = self.dropout(g, a, mode)?;
            x = g.add(x, a)?;
            let h = Self::norm(g, store, x, layer.ln_ff)?;
            let f = Self::feed_forward(g, store, h, &layer.ff)?;
            let f = self.dropout(g, f, mode)?;
            x = g.add(x, f)?;
        }
        Self::norm(g, store, x, self.dec_norm)
    }

    /// Gates decoder states `s: [B * len, d]` with
    /// `λ_D = σ(h'_cls W1 + s_cls W2 + b)`; returns `(s', λ_D)`.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_gate(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        s: Var,
        h_cls: Var,
        s_cls: Var,
        theta: Var,
        len: usize,
        mode: GateMode,
    ) -> Result<(Var, Var)> {
        let batch = g.shape(h_cls)[0];
        self.check_theta(g, theta, batch)?;
        let lambda = match mode {
            GateMode::Learned => {
                let w1 = g.param(store, self.gates.dec_w1)?;
                let w2 = g.param(store, self.gates.dec_w2)?;
                let b = g.param(store, self.gates.dec_b)?;
                let a = g.matmul(h_cls, w1)?;
                let c = g.matmul(s_cls, w2)?;
                let pre = g.add(a, c)?;
                let pre = g.add_row(pre, b)?;
                g.sigmoid(pre)?
            }
            GateMode::Forced(v) => Self::forced(g, batch, self.config.model_dim, v)?,
        };
        let out = Self::blend(g, store, s, lambda, theta, self.gates.dec_topic, len, batch)?;
        Ok((out, lambda))
    }

    /// `s E_outᵀ + b_out`, `[rows, V_tok]`.
    pub fn project_logits(&self, g: &mut Graph, store: &ParamStore, s: Var) -> Result<Var> {
        let table = g.param(store, self.out_proj.unwrap_or(self.embed))?;
        let t = g.transpose(table)?;
        let b = g.param(store, self.out_bias)?;
        let y = g.matmul(s, t)?;
        Ok(g.add_row(y, b)?)
    }

    /// Encoder, gates and decoder over teacher-forced prefixes. With
    /// `theta == None` the topic path is skipped entirely.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_ids(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        src: (&[usize], &[bool], usize),
        tgt: (&[usize], &[bool], usize),
        batch: usize,
        theta: Option<Var>,
        gate: GateMode,
        mode: &mut Mode<'_>,
    ) -> Result<DecoderOutput> {
        let encoded = self.encode(g, store, src.0, src.1, batch, src.2, mode)?;
        let (encoded, enc_lambda) = match theta {
            Some(t) => {
                let (e, l) = self.encoder_gate(g, store, &encoded, t, gate)?;
                (e, Some(l))
            }
            None => (encoded, None),
        };
        let (ids, mask, len) = tgt;
        if (0..batch).any(|b| ids[b * len] != CLS) {
            return Err(Error::Model("every decoder prefix must start with [CLS]".into()));
        }
        let s = self.decode(g, store, &encoded, ids, mask, len, mode)?;
        let (states, dec_lambda) = match theta {
            Some(t) => {
                let h_cls = g.gather_rows(encoded.h, &encoded.cls_rows())?;
                let s_rows: Vec<usize> = (0..batch).map(|b| b * len).collect();
                let s_cls = g.gather_rows(s, &s_rows)?;
                let (out, l) = self.decoder_gate(g, store, s, h_cls, s_cls, t, len, gate)?;
                (out, Some(l))
            }
            None => (s, None),
        };
        let logits = self.project_logits(g, store, states)?;
        Ok(DecoderOutput {
            states,
            logits,
            encoder_gate: enc_lambda,
            decoder_gate: dec_lambda,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        theta: Option<Var>,
        gate: GateMode,
        mode: &mut Mode<'_>,
    ) -> Result<DecoderOutput> {
        self.forward_ids(
            g,
            store,
            (&batch.src_ids, &batch.src_mask, batch.src_len),
            (&batch.tgt_in, &batch.tgt_mask, batch.tgt_len),
            batch.size,
            theta,
            gate,
            mode,
        )
    }

    /// Gated encoder output of one document, ready for step-wise decoding.
    pub fn prepare(
        &self,
        store: &ParamStore,
        src_ids: &[usize],
        theta: Option<&[f64]>,
        gate: GateMode,
    ) -> Result<DecodingContext> {
        let mut g = Graph::new();
        let len = src_ids.len();
        let mask = vec![true; len];
        let encoded = self.encode(&mut g, store, src_ids, &mask, 1, len, &mut Mode::Eval)?;
        let (h, theta) = match theta {
            Some(t) => {
                let tv = g.constant(Tensor::row_vector(t.to_vec()))?;
                let (e, _) = self.encoder_gate(&mut g, store, &encoded, tv, gate)?;
                (g.value(e.h).clone(), Some(t.to_vec()))
            }
            None => (g.value(encoded.h).clone(), None),
        };
        Ok(DecodingContext {
            h,
            len,
            theta,
            gate,
        })
    }
}

/// Gated encoder states of a single document.
#[derive(Debug, Clone)]
pub struct DecodingContext {
    h: Tensor,
    len: usize,
    theta: Option<Vec<f64>>,
    gate: GateMode,
}

fn tile(t: &Tensor, times: usize) -> Tensor {
    let mut data = Vec::with_capacity(t.len() * times);
    for _ in 0..times {
        data.extend_from_slice(t.data());
    }
    let mut shape = t.shape().to_vec();
    shape[0] *= times;
    Tensor::new(shape, data).expect("shape")
}

/// Next-token scorer backed by the summarizer for one document.
pub struct ModelScorer<'a> {
    pub model: &'a Summarizer,
    pub store: &'a ParamStore,
    pub context: &'a DecodingContext,
}

impl StepScorer for ModelScorer<'_> {
    fn next_log_probs(&mut self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let k = prefixes.len();
        let len = prefixes.first().map_or(0, Vec::len) + 1;
        if prefixes.iter().any(|p| p.len() + 1 != len) {
            return Err(Error::Model("beam prefixes must share one length".into()));
        }
        let ctx = self.context;
        let mut g = Graph::new();
        let h = g.constant(tile(&ctx.h, k))?;
        let encoded = EncoderStates {
            h,
            batch: k,
            len: ctx.len,
            mask: vec![true; k * ctx.len],
        };
        let ids: Vec<usize> = prefixes
            .iter()
            .flat_map(|p| std::iter::once(CLS).chain(p.iter().copied()))
            .collect();
        let mask = vec![true; ids.len()];
        let s = self.model.decode(&mut g, self.store, &encoded, &ids, &mask, len, &mut Mode::Eval)?;
        let s = match &ctx.theta {
            Some(t) => {
                let theta = g.constant(tile(&Tensor::row_vector(t.clone()), k))?;
                let h_cls = g.gather_rows(encoded.h, &encoded.cls_rows())?;
                let s_rows: Vec<usize> = (0..k).map(|b| b * len).collect();
                let s_cls = g.gather_rows(s, &s_rows)?;
                self.model
                    .decoder_gate(&mut g, self.store, s, h_cls, s_cls, theta, len, ctx.gate)?
                    .0
            }
            None => s,
        };
        let last: Vec<usize> = (0..k).map(|b| b * len + len - 1).collect();
        let s_last = g.gather_rows(s, &last)?;
        let logits = self.model.project_logits(&mut g, self.store, s_last)?;
        let lp = g.log_softmax(logits)?;
        let v = g.value(lp);
        Ok((0..k).map(|i| v.row(i).to_vec()).collect())
    }
}

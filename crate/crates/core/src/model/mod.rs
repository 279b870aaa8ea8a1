//! Pre-norm transformer encoder–decoder with layer-normalized embeddings,
//! a shared embedding/output matrix and mean-pooled sentence
//! representations.

mod decode;
mod params;

pub use decode::{beam_search, greedy_search, ModelScorer, StepScorer};
pub use params::ParamStore;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::KeyValues;
use crate::corpus::EncoderInput;
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    /// Include the language-indicator position in the pooled representation.
    pub pool_lang_token: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers_enc: 2,
            n_layers_dec: 2,
            d_model: 64,
            n_heads: 4,
            d_ffn: 256,
            max_len: 64,
            dropout: 0.1,
            vocab_size: 0,
            pool_lang_token: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.n_layers_enc,
            self.n_layers_dec,
            self.d_model,
            self.n_heads,
            self.d_ffn,
            self.max_len,
            self.vocab_size,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn write_to(&self, kv: &mut KeyValues) {
        kv.set("n_layers_enc", self.n_layers_enc);
        kv.set("n_layers_dec", self.n_layers_dec);
        kv.set("d_model", self.d_model);
        kv.set("n_heads", self.n_heads);
        kv.set("d_ffn", self.d_ffn);
        kv.set("max_len", self.max_len);
        kv.set("dropout", self.dropout);
        kv.set("vocab_size", self.vocab_size);
        kv.set("pool_lang_token", self.pool_lang_token);
    }

    /// Overrides fields present in `kv`.
    pub fn read_from(&mut self, kv: &KeyValues) -> Result<()> {
        kv.read_into("n_layers_enc", &mut self.n_layers_enc)?;
        kv.read_into("n_layers_dec", &mut self.n_layers_dec)?;
        kv.read_into("d_model", &mut self.d_model)?;
        kv.read_into("n_heads", &mut self.n_heads)?;
        kv.read_into("d_ffn", &mut self.d_ffn)?;
        kv.read_into("max_len", &mut self.max_len)?;
        kv.read_into("dropout", &mut self.dropout)?;
        kv.read_into("vocab_size", &mut self.vocab_size)?;
        kv.read_into("pool_lang_token", &mut self.pool_lang_token)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct Attention {
    norm: Norm,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Debug)]
struct FeedForward {
    norm: Norm,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    self_attn: Attention,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_attn: Attention,
    cross_attn: Attention,
    ffn: FeedForward,
}

#[derive(Clone, Debug)]
struct Layout {
    embed: usize,
    enc_emb_norm: Norm,
    enc_layers: Vec<EncoderLayer>,
    enc_final_norm: Norm,
    dec_emb_norm: Norm,
    dec_layers: Vec<DecoderLayer>,
    dec_final_norm: Norm,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn glorot(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.gen_range(-a..a)).collect();
        self.store.push(name, Tensor::new(vec![rows, cols], data).expect("consistent"))
    }

    fn filled(&mut self, name: String, n: usize, value: f64) -> usize {
        self.store.push(name, Tensor::new(vec![n], vec![value; n]).expect("consistent"))
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.filled(format!("{prefix}.g"), d, 1.0),
            bias: self.filled(format!("{prefix}.b"), d, 0.0),
        }
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Attention {
        Attention {
            norm: self.norm(&format!("{prefix}.ln"), d),
            wq: self.glorot(format!("{prefix}.wq"), d, d),
            bq: self.filled(format!("{prefix}.bq"), d, 0.0),
            wk: self.glorot(format!("{prefix}.wk"), d, d),
            bk: self.filled(format!("{prefix}.bk"), d, 0.0),
            wv: self.glorot(format!("{prefix}.wv"), d, d),
            bv: self.filled(format!("{prefix}.bv"), d, 0.0),
            wo: self.glorot(format!("{prefix}.wo"), d, d),
            bo: self.filled(format!("{prefix}.bo"), d, 0.0),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) -> FeedForward {
        FeedForward {
            norm: self.norm(&format!("{prefix}.ln"), d),
            w1: self.glorot(format!("{prefix}.w1"), d, hidden),
            b1: self.filled(format!("{prefix}.b1"), hidden, 0.0),
            w2: self.glorot(format!("{prefix}.w2"), hidden, d),
            b2: self.filled(format!("{prefix}.b2"), d, 0.0),
        }
    }
}

fn build(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> (ParamStore, Layout) {
    let d = cfg.d_model;
    let mut b = Builder {
        store: ParamStore::new(),
        rng,
    };
    let embed = b.glorot("embed".into(), cfg.vocab_size, d);
    let enc_emb_norm = b.norm("enc.emb_ln", d);
    let enc_layers = (0..cfg.n_layers_enc)
        .map(|i| EncoderLayer {
            self_attn: b.attention(&format!("enc.{i}.self_attn"), d),
            ffn: b.ffn(&format!("enc.{i}.ffn"), d, cfg.d_ffn),
        })
        .collect();
    let enc_final_norm = b.norm("enc.final_ln", d);
    let dec_emb_norm = b.norm("dec.emb_ln", d);
    let dec_layers = (0..cfg.n_layers_dec)
        .map(|i| DecoderLayer {
            self_attn: b.attention(&format!("dec.{i}.self_attn"), d),
            cross_attn: b.attention(&format!("dec.{i}.cross_attn"), d),
            ffn: b.ffn(&format!("dec.{i}.ffn"), d, cfg.d_ffn),
        })
        .collect();
    let dec_final_norm = b.norm("dec.final_ln", d);
    let layout = Layout {
        embed,
        enc_emb_norm,
        enc_layers,
        enc_final_norm,
        dec_emb_norm,
        dec_layers,
        dec_final_norm,
    };
    (b.store, layout)
}

/// Fixed sinusoidal position table, `[max_len, d]`.
pub fn sinusoidal_positions(max_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![max_len, d], data).expect("consistent")
}

/// Per-forward switches that are not part of the parameters.
#[derive(Clone, Debug)]
pub struct ForwardOptions {
    /// Seed for dropout masks; `None` disables dropout.
    pub dropout_seed: Option<u64>,
    /// Multiplier on every residual-branch output (1.0 in normal use).
    pub residual_scale: f64,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions {
            dropout_seed: None,
            residual_scale: 1.0,
        }
    }

    pub fn train(seed: u64) -> Self {
        ForwardOptions {
            dropout_seed: Some(seed),
            residual_scale: 1.0,
        }
    }
}

struct Dropout {
    rate: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut().filter(|_| self.rate > 0.0) else {
            return Ok(x);
        };
        let keep = 1.0 - self.rate;
        let shape = tape.shape(x).to_vec();
        let n = tape.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = tape.constant(Tensor::new(shape, mask)?);
        tape.mul(x, m)
    }
}

/// Encoder output recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EncodedVars {
    /// `[rows*len, d]` final encoder states.
    pub states: Var,
    /// `[rows, d]` masked mean of the states.
    pub pooled: Var,
}

/// Detached encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    /// `[rows, len, d]`.
    pub states: Tensor,
    pub mask: Vec<f64>,
    pub rows: usize,
    pub len: usize,
    /// `[rows, d]`.
    pub pooled: Tensor,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
    positions: Tensor,
}

/// Additive attention mask `[rows*heads, q_len, k_len]`: keys with zero
/// `key_mask` are blocked, and future keys too when `causal`.
fn attention_mask(key_mask: &[f64], rows: usize, heads: usize, q_len: usize, k_len: usize, causal: bool) -> Tensor {
    let mut data = vec![0.0; rows * heads * q_len * k_len];
    for b in 0..rows {
        for q in 0..q_len {
            for k in 0..k_len {
                if key_mask[b * k_len + k] == 0.0 || (causal && k > q) {
                    for h in 0..heads {
                        data[((b * heads + h) * q_len + q) * k_len + k] = MASKED;
                    }
                }
            }
        }
    }
    Tensor::new(vec![rows * heads, q_len, k_len], data).expect("consistent")
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[crate::rng::tag("init")]);
        let (params, layout) = build(&config, &mut rng);
        let positions = sinusoidal_positions(config.max_len, config.d_model);
        Ok(Model {
            config,
            params,
            layout,
            positions,
        })
    }

    /// Wraps existing parameters, checking names and shapes against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        model.params.check_compatible(&params)?;
        model.params = params;
        Ok(model)
    }

    fn dropout(&self, opts: &ForwardOptions, stream: u64) -> Dropout {
        Dropout {
            rate: self.config.dropout,
            rng: opts.dropout_seed.map(|s| rng_for(s, &[stream])),
        }
    }

    fn embed(&self, tape: &mut Tape, p: &[Var], ids: &[usize], rows: usize, len: usize, norm: &Norm, drop: &mut Dropout) -> Result<Var> {
        if len > self.config.max_len {
            return Err(Error::Data(format!(
                "sequence length {len} exceeds max_len {}",
                self.config.max_len
            )));
        }
        let d = self.config.d_model;
        let tok = tape.embedding(p[self.layout.embed], ids)?;
        let tok = tape.scale(tok, (d as f64).sqrt());
        let mut pos = Vec::with_capacity(rows * len * d);
        for _ in 0..rows {
            pos.extend_from_slice(&self.positions.data()[..len * d]);
        }
        let pos = tape.constant(Tensor::new(vec![rows * len, d], pos)?);
        let x = tape.add(tok, pos)?;
        let x = tape.layer_norm(x, p[norm.gain], p[norm.bias], LN_EPS)?;
        drop.apply(tape, x)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape,
        p: &[Var],
        a: &Attention,
        query: Var,
        memory: Var,
        rows: usize,
        mask: Var,
        drop: &mut Dropout,
    ) -> Result<Var> {
        let heads = self.config.n_heads;
        let dh = self.config.d_model / heads;
        let q = tape.matmul(query, p[a.wq])?;
        let q = tape.add_bias(q, p[a.bq])?;
        let k = tape.matmul(memory, p[a.wk])?;
        let k = tape.add_bias(k, p[a.bk])?;
        let v = tape.matmul(memory, p[a.wv])?;
        let v = tape.add_bias(v, p[a.bv])?;
        let qh = tape.split_heads(q, rows, heads)?;
        let kh = tape.split_heads(k, rows, heads)?;
        let vh = tape.split_heads(v, rows, heads)?;
        let scores = tape.batch_matmul(qh, kh, true)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let scores = tape.add(scores, mask)?;
        let weights = tape.softmax(scores, 2)?;
        let weights = drop.apply(tape, weights)?;
        let ctx = tape.batch_matmul(weights, vh, false)?;
        let merged = tape.merge_heads(ctx, rows, heads)?;
        let out = tape.matmul(merged, p[a.wo])?;
        tape.add_bias(out, p[a.bo])
    }

    fn feed_forward(&self, tape: &mut Tape, p: &[Var], f: &FeedForward, x: Var, drop: &mut Dropout) -> Result<Var> {
        let h = tape.layer_norm(x, p[f.norm.gain], p[f.norm.bias], LN_EPS)?;
        let h = tape.matmul(h, p[f.w1])?;
        let h = tape.add_bias(h, p[f.b1])?;
        let h = tape.relu(h);
        let h = drop.apply(tape, h)?;
        let h = tape.matmul(h, p[f.w2])?;
        tape.add_bias(h, p[f.b2])
    }

    fn residual(&self, tape: &mut Tape, x: Var, branch: Var, opts: &ForwardOptions) -> Result<Var> {
        let branch = if opts.residual_scale == 1.0 {
            branch
        } else {
            tape.scale(branch, opts.residual_scale)
        };
        tape.add(x, branch)
    }

    /// Mask selecting the positions averaged into the pooled representation.
    pub fn pooling_mask(&self, input: &EncoderInput) -> Vec<f64> {
        let mut mask = input.mask.clone();
        if !self.config.pool_lang_token {
            for r in 0..input.rows {
                mask[r * input.len] = 0.0;
            }
        }
        mask
    }

    /// Records the encoder on `tape` using parameter vars `p`.
    pub fn encode_on(&self, tape: &mut Tape, p: &[Var], input: &EncoderInput, opts: &ForwardOptions) -> Result<EncodedVars> {
        let (rows, len) = (input.rows, input.len);
        let mut drop = self.dropout(opts, 1);
        let mut x = self.embed(tape, p, &input.ids, rows, len, &self.layout.enc_emb_norm, &mut drop)?;
        let mask = tape.constant(attention_mask(&input.mask, rows, self.config.n_heads, len, len, false));
        for layer in &self.layout.enc_layers {
            let a = &layer.self_attn;
            let h = tape.layer_norm(x, p[a.norm.gain], p[a.norm.bias], LN_EPS)?;
            let h = self.attention(tape, p, a, h, h, rows, mask, &mut drop)?;
            x = self.residual(tape, x, h, opts)?;
            let f = self.feed_forward(tape, p, &layer.ffn, x, &mut drop)?;
            x = self.residual(tape, x, f, opts)?;
        }
        let n = &self.layout.enc_final_norm;
        let states = tape.layer_norm(x, p[n.gain], p[n.bias], LN_EPS)?;
        let pooled = tape.masked_mean(states, &self.pooling_mask(input), rows)?;
        Ok(EncodedVars { states, pooled })
    }

    /// Records the decoder with teacher forcing and returns `[rows*tgt_len, vocab]` logits.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_on(
        &self,
        tape: &mut Tape,
        p: &[Var],
        memory: Var,
        src_mask: &[f64],
        tgt_in: &[usize],
        rows: usize,
        tgt_len: usize,
        opts: &ForwardOptions,
    ) -> Result<Var> {
        let d = self.config.d_model;
        let heads = self.config.n_heads;
        if tgt_in.len() != rows * tgt_len || rows == 0 || !src_mask.len().is_multiple_of(rows) {
            return Err(Error::Shape(format!(
                "decoder input of {} ids does not match {rows}×{tgt_len} with source mask {}",
                tgt_in.len(),
                src_mask.len()
            )));
        }
        let src_len = src_mask.len() / rows;
        if tape.shape(memory) != [rows * src_len, d] {
            return Err(Error::Shape(format!(
                "encoder states {:?} do not match {rows}×{src_len}×{d}",
                tape.shape(memory)
            )));
        }
        let mut drop = self.dropout(opts, 2);
        let all_real = vec![1.0; rows * tgt_len];
        let self_mask = tape.constant(attention_mask(&all_real, rows, heads, tgt_len, tgt_len, true));
        let cross_mask = tape.constant(attention_mask(src_mask, rows, heads, tgt_len, src_len, false));
        let mut x = self.embed(tape, p, tgt_in, rows, tgt_len, &self.layout.dec_emb_norm, &mut drop)?;
        for layer in &self.layout.dec_layers {
            let a = &layer.self_attn;
            let h = tape.layer_norm(x, p[a.norm.gain], p[a.norm.bias], LN_EPS)?;
            let h = self.attention(tape, p, a, h, h, rows, self_mask, &mut drop)?;
            x = self.residual(tape, x, h, opts)?;
            let c = &layer.cross_attn;
            let h = tape.layer_norm(x, p[c.norm.gain], p[c.norm.bias], LN_EPS)?;
            let h = self.attention(tape, p, c, h, memory, rows, cross_mask, &mut drop)?;
            x = self.residual(tape, x, h, opts)?;
            let f = self.feed_forward(tape, p, &layer.ffn, x, &mut drop)?;
            x = self.residual(tape, x, f, opts)?;
        }
        let n = &self.layout.dec_final_norm;
        let h = tape.layer_norm(x, p[n.gain], p[n.bias], LN_EPS)?;
        let emb_t = tape.transpose(p[self.layout.embed])?;
        tape.matmul(h, emb_t)
    }

    /// Encodes without recording gradients.
    pub fn encode(&self, input: &EncoderInput) -> Result<EncodedBatch> {
        self.encode_with(input, &ForwardOptions::eval())
    }

    pub fn encode_with(&self, input: &EncoderInput, opts: &ForwardOptions) -> Result<EncodedBatch> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let enc = self.encode_on(&mut tape, &p, input, opts)?;
        Ok(EncodedBatch {
            states: Tensor::new(
                vec![input.rows, input.len, self.config.d_model],
                tape.value(enc.states).to_vec(),
            )?,
            mask: input.mask.clone(),
            rows: input.rows,
            len: input.len,
            pooled: tape.tensor(enc.pooled),
        })
    }

    /// Teacher-forced logits `[rows, tgt_len, vocab]` without gradients.
    pub fn decode_logits(&self, encoded: &EncodedBatch, tgt_in: &[usize], tgt_len: usize) -> Result<Tensor> {
        self.decode_logits_with(encoded, tgt_in, tgt_len, &ForwardOptions::eval())
    }

    pub fn decode_logits_with(&self, encoded: &EncodedBatch, tgt_in: &[usize], tgt_len: usize, opts: &ForwardOptions) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let d = self.config.d_model;
        let memory = tape.constant(Tensor::new(
            vec![encoded.rows * encoded.len, d],
            encoded.states.data().to_vec(),
        )?);
        let logits = self.decode_on(&mut tape, &p, memory, &encoded.mask, tgt_in, encoded.rows, tgt_len, opts)?;
        Tensor::new(
            vec![encoded.rows, tgt_len, self.config.vocab_size],
            tape.value(logits).to_vec(),
        )
    }
}

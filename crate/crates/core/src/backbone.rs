//! Small frozen encoder-decoder transformer.
//!
//! Pre-norm residual blocks with RMS normalization, learned clipped
//! relative-position biases (one table per stack, shared across layers), a
//! plain two-matrix FFN and an output projection tied to the token embedding.
//! Linear maps store weights as `[in, out]` and act on row vectors.
//!
//! Adapters attach through [`Hooks`]: every linear projection goes through
//! [`Hooks::linear`] and the K, V and FFN-intermediate activations through
//! [`Hooks::rescale`]. With [`NoHooks`] the forward pass is the plain model.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{dim_err, Error, Result};
use crate::site::{Block, BlockKey, Side, Site, SiteKey};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Padding id; also the decoder start token.
pub const PAD: usize = 0;

const NORM_EPS: f64 = 1e-6;
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Layers per side.
    pub layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Per-head key width.
    pub d_k: usize,
    /// Per-head value width.
    pub d_v: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_in: usize,
    pub max_out: usize,
    pub activation: Activation,
    /// Relative distances are clipped to `±rel_pos_max`.
    pub rel_pos_max: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_model: 32,
            n_heads: 2,
            d_k: 16,
            d_v: 16,
            d_ff: 64,
            vocab: 64,
            max_in: 64,
            max_out: 16,
            activation: Activation::Relu,
            rel_pos_max: 8,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("layers", self.layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_ff", self.d_ff),
            ("vocab", self.vocab),
            ("max_in", self.max_in),
            ("max_out", self.max_out),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("backbone.{name} must be positive")));
        }
        if self.vocab < 2 {
            return Err(Error::Config("backbone.vocab must hold at least PAD and one token".into()));
        }
        Ok(())
    }

    /// Full multi-head key width `d_k·n_heads`.
    pub fn k_width(&self) -> usize {
        self.d_k * self.n_heads
    }

    pub fn v_width(&self) -> usize {
        self.d_v * self.n_heads
    }

    /// `(in, out)` widths of the matrix at a linear site.
    pub fn linear_dims(&self, site: Site) -> Option<(usize, usize)> {
        let d = self.d_model;
        Some(match site {
            Site::Q | Site::K => (d, self.k_width()),
            Site::V => (d, self.v_width()),
            Site::O => (self.v_width(), d),
            Site::W1 => (d, self.d_ff),
            Site::W2 => (self.d_ff, d),
            Site::Ff => return None,
        })
    }

    /// Width of the activation rescaled at an (IA)³ site.
    pub fn rescale_width(&self, site: Site) -> Option<usize> {
        match site {
            Site::K => Some(self.k_width()),
            Site::V => Some(self.v_width()),
            Site::Ff => Some(self.d_ff),
            _ => None,
        }
    }

    /// Every block of the model in forward order.
    pub fn blocks(&self) -> Vec<BlockKey> {
        let mut out = Vec::new();
        for side in [Side::Enc, Side::Dec] {
            for layer in 0..self.layers {
                for &block in Block::for_side(side) {
                    out.push(BlockKey::new(side, layer, block));
                }
            }
        }
        out
    }

    /// Names and shapes of every backbone tensor, in initialization order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let rel = 2 * self.rel_pos_max + 1;
        let mut out = vec![
            ("embed".to_string(), vec![self.vocab, d]),
            ("enc.rel_bias".to_string(), vec![self.n_heads, rel]),
            ("dec.rel_bias".to_string(), vec![self.n_heads, rel]),
        ];
        for b in self.blocks() {
            out.push((format!("{b}.norm"), vec![d]));
            let sites: &[Site] = match b.block {
                Block::Ffn => &[Site::W1, Site::W2],
                _ => &[Site::Q, Site::K, Site::V, Site::O],
            };
            for &s in sites {
                let (i, o) = self.linear_dims(s).unwrap();
                out.push((weight_name(b.site(s)), vec![i, o]));
            }
        }
        out.push(("enc.final_norm".to_string(), vec![d]));
        out.push(("dec.final_norm".to_string(), vec![d]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensor_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Name of the frozen matrix at a linear site, e.g. `dec.0.cross.wk`.
pub fn weight_name(site: SiteKey) -> String {
    format!("{}.w{}", site.block, site.site.name().trim_start_matches('w'))
}

/// Frozen weight set.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone<T: Scalar = f32> {
    config: BackboneConfig,
    weights: BTreeMap<String, Tensor<T>>,
}

impl Backbone<f32> {
    /// Deterministic random weights: normal with std `1/√d_model` for
    /// matrices, unit normal for the embedding, ones for norm gains.
    pub fn build(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let std = 1.0 / (config.d_model as f64).sqrt();
        let mut weights = BTreeMap::new();
        for (name, shape) in config.tensor_shapes() {
            let t = if name.ends_with("norm") {
                Tensor::ones(&shape)
            } else if name == "embed" {
                Tensor::randn(&shape, 1.0, &mut rng)
            } else if name.ends_with("rel_bias") {
                Tensor::randn(&shape, 0.1, &mut rng)
            } else {
                Tensor::randn(&shape, std, &mut rng)
            };
            weights.insert(name, t);
        }
        Ok(Self { config, weights })
    }
}

impl<T: Scalar> Backbone<T> {
    /// Assembles a backbone from named tensors, checking names and shapes.
    pub fn from_weights(config: BackboneConfig, weights: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let shapes = config.tensor_shapes();
        for (name, shape) in &shapes {
            match weights.get(name) {
                None => return Err(Error::Format(format!("backbone tensor `{name}` missing"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Format(format!(
                        "backbone tensor `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if weights.len() != shapes.len() {
            return Err(Error::Format("backbone checkpoint holds unexpected tensors".into()));
        }
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.weights
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor<T>> {
        self.weights
            .get(name)
            .ok_or_else(|| Error::Format(format!("backbone tensor `{name}` missing")))
    }

    /// Mutable access, for warm-up training and adapter folding only.
    pub fn weight_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.weights
            .get_mut(name)
            .ok_or_else(|| Error::Format(format!("backbone tensor `{name}` missing")))
    }

    pub fn param_count(&self) -> usize {
        self.weights.values().map(|t| t.numel()).sum()
    }

    /// SHA-256 over the little-endian f32 bytes of every tensor in name order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in self.weights.values() {
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        Backbone {
            config: self.config.clone(),
            weights: self.weights.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Puts every weight on the tape, as parameters when `trainable`.
    pub fn register(&self, tape: &mut Tape<T>, trainable: bool) -> WeightVars {
        WeightVars(
            self.weights
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), trainable)))
                .collect(),
        )
    }

    /// Teacher-forced forward pass.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        w: &WeightVars,
        batch: &SeqBatch,
        hooks: &mut dyn Hooks<T>,
    ) -> Result<ForwardOut> {
        let cfg = &self.config;
        batch.check(cfg)?;
        let (b, s_in, s_out) = (batch.rows, batch.input.len, batch.target.len);
        let d = cfg.d_model;

        let enc_rows: Vec<usize> = (0..b * s_in).map(|i| i / s_in).collect();
        let dec_rows: Vec<usize> = (0..b * s_out).map(|i| i / s_out).collect();
        let dec_valid = vec![true; b * s_out];
        let enc_stream = Stream {
            side: Side::Enc,
            rows: &enc_rows,
            valid: &batch.input.mask,
        };
        let dec_stream = Stream {
            side: Side::Dec,
            rows: &dec_rows,
            valid: &dec_valid,
        };

        let enc_bias = self.attention_bias(tape, Side::Enc, b, s_in, s_in, &batch.input.mask, false)?;
        let dec_bias = self.attention_bias(tape, Side::Dec, b, s_out, s_out, &dec_valid, true)?;
        let cross_bias = mask_only(tape, cfg.n_heads, b, s_out, s_in, &batch.input.mask)?;

        let mut attn = Vec::new();
        let embed = w.get("embed")?;

        let mut x = tape.gather(embed, &batch.input.ids)?;
        for layer in 0..cfg.layers {
            let key = BlockKey::new(Side::Enc, layer, Block::SelfAttn);
            let h = tape.rms_norm(x, w.get(&format!("{key}.norm"))?, NORM_EPS)?;
            let ctx = RouteCtx::block(h, enc_stream);
            let (y, a) = self.attention(tape, w, key, h, h, ctx, ctx, (b, s_in, s_in), enc_bias, hooks)?;
            attn.push(a);
            x = tape.add(x, y)?;
            x = self.ffn(tape, w, BlockKey::new(Side::Enc, layer, Block::Ffn), x, enc_stream, hooks)?;
        }
        let memory = tape.rms_norm(x, w.get("enc.final_norm")?, NORM_EPS)?;
        let mem_ctx = RouteCtx {
            reps: memory,
            stream: enc_stream,
            source: Source::Memory,
        };

        let dec_in = batch.decoder_input();
        let mut y = tape.gather(embed, &dec_in)?;
        for layer in 0..cfg.layers {
            let key = BlockKey::new(Side::Dec, layer, Block::SelfAttn);
            let h = tape.rms_norm(y, w.get(&format!("{key}.norm"))?, NORM_EPS)?;
            let ctx = RouteCtx::block(h, dec_stream);
            let (o, a) = self.attention(tape, w, key, h, h, ctx, ctx, (b, s_out, s_out), dec_bias, hooks)?;
            attn.push(a);
            y = tape.add(y, o)?;

            let key = BlockKey::new(Side::Dec, layer, Block::Cross);
            let h = tape.rms_norm(y, w.get(&format!("{key}.norm"))?, NORM_EPS)?;
            let ctx = RouteCtx::block(h, dec_stream);
            let (o, a) = self.attention(tape, w, key, h, memory, ctx, mem_ctx, (b, s_out, s_in), cross_bias, hooks)?;
            attn.push(a);
            y = tape.add(y, o)?;

            y = self.ffn(tape, w, BlockKey::new(Side::Dec, layer, Block::Ffn), y, dec_stream, hooks)?;
        }
        let y = tape.rms_norm(y, w.get("dec.final_norm")?, NORM_EPS)?;
        let emb_t = tape.transpose(embed)?;
        let logits = tape.matmul(y, emb_t)?;
        let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
        let logits = tape.reshape(logits, &[b, s_out, cfg.vocab])?;
        Ok(ForwardOut { logits, attn })
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        tape: &mut Tape<T>,
        w: &WeightVars,
        key: BlockKey,
        hq: Var,
        hkv: Var,
        ctx_q: RouteCtx,
        ctx_kv: RouteCtx,
        (b, sq, sk): (usize, usize, usize),
        bias: Var,
        hooks: &mut dyn Hooks<T>,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let (h, dk, dv) = (cfg.n_heads, cfg.d_k, cfg.d_v);
        let q = hooks.linear(tape, key.site(Site::Q), hq, w.site(key.site(Site::Q))?, &ctx_q)?;
        let k = hooks.linear(tape, key.site(Site::K), hkv, w.site(key.site(Site::K))?, &ctx_kv)?;
        let k = hooks.rescale(tape, key.site(Site::K), k, &ctx_kv)?;
        let v = hooks.linear(tape, key.site(Site::V), hkv, w.site(key.site(Site::V))?, &ctx_kv)?;
        let v = hooks.rescale(tape, key.site(Site::V), v, &ctx_kv)?;

        let q = tape.reshape(q, &[b, sq, h, dk])?;
        let q = tape.permute(q, &[0, 2, 1, 3])?;
        let q = tape.reshape(q, &[b * h, sq, dk])?;
        let k = tape.reshape(k, &[b, sk, h, dk])?;
        let k = tape.permute(k, &[0, 2, 3, 1])?;
        let k = tape.reshape(k, &[b * h, dk, sk])?;
        let v = tape.reshape(v, &[b, sk, h, dv])?;
        let v = tape.permute(v, &[0, 2, 1, 3])?;
        let v = tape.reshape(v, &[b * h, sk, dv])?;

        let s = tape.bmm(q, k)?;
        let s = tape.scale(s, 1.0 / (dk as f64).sqrt());
        let s = tape.reshape(s, &[b, h, sq, sk])?;
        let s = tape.add(s, bias)?;
        let a = tape.softmax(s, 3)?;
        let a3 = tape.reshape(a, &[b * h, sq, sk])?;
        let o = tape.bmm(a3, v)?;
        let o = tape.reshape(o, &[b, h, sq, dv])?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[b * sq, h * dv])?;
        let out = hooks.linear(tape, key.site(Site::O), o, w.site(key.site(Site::O))?, &ctx_q)?;
        Ok((out, a))
    }

    fn ffn(
        &self,
        tape: &mut Tape<T>,
        w: &WeightVars,
        key: BlockKey,
        x: Var,
        stream: Stream,
        hooks: &mut dyn Hooks<T>,
    ) -> Result<Var> {
        let h = tape.rms_norm(x, w.get(&format!("{key}.norm"))?, NORM_EPS)?;
        let ctx = RouteCtx::block(h, stream);
        let u = hooks.linear(tape, key.site(Site::W1), h, w.site(key.site(Site::W1))?, &ctx)?;
        let g = match self.config.activation {
            Activation::Relu => tape.relu(u),
            Activation::Gelu => tape.gelu(u),
        };
        let g = hooks.rescale(tape, key.site(Site::Ff), g, &ctx)?;
        let y = hooks.linear(tape, key.site(Site::W2), g, w.site(key.site(Site::W2))?, &ctx)?;
        tape.add(x, y)
    }

    /// Relative-position bias plus key padding (and causal) mask as one
    /// constant `[b, heads, sq, sk]` tensor.
    #[allow(clippy::too_many_arguments)]
    fn attention_bias(
        &self,
        tape: &mut Tape<T>,
        side: Side,
        b: usize,
        sq: usize,
        sk: usize,
        key_valid: &[bool],
        causal: bool,
    ) -> Result<Var> {
        let h = self.config.n_heads;
        let r = self.config.rel_pos_max as i64;
        let table = self.weight(&format!("{}.rel_bias", side.name()))?.data();
        let width = 2 * r as usize + 1;
        let mut data = Vec::with_capacity(b * h * sq * sk);
        for row in 0..b {
            for head in 0..h {
                for i in 0..sq {
                    for j in 0..sk {
                        let masked = !key_valid[row * sk + j] || (causal && j > i);
                        data.push(if masked {
                            T::lit(MASKED)
                        } else {
                            let rel = (j as i64 - i as i64).clamp(-r, r) + r;
                            table[head * width + rel as usize]
                        });
                    }
                }
            }
        }
        Ok(tape.constant(Tensor::new(&[b, h, sq, sk], data)?))
    }
}

fn mask_only<T: Scalar>(
    tape: &mut Tape<T>,
    h: usize,
    b: usize,
    sq: usize,
    sk: usize,
    key_valid: &[bool],
) -> Result<Var> {
    let mut data = Vec::with_capacity(b * h * sq * sk);
    for row in 0..b {
        for _ in 0..h * sq {
            for j in 0..sk {
                data.push(if key_valid[row * sk + j] { T::zero() } else { T::lit(MASKED) });
            }
        }
    }
    Ok(tape.constant(Tensor::new(&[b, h, sq, sk], data)?))
}

/// Backbone weights placed on a tape.
#[derive(Debug, Clone)]
pub struct WeightVars(BTreeMap<String, Var>);

impl WeightVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.0
            .get(name)
            .copied()
            .ok_or_else(|| Error::Format(format!("backbone tensor `{name}` missing")))
    }

    pub fn site(&self, site: SiteKey) -> Result<Var> {
        self.get(&weight_name(site))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.0.iter()
    }
}

/// Where the tokens a router reads come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Source {
    /// Normalized input of the current block.
    Block,
    /// Encoder output, read by cross-attention keys and values.
    Memory,
}

/// Token bookkeeping for one side of the batch.
#[derive(Debug, Clone, Copy)]
pub struct Stream<'a> {
    pub side: Side,
    /// Batch row of each token.
    pub rows: &'a [usize],
    /// False at padding.
    pub valid: &'a [bool],
}

/// What a router may look at for the tokens an adapter acts on.
#[derive(Debug, Clone, Copy)]
pub struct RouteCtx<'a> {
    /// `[tokens, d_model]` representations.
    pub reps: Var,
    pub stream: Stream<'a>,
    pub source: Source,
}

impl<'a> RouteCtx<'a> {
    fn block(reps: Var, stream: Stream<'a>) -> Self {
        Self {
            reps,
            stream,
            source: Source::Block,
        }
    }
}

/// Adapter attachment points.
pub trait Hooks<T: Scalar> {
    /// `x·w` at a linear site, plus whatever the adapter adds.
    fn linear(&mut self, tape: &mut Tape<T>, site: SiteKey, x: Var, w: Var, ctx: &RouteCtx) -> Result<Var> {
        let _ = (site, ctx);
        tape.matmul(x, w)
    }

    /// Activation at a K, V or FFN-intermediate site.
    fn rescale(&mut self, tape: &mut Tape<T>, site: SiteKey, act: Var, ctx: &RouteCtx) -> Result<Var> {
        let _ = (tape, site, ctx);
        Ok(act)
    }
}

/// The plain backbone.
pub struct NoHooks;

impl<T: Scalar> Hooks<T> for NoHooks {}

#[derive(Debug, Clone)]
pub struct ForwardOut {
    /// `[rows, target_len, vocab]`.
    pub logits: Var,
    /// Attention probabilities `[rows, heads, q, k]`, in forward order.
    pub attn: Vec<Var>,
}

/// Padded token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Padded {
    pub len: usize,
    /// Row-major `[rows, len]`, padded with [`PAD`].
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Padded {
    pub fn new(rows: &[Vec<usize>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        if let Some(i) = rows.iter().position(|r| r.is_empty()) {
            return Err(Error::Input(format!("row {i} has no tokens")));
        }
        let len = rows.iter().map(Vec::len).max().unwrap();
        let mut ids = Vec::with_capacity(rows.len() * len);
        let mut mask = Vec::with_capacity(rows.len() * len);
        for r in rows {
            ids.extend(r.iter().copied().chain(std::iter::repeat(PAD)).take(len));
            mask.extend((0..len).map(|i| i < r.len()));
        }
        Ok(Self { len, ids, mask })
    }

    pub fn row_len(&self, row: usize) -> usize {
        self.mask[row * self.len..(row + 1) * self.len]
            .iter()
            .filter(|&&m| m)
            .count()
    }
}

/// Input/target pairs for a teacher-forced pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    pub rows: usize,
    pub input: Padded,
    pub target: Padded,
}

impl SeqBatch {
    pub fn new(inputs: &[Vec<usize>], targets: &[Vec<usize>]) -> Result<Self> {
        if inputs.len() != targets.len() {
            return Err(dim_err!("{} inputs but {} targets", inputs.len(), targets.len()));
        }
        Ok(Self {
            rows: inputs.len(),
            input: Padded::new(inputs)?,
            target: Padded::new(targets)?,
        })
    }

    fn check(&self, cfg: &BackboneConfig) -> Result<()> {
        if self.input.len > cfg.max_in {
            return Err(Error::Input(format!(
                "input length {} exceeds max_in {}",
                self.input.len, cfg.max_in
            )));
        }
        if self.target.len > cfg.max_out {
            return Err(Error::Input(format!(
                "target length {} exceeds max_out {}",
                self.target.len, cfg.max_out
            )));
        }
        if let Some(&t) = self.input.ids.iter().chain(&self.target.ids).find(|&&t| t >= cfg.vocab) {
            return Err(Error::Index(format!("token {t} outside vocab {}", cfg.vocab)));
        }
        Ok(())
    }

    /// Targets shifted right behind the start token.
    pub fn decoder_input(&self) -> Vec<usize> {
        let len = self.target.len;
        let mut out = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            out.push(PAD);
            out.extend_from_slice(&self.target.ids[r * len..(r + 1) * len - 1]);
        }
        out
    }

    pub fn target_mask<T: Scalar>(&self) -> Vec<T> {
        self.target
            .mask
            .iter()
            .map(|&m| if m { T::one() } else { T::zero() })
            .collect()
    }
}

/// Summed log-probability of each row's target tokens.
pub fn target_log_probs<T: Scalar>(logits: &Tensor<T>, batch: &SeqBatch) -> Vec<f64> {
    let vocab = *logits.shape().last().unwrap();
    let len = batch.target.len;
    let mut out = vec![0.0; batch.rows];
    for (pos, (&tok, &m)) in batch.target.ids.iter().zip(&batch.target.mask).enumerate() {
        if !m {
            continue;
        }
        let row = &logits.data()[pos * vocab..(pos + 1) * vocab];
        let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.f64() - max).exp()).sum::<f64>().ln();
        out[pos / len] += row[tok].f64() - lse;
    }
    out
}

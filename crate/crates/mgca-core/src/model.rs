//! Transformer encoder: token + learned position embeddings, multi-head
//! self-attention, GELU feed-forward, post-layer-norm residuals, dropout.
//! No language embedding. The MLM output projection is tied to the token
//! embedding table (plus a per-vocab-entry bias).
//!
//! Sequences are processed one instance at a time at their true length, so
//! padding never enters attention.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, TensorError, TensorId};

pub const LN_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("sequence length {len} exceeds max_positions {max}")]
    Overlength { len: usize, max: usize },
    #[error("cannot encode an empty sequence")]
    EmptyInput,
    #[error("cannot pool an empty segment")]
    EmptySegment,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub max_positions: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // Desk-scale defaults; the full-scale reference point is
        // layers 24 / hidden 1024 / ffn 4096 / heads 16 / dropout 0.1.
        ModelConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            ffn: 256,
            dropout: 0.1,
            max_positions: 128,
            vocab_size: 1000,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.ffn == 0 || self.max_positions == 0 {
            return Err(ModelError::BadConfig("ffn and max_positions must be positive".into()));
        }
        if self.vocab_size < 5 {
            return Err(ModelError::BadConfig("vocab_size must cover the special tokens".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

#[derive(Debug, Clone)]
struct LayerParams {
    wq: Tensor,
    bq: Tensor,
    wk: Tensor,
    bk: Tensor,
    wv: Tensor,
    bv: Tensor,
    wo: Tensor,
    bo: Tensor,
    ln1_gain: Tensor,
    ln1_bias: Tensor,
    w_ff1: Tensor,
    b_ff1: Tensor,
    w_ff2: Tensor,
    b_ff2: Tensor,
    ln2_gain: Tensor,
    ln2_bias: Tensor,
}

/// Encoder parameters. Single-writer during training; a frozen model is safe
/// for concurrent read-only inference.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    emb_ln_gain: Tensor,
    emb_ln_bias: Tensor,
    layers: Vec<LayerParams>,
    mlm_bias: Tensor,
}

fn normal_tensor(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
    let data: Vec<f64> = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::param(data, vec![rows, cols])
}

fn zeros_param(n: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![n]);
    t.requires_grad = true;
    t
}

fn ones_param(n: usize) -> Tensor {
    let mut t = Tensor::new(vec![1.0; n], vec![n]);
    t.requires_grad = true;
    t
}

impl Model {
    /// Weights ~ Normal(0, 0.02), biases 0, layer-norm gain 1 / bias 0.
    /// Deterministic given the seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let (h, f, v, p) = (config.hidden, config.ffn, config.vocab_size, config.max_positions);
        let tok_emb = normal_tensor(&mut rng, v, h);
        let pos_emb = normal_tensor(&mut rng, p, h);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                wq: normal_tensor(&mut rng, h, h),
                bq: zeros_param(h),
                wk: normal_tensor(&mut rng, h, h),
                bk: zeros_param(h),
                wv: normal_tensor(&mut rng, h, h),
                bv: zeros_param(h),
                wo: normal_tensor(&mut rng, h, h),
                bo: zeros_param(h),
                ln1_gain: ones_param(h),
                ln1_bias: zeros_param(h),
                w_ff1: normal_tensor(&mut rng, h, f),
                b_ff1: zeros_param(f),
                w_ff2: normal_tensor(&mut rng, f, h),
                b_ff2: zeros_param(h),
                ln2_gain: ones_param(h),
                ln2_bias: zeros_param(h),
            })
            .collect();
        Ok(Model {
            config,
            tok_emb,
            pos_emb,
            emb_ln_gain: ones_param(h),
            emb_ln_bias: zeros_param(h),
            layers,
            mlm_bias: zeros_param(v),
        })
    }

    /// Parameters in a fixed, documented order: embeddings, embedding norm,
    /// then per-layer attention/norm/ffn blocks, then the MLM bias.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("tok_emb".into(), &self.tok_emb),
            ("pos_emb".into(), &self.pos_emb),
            ("emb_ln.gain".into(), &self.emb_ln_gain),
            ("emb_ln.bias".into(), &self.emb_ln_bias),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (suffix, t) in [
                ("attn.wq", &l.wq),
                ("attn.bq", &l.bq),
                ("attn.wk", &l.wk),
                ("attn.bk", &l.bk),
                ("attn.wv", &l.wv),
                ("attn.bv", &l.bv),
                ("attn.wo", &l.wo),
                ("attn.bo", &l.bo),
                ("ln1.gain", &l.ln1_gain),
                ("ln1.bias", &l.ln1_bias),
                ("ffn.w1", &l.w_ff1),
                ("ffn.b1", &l.b_ff1),
                ("ffn.w2", &l.w_ff2),
                ("ffn.b2", &l.b_ff2),
                ("ln2.gain", &l.ln2_gain),
                ("ln2.bias", &l.ln2_bias),
            ] {
                out.push((format!("layer{i}.{suffix}"), t));
            }
        }
        out.push(("mlm_bias".into(), &self.mlm_bias));
        out
    }

    /// Mutable view in the same order as `named_params`.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("tok_emb".into(), &mut self.tok_emb),
            ("pos_emb".into(), &mut self.pos_emb),
            ("emb_ln.gain".into(), &mut self.emb_ln_gain),
            ("emb_ln.bias".into(), &mut self.emb_ln_bias),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            for (suffix, t) in [
                ("attn.wq", &mut l.wq),
                ("attn.bq", &mut l.bq),
                ("attn.wk", &mut l.wk),
                ("attn.bk", &mut l.bk),
                ("attn.wv", &mut l.wv),
                ("attn.bv", &mut l.bv),
                ("attn.wo", &mut l.wo),
                ("attn.bo", &mut l.bo),
                ("ln1.gain", &mut l.ln1_gain),
                ("ln1.bias", &mut l.ln1_bias),
                ("ffn.w1", &mut l.w_ff1),
                ("ffn.b1", &mut l.b_ff1),
                ("ffn.w2", &mut l.w_ff2),
                ("ffn.b2", &mut l.b_ff2),
                ("ln2.gain", &mut l.ln2_gain),
                ("ln2.bias", &mut l.ln2_bias),
            ] {
                out.push((format!("layer{i}.{suffix}"), t));
            }
        }
        out.push(("mlm_bias".into(), &mut self.mlm_bias));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every parameter as a tape leaf. `trainable` controls
    /// whether gradients flow; evaluation binds frozen.
    pub fn bind<'m>(&'m self, tape: &mut Tape, trainable: bool) -> TapedModel<'m> {
        let bind_one = |tape: &mut Tape, t: &Tensor| {
            let mut copy = Tensor::new(t.data.clone(), t.shape.clone());
            copy.requires_grad = trainable;
            tape.leaf(copy)
        };
        let tok_emb = bind_one(tape, &self.tok_emb);
        let pos_emb = bind_one(tape, &self.pos_emb);
        let emb_ln_gain = bind_one(tape, &self.emb_ln_gain);
        let emb_ln_bias = bind_one(tape, &self.emb_ln_bias);
        let layers: Vec<BoundLayer> = self
            .layers
            .iter()
            .map(|l| BoundLayer {
                wq: bind_one(tape, &l.wq),
                bq: bind_one(tape, &l.bq),
                wk: bind_one(tape, &l.wk),
                bk: bind_one(tape, &l.bk),
                wv: bind_one(tape, &l.wv),
                bv: bind_one(tape, &l.bv),
                wo: bind_one(tape, &l.wo),
                bo: bind_one(tape, &l.bo),
                ln1_gain: bind_one(tape, &l.ln1_gain),
                ln1_bias: bind_one(tape, &l.ln1_bias),
                w_ff1: bind_one(tape, &l.w_ff1),
                b_ff1: bind_one(tape, &l.b_ff1),
                w_ff2: bind_one(tape, &l.w_ff2),
                b_ff2: bind_one(tape, &l.b_ff2),
                ln2_gain: bind_one(tape, &l.ln2_gain),
                ln2_bias: bind_one(tape, &l.ln2_bias),
            })
            .collect();
        let mlm_bias = bind_one(tape, &self.mlm_bias);

        let mut param_ids = vec![tok_emb, pos_emb, emb_ln_gain, emb_ln_bias];
        for l in &layers {
            param_ids.extend([
                l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo, l.ln1_gain, l.ln1_bias,
                l.w_ff1, l.b_ff1, l.w_ff2, l.b_ff2, l.ln2_gain, l.ln2_bias,
            ]);
        }
        param_ids.push(mlm_bias);

        TapedModel {
            config: &self.config,
            tok_emb,
            pos_emb,
            emb_ln_gain,
            emb_ln_bias,
            layers,
            mlm_bias,
            param_ids,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct BoundLayer {
    wq: TensorId,
    bq: TensorId,
    wk: TensorId,
    bk: TensorId,
    wv: TensorId,
    bv: TensorId,
    wo: TensorId,
    bo: TensorId,
    ln1_gain: TensorId,
    ln1_bias: TensorId,
    w_ff1: TensorId,
    b_ff1: TensorId,
    w_ff2: TensorId,
    b_ff2: TensorId,
    ln2_gain: TensorId,
    ln2_bias: TensorId,
}

/// A model's parameters registered on one tape for one forward/backward pass.
pub struct TapedModel<'m> {
    pub config: &'m ModelConfig,
    tok_emb: TensorId,
    pos_emb: TensorId,
    emb_ln_gain: TensorId,
    emb_ln_bias: TensorId,
    layers: Vec<BoundLayer>,
    mlm_bias: TensorId,
    param_ids: Vec<TensorId>,
}

impl TapedModel<'_> {
    /// Leaf ids in `named_params` order.
    pub fn param_ids(&self) -> &[TensorId] {
        &self.param_ids
    }

    fn dropout(
        &self,
        tape: &mut Tape,
        x: TensorId,
        rng: &mut Option<&mut ChaCha20Rng>,
    ) -> Result<TensorId, ModelError> {
        let p = self.config.dropout;
        let Some(rng) = rng.as_deref_mut() else { return Ok(x) };
        if p == 0.0 {
            return Ok(x);
        }
        use rand::Rng;
        let shape = tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let keep_scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep_scale })
            .collect();
        let m = tape.constant(mask, shape);
        Ok(tape.mul(x, m)?)
    }

    /// Runs the encoder stack over `ids[..attention_length]` and returns the
    /// (length x hidden) hidden states. Dropout is active only when a
    /// dropout RNG is supplied (training mode).
    pub fn encode_sequence(
        &self,
        tape: &mut Tape,
        ids: &[u32],
        attention_length: usize,
        mut dropout_rng: Option<&mut ChaCha20Rng>,
    ) -> Result<TensorId, ModelError> {
        let len = attention_length.min(ids.len());
        if len == 0 {
            return Err(ModelError::EmptyInput);
        }
        if len > self.config.max_positions {
            return Err(ModelError::Overlength { len, max: self.config.max_positions });
        }
        let ids = &ids[..len];
        let positions: Vec<u32> = (0..len as u32).collect();

        let tok = tape.gather(self.tok_emb, ids)?;
        let pos = tape.gather(self.pos_emb, &positions)?;
        let summed = tape.add(tok, pos)?;
        let mut x = tape.layer_norm(summed, self.emb_ln_gain, self.emb_ln_bias, LN_EPS)?;
        x = self.dropout(tape, x, &mut dropout_rng)?;

        for layer in &self.layers {
            let attn = self.self_attention(tape, x, layer, &mut dropout_rng)?;
            let attn = self.dropout(tape, attn, &mut dropout_rng)?;
            let res1 = tape.add(x, attn)?;
            let normed1 = tape.layer_norm(res1, layer.ln1_gain, layer.ln1_bias, LN_EPS)?;

            let inner = tape.matmul(normed1, layer.w_ff1)?;
            let inner = tape.add_row_broadcast(inner, layer.b_ff1)?;
            let inner = tape.gelu(inner)?;
            let outer = tape.matmul(inner, layer.w_ff2)?;
            let outer = tape.add_row_broadcast(outer, layer.b_ff2)?;
            let outer = self.dropout(tape, outer, &mut dropout_rng)?;
            let res2 = tape.add(normed1, outer)?;
            x = tape.layer_norm(res2, layer.ln2_gain, layer.ln2_bias, LN_EPS)?;
        }
        Ok(x)
    }

    fn self_attention(
        &self,
        tape: &mut Tape,
        x: TensorId,
        layer: &BoundLayer,
        dropout_rng: &mut Option<&mut ChaCha20Rng>,
    ) -> Result<TensorId, ModelError> {
        let d = self.config.head_dim();
        let scale = 1.0 / (d as f64).sqrt();

        let q = tape.matmul(x, layer.wq)?;
        let q = tape.add_row_broadcast(q, layer.bq)?;
        let k = tape.matmul(x, layer.wk)?;
        let k = tape.add_row_broadcast(k, layer.bk)?;
        let v = tape.matmul(x, layer.wv)?;
        let v = tape.add_row_broadcast(v, layer.bv)?;

        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let qh = tape.slice_cols(q, h * d, d)?;
            let kh = tape.slice_cols(k, h * d, d)?;
            let vh = tape.slice_cols(v, h * d, d)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let probs = tape.softmax_rows(scores)?;
            let probs = self.dropout(tape, probs, dropout_rng)?;
            let ctx = tape.matmul(probs, vh)?;
            heads.push(ctx);
        }
        let merged = tape.concat_cols(&heads)?;
        let out = tape.matmul(merged, layer.wo)?;
        Ok(tape.add_row_broadcast(out, layer.bo)?)
    }

    /// Vocabulary logits at the selected positions, through the transposed
    /// token embedding plus the output bias.
    pub fn mlm_logits(
        &self,
        tape: &mut Tape,
        hidden: TensorId,
        positions: &[usize],
    ) -> Result<TensorId, ModelError> {
        assert!(!positions.is_empty(), "mlm_logits needs at least one position");
        let rows: Vec<u32> = positions.iter().map(|&p| p as u32).collect();
        let selected = tape.gather(hidden, &rows)?;
        let emb_t = tape.transpose(self.tok_emb)?;
        let logits = tape.matmul(selected, emb_t)?;
        Ok(tape.add_row_broadcast(logits, self.mlm_bias)?)
    }
}

/// Mean of the hidden rows at `positions`: the pooled sequence
/// representation.
pub fn pool(tape: &mut Tape, hidden: TensorId, positions: &[usize]) -> Result<TensorId, ModelError> {
    if positions.is_empty() {
        return Err(ModelError::EmptySegment);
    }
    Ok(tape.mean_rows(hidden, positions)?)
}

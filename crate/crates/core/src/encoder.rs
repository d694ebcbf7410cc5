//! Shared transformer encoder: the contextual representation both
//! language inputs pass through. Post-norm layers with GELU feed-forward,
//! learned absolute position embeddings, padding masked out of attention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{param_struct, GradMap, ParamGroup};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::text::EncodedPair;

/// Layer-norm epsilon used everywhere in the model stack.
pub const LN_EPSILON: f64 = 1e-12;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub max_len: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 256,
            hidden_size: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_size: 128,
            max_len: 64,
            dropout_rate: 0.1,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.hidden_size % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.vocab_size < 5 {
            return Err(Error::Config("vocab_size must cover the specials".into()));
        }
        if self.max_len < 4 || self.ffn_size == 0 {
            return Err(Error::Config("degenerate max_len or ffn_size".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }
}

param_struct!(EmbeddingParams { token, segment, position });

// No key bias: a shared key offset adds a constant to each softmax row
// and cancels exactly, leaving a permanently dead parameter.
param_struct!(LayerParams {
    attn_query,
    attn_query_bias,
    attn_key,
    attn_value,
    attn_value_bias,
    attn_output,
    attn_output_bias,
    attn_norm_gain,
    attn_norm_bias,
    ffn_inner,
    ffn_inner_bias,
    ffn_outer,
    ffn_outer_bias,
    ffn_norm_gain,
    ffn_norm_bias,
});

/// One parameter set serves every language; there is no per-language copy.
#[derive(Clone, Debug)]
pub struct EncoderParams<T> {
    pub embeddings: EmbeddingParams<T>,
    pub layers: Vec<LayerParams<T>>,
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderParams<U> {
        EncoderParams {
            embeddings: self.embeddings.map(f),
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(String, &T)) {
        self.embeddings
            .visit(&mut |name, t| f(format!("embeddings.{name}"), t));
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&mut |name, t| f(format!("layer{i}.{name}"), t));
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut T)) {
        self.embeddings
            .visit_mut(&mut |name, t| f(format!("embeddings.{name}"), t));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&mut |name, t| f(format!("layer{i}.{name}"), t));
        }
    }
}

impl EncoderParams<Tensor> {
    /// Register every parameter as a tape leaf for one forward pass.
    pub fn bind(&self, tape: &mut Tape) -> EncoderParams<NodeId> {
        self.map(&mut |t| tape.leaf(t.clone()))
    }
}

impl EncoderParams<NodeId> {
    /// Read parameter gradients off a spent tape, prefixing names.
    pub fn collect_grads(&self, tape: &Tape, prefix: &str, out: &mut GradMap) {
        self.visit(&mut |name, &id| {
            out.insert(format!("{prefix}{name}"), tape.grad_or_zeros(id));
        });
    }
}

impl ParamGroup for EncoderParams<Tensor> {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.visit(&mut |name, t| f(&name, t));
    }

    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.visit_mut(&mut |name, t| f(&name, t));
    }
}

/// Truncated normal, resampled outside two standard deviations.
pub(crate) fn truncated_normal(
    rng: &mut ChaCha8Rng,
    rows: usize,
    cols: usize,
    std: f64,
) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    while data.len() < rows * cols {
        // Box-Muller; u1 in (0, 1].
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random::<f64>();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            data.push(z * std);
        }
    }
    Tensor::from_vec(rows, cols, data).expect("init shape")
}

pub const INIT_STD: f64 = 0.02;

/// Seeded initialization: truncated-normal weights, zero biases, unit gains.
pub fn init_params(config: &EncoderConfig) -> Result<EncoderParams<Tensor>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let h = config.hidden_size;
    let mut normal = |rows, cols| truncated_normal(&mut rng, rows, cols, INIT_STD);

    let embeddings = EmbeddingParams {
        token: normal(config.vocab_size, h),
        segment: normal(2, h),
        position: normal(config.max_len, h),
    };
    let layers = (0..config.num_layers)
        .map(|_| LayerParams {
            attn_query: normal(h, h),
            attn_query_bias: Tensor::zeros(1, h),
            attn_key: normal(h, h),
            attn_value: normal(h, h),
            attn_value_bias: Tensor::zeros(1, h),
            attn_output: normal(h, h),
            attn_output_bias: Tensor::zeros(1, h),
            attn_norm_gain: Tensor::filled(1, h, 1.0),
            attn_norm_bias: Tensor::zeros(1, h),
            ffn_inner: normal(h, config.ffn_size),
            ffn_inner_bias: Tensor::zeros(1, config.ffn_size),
            ffn_outer: normal(config.ffn_size, h),
            ffn_outer_bias: Tensor::zeros(1, h),
            ffn_norm_gain: Tensor::filled(1, h, 1.0),
            ffn_norm_bias: Tensor::zeros(1, h),
        })
        .collect();
    Ok(EncoderParams { embeddings, layers })
}

fn dropout_node(
    tape: &mut Tape,
    x: NodeId,
    rate: f64,
    rng: &mut Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let Some(rng) = rng.as_deref_mut() else {
        return Ok(x);
    };
    if rate == 0.0 {
        return Ok(x);
    }
    let (r, c) = tape.value(x).shape();
    let keep = 1.0 / (1.0 - rate);
    let data = (0..r * c)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    tape.mul_const(x, Tensor::from_vec(r, c, data)?)
}

fn linear(tape: &mut Tape, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
    let wx = tape.matmul(x, weight)?;
    tape.add_row(wx, bias)
}

/// Contextual representation of a packed input: (seq_len, hidden) rows,
/// one per position including padding. Padding never enters attention.
pub fn encode_on_tape(
    tape: &mut Tape,
    params: &EncoderParams<NodeId>,
    config: &EncoderConfig,
    pair: &EncodedPair,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let len = pair.len();
    if len > config.max_len {
        return Err(Error::SequenceTooLong {
            len,
            max: config.max_len,
        });
    }
    let segment_ids: Vec<u32> = pair.segment_ids.iter().map(|&s| s as u32).collect();

    let tok = tape.gather(params.embeddings.token, &pair.token_ids)?;
    let seg = tape.gather(params.embeddings.segment, &segment_ids)?;
    let pos = tape.slice_rows(params.embeddings.position, 0, len)?;
    let sum = tape.add(tok, seg)?;
    let mut x = tape.add(sum, pos)?;
    x = dropout_node(tape, x, config.dropout_rate, &mut dropout)?;

    let head_dim = config.head_dim();
    let scale = 1.0 / (head_dim as f64).sqrt();
    for layer in &params.layers {
        let q = linear(tape, x, layer.attn_query, layer.attn_query_bias)?;
        let k = tape.matmul(x, layer.attn_key)?;
        let v = linear(tape, x, layer.attn_value, layer.attn_value_bias)?;

        let mut context: Option<NodeId> = None;
        for head in 0..config.num_heads {
            let offset = head * head_dim;
            let qh = tape.slice_cols(q, offset, head_dim)?;
            let kh = tape.slice_cols(k, offset, head_dim)?;
            let vh = tape.slice_cols(v, offset, head_dim)?;
            let kt = tape.transpose(kh);
            let raw = tape.matmul(qh, kt)?;
            let scores = tape.scale(raw, scale);
            let probs = tape.masked_softmax(scores, &pair.attention_mask)?;
            let ctx = tape.matmul(probs, vh)?;
            context = Some(match context {
                Some(acc) => tape.concat_cols(acc, ctx)?,
                None => ctx,
            });
        }
        let ctx = context.expect("at least one head");
        let mut attn = linear(tape, ctx, layer.attn_output, layer.attn_output_bias)?;
        attn = dropout_node(tape, attn, config.dropout_rate, &mut dropout)?;
        let residual = tape.add(x, attn)?;
        x = tape.layer_norm(
            residual,
            layer.attn_norm_gain,
            layer.attn_norm_bias,
            LN_EPSILON,
        )?;

        let inner = linear(tape, x, layer.ffn_inner, layer.ffn_inner_bias)?;
        let activated = tape.gelu(inner);
        let mut ffn = linear(tape, activated, layer.ffn_outer, layer.ffn_outer_bias)?;
        ffn = dropout_node(tape, ffn, config.dropout_rate, &mut dropout)?;
        let residual = tape.add(x, ffn)?;
        x = tape.layer_norm(
            residual,
            layer.ffn_norm_gain,
            layer.ffn_norm_bias,
            LN_EPSILON,
        )?;
    }
    Ok(x)
}

/// Eval-mode encode on a throwaway tape.
pub fn encode(
    params: &EncoderParams<Tensor>,
    config: &EncoderConfig,
    pair: &EncodedPair,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = encode_on_tape(&mut tape, &bound, config, pair, None)?;
    Ok(tape.value(out).clone())
}

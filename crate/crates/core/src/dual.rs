//! The bilingual model: both packed inputs go through the shared encoder,
//! the target side reads the source side through Self-Adaptive Attention,
//! and an auxiliary source-language span loss is mixed in with a dynamic
//! weight computed from gold-span representation similarity.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::BilingualExample;
use crate::encoder::{
    encode_on_tape, truncated_normal, EncoderConfig, EncoderParams, INIT_STD, LN_EPSILON,
};
use crate::error::{Error, Result};
use crate::params::{GradMap, ParamGroup};
use crate::span::{span_logits, span_loss, SpanHead};
use crate::tape::{cosine_value, NodeId, Tape};
use crate::tensor::Tensor;
use crate::text::{char_span_to_token_span, encode_pair, EncodedPair, TokenSpan, Vocabulary};

use rand::SeedableRng;

/// Auxiliary-loss weight in [0, 1], detached from the gradient tape.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LambdaValue {
    pub value: f64,
    pub detached: bool,
}

impl LambdaValue {
    fn new(value: f64) -> Self {
        LambdaValue {
            value: value.clamp(0.0, 1.0),
            detached: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    /// Clamped cosine similarity of the gold-span representations.
    Dynamic,
    /// Fixed weight (ablations, gradient checks).
    Fixed(f64),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DualConfig {
    pub encoder: EncoderConfig,
    /// Literal equations use one head over the full width; more heads
    /// apply the same composition per column block.
    pub saa_heads: usize,
    /// When false the self-adaptive composition is replaced by the raw
    /// dot attention (ablation).
    pub use_saa: bool,
    pub lambda_mode: LambdaMode,
    /// Span softmaxes over the whole unmasked sequence instead of
    /// passage-only positions.
    pub whole_sequence_softmax: bool,
    pub max_answer_len: usize,
}

impl DualConfig {
    pub fn new(encoder: EncoderConfig) -> Self {
        DualConfig {
            encoder,
            saa_heads: 1,
            use_saa: true,
            lambda_mode: LambdaMode::Dynamic,
            whole_sequence_softmax: false,
            max_answer_len: 30,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.saa_heads == 0 || self.encoder.hidden_size % self.saa_heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible into {} attention blocks",
                self.encoder.hidden_size, self.saa_heads
            )));
        }
        if let LambdaMode::Fixed(v) = self.lambda_mode {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("fixed lambda {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DualParams<T> {
    pub encoder: EncoderParams<T>,
    /// Fusion projection applied to the attended source read.
    pub fusion_weight: T,
    pub fusion_bias: T,
    pub fusion_norm_gain: T,
    pub fusion_norm_bias: T,
    /// Span head over the fused 2h-wide target representation.
    pub target_head: SpanHead<T>,
    /// Span head over the raw source representation.
    pub source_head: SpanHead<T>,
}

impl<T> DualParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> DualParams<U> {
        DualParams {
            encoder: self.encoder.map(f),
            fusion_weight: f(&self.fusion_weight),
            fusion_bias: f(&self.fusion_bias),
            fusion_norm_gain: f(&self.fusion_norm_gain),
            fusion_norm_bias: f(&self.fusion_norm_bias),
            target_head: self.target_head.map(f),
            source_head: self.source_head.map(f),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(String, &T)) {
        self.encoder
            .visit(&mut |name, t| f(format!("encoder.{name}"), t));
        f("fusion.weight".into(), &self.fusion_weight);
        f("fusion.bias".into(), &self.fusion_bias);
        f("fusion.norm_gain".into(), &self.fusion_norm_gain);
        f("fusion.norm_bias".into(), &self.fusion_norm_bias);
        self.target_head
            .visit(&mut |name, t| f(format!("target_head.{name}"), t));
        self.source_head
            .visit(&mut |name, t| f(format!("source_head.{name}"), t));
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut T)) {
        self.encoder
            .visit_mut(&mut |name, t| f(format!("encoder.{name}"), t));
        f("fusion.weight".into(), &mut self.fusion_weight);
        f("fusion.bias".into(), &mut self.fusion_bias);
        f("fusion.norm_gain".into(), &mut self.fusion_norm_gain);
        f("fusion.norm_bias".into(), &mut self.fusion_norm_bias);
        self.target_head
            .visit_mut(&mut |name, t| f(format!("target_head.{name}"), t));
        self.source_head
            .visit_mut(&mut |name, t| f(format!("source_head.{name}"), t));
    }
}

impl DualParams<Tensor> {
    pub fn init(config: &DualConfig) -> Result<Self> {
        config.validate()?;
        let h = config.encoder.hidden_size;
        let mut rng = ChaCha8Rng::seed_from_u64(config.encoder.seed ^ 0xd0a1);
        Ok(DualParams {
            encoder: crate::encoder::init_params(&config.encoder)?,
            fusion_weight: truncated_normal(&mut rng, h, h, INIT_STD),
            fusion_bias: Tensor::zeros(1, h),
            fusion_norm_gain: Tensor::filled(1, h, 1.0),
            fusion_norm_bias: Tensor::zeros(1, h),
            target_head: SpanHead::init(2 * h, config.encoder.seed ^ 0x7a26),
            source_head: SpanHead::init(h, config.encoder.seed ^ 0x50fc),
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> DualParams<NodeId> {
        self.map(&mut |t| tape.leaf(t.clone()))
    }
}

impl DualParams<NodeId> {
    pub fn collect_grads(&self, tape: &Tape) -> GradMap {
        let mut out = GradMap::new();
        self.visit(&mut |name, &id| {
            out.insert(name, tape.grad_or_zeros(id));
        });
        out
    }
}

impl ParamGroup for DualParams<Tensor> {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.visit(&mut |name, t| f(&name, t));
    }

    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.visit_mut(&mut |name, t| f(&name, t));
    }
}

fn saa_block(
    tape: &mut Tape,
    b_t: NodeId,
    b_s: NodeId,
    mask_t: &[bool],
    mask_s: &[bool],
    use_saa: bool,
) -> Result<NodeId> {
    let b_s_t = tape.transpose(b_s);
    let a_ts = tape.matmul(b_t, b_s_t)?;
    let tilde = if use_saa {
        let b_t_t = tape.transpose(b_t);
        let t_self = tape.matmul(b_t, b_t_t)?;
        let a_t = tape.masked_softmax(t_self, mask_t)?;
        let b_s_t2 = tape.transpose(b_s);
        let s_self = tape.matmul(b_s, b_s_t2)?;
        let a_s = tape.masked_softmax(s_self, mask_s)?;
        let left = tape.matmul(a_t, a_ts)?;
        let a_s_t = tape.transpose(a_s);
        tape.matmul(left, a_s_t)?
    } else {
        a_ts
    };
    let weights = tape.masked_softmax(tilde, mask_s)?;
    tape.matmul(weights, b_s)
}

/// Self-Adaptive Attention: compose target self-attention, raw
/// target-source dot attention, and source self-attention, then read the
/// source representation through a final row softmax. Output is
/// (target_len, hidden). With `saa_heads > 1` the same composition runs
/// per column block and the blocks are concatenated.
pub fn saa_attention(
    tape: &mut Tape,
    b_t: NodeId,
    b_s: NodeId,
    mask_t: &[bool],
    mask_s: &[bool],
    saa_heads: usize,
    use_saa: bool,
) -> Result<NodeId> {
    let (t_len, hidden) = tape.value(b_t).shape();
    let (s_len, s_hidden) = tape.value(b_s).shape();
    if hidden != s_hidden {
        return Err(Error::ShapeMismatch {
            op: "saa_attention",
            left_rows: t_len,
            left_cols: hidden,
            right_rows: s_len,
            right_cols: s_hidden,
        });
    }
    if mask_t.len() != t_len || mask_s.len() != s_len {
        return Err(Error::ShapeMismatch {
            op: "saa_attention_masks",
            left_rows: mask_t.len(),
            left_cols: mask_s.len(),
            right_rows: t_len,
            right_cols: s_len,
        });
    }
    if saa_heads <= 1 {
        return saa_block(tape, b_t, b_s, mask_t, mask_s, use_saa);
    }
    let width = hidden / saa_heads;
    let mut out: Option<NodeId> = None;
    for head in 0..saa_heads {
        let t_h = tape.slice_cols(b_t, head * width, width)?;
        let s_h = tape.slice_cols(b_s, head * width, width)?;
        let r = saa_block(tape, t_h, s_h, mask_t, mask_s, use_saa)?;
        out = Some(match out {
            Some(acc) => tape.concat_cols(acc, r)?,
            None => r,
        });
    }
    Ok(out.expect("at least one block"))
}

/// Fusion: project the attended read, add it residually to the target
/// representation under layer norm, and concatenate with the original.
/// Output width is exactly 2h; the first h columns are the target
/// representation unchanged.
pub fn fuse(
    tape: &mut Tape,
    b_t: NodeId,
    attended: NodeId,
    params: &DualParams<NodeId>,
) -> Result<NodeId> {
    let projected = tape.matmul(attended, params.fusion_weight)?;
    let projected = tape.add_row(projected, params.fusion_bias)?;
    let residual = tape.add(b_t, projected)?;
    let normed = tape.layer_norm(
        residual,
        params.fusion_norm_gain,
        params.fusion_norm_bias,
        LN_EPSILON,
    )?;
    tape.concat_cols(b_t, normed)
}

/// Gold-span representation: concat of the start row, the end row, and a
/// self-attended average pool restricted to the span rows. Width 3h.
pub fn span_representation(tape: &mut Tape, b: NodeId, span: TokenSpan) -> Result<NodeId> {
    let rows = tape.value(b).rows();
    if span.end >= rows {
        return Err(Error::InvalidSpan {
            start: span.start,
            end: span.end,
            len: rows,
        });
    }
    let start_row = tape.slice_rows(b, span.start, 1)?;
    let end_row = tape.slice_rows(b, span.end, 1)?;
    let block = tape.slice_rows(b, span.start, span.len())?;
    let block_t = tape.transpose(block);
    let scores = tape.matmul(block, block_t)?;
    let weights = tape.masked_softmax(scores, &vec![true; span.len()])?;
    let attended = tape.matmul(weights, block)?;
    let pooled = tape.mean_rows(attended);
    let boundary = tape.concat_cols(start_row, end_row)?;
    tape.concat_cols(boundary, pooled)
}

/// lambda = max(0, cos(rep_source, rep_target)), computed on detached
/// values so no gradient flows through it. Zero-norm representations map
/// to lambda = 0 with a warning.
pub fn dynamic_lambda(rep_source: &Tensor, rep_target: &Tensor) -> LambdaValue {
    match cosine_value(rep_source, rep_target) {
        Ok(cos) => LambdaValue::new(cos.max(0.0)),
        Err(_) => {
            log::warn!("zero-norm span representation, forcing lambda to 0");
            LambdaValue::new(0.0)
        }
    }
}

/// Everything the loss computation exposes besides the loss node.
#[derive(Clone, Debug)]
pub struct DualForward {
    pub loss: NodeId,
    pub target_loss: f64,
    pub aux_loss: Option<f64>,
    pub lambda: LambdaValue,
    pub target_start: Tensor,
    pub target_end: Tensor,
    pub source_start: Tensor,
    pub source_end: Tensor,
    pub target_pair: EncodedPair,
}

/// Shared forward machinery: both encodings plus all four distributions.
struct DualPaths {
    pair_t: EncodedPair,
    pair_s: EncodedPair,
    b_t: NodeId,
    b_s: NodeId,
    start_t: NodeId,
    end_t: NodeId,
    start_s: NodeId,
    end_s: NodeId,
}

fn dual_paths(
    tape: &mut Tape,
    target: &crate::data::MRCExample,
    source: &crate::data::MRCExample,
    params: &DualParams<NodeId>,
    vocab_target: &Vocabulary,
    vocab_source: &Vocabulary,
    config: &DualConfig,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<DualPaths> {
    let max_len = config.encoder.max_len;
    let pair_t = encode_pair(&target.question, &target.passage, vocab_target, max_len)?;
    let pair_s = encode_pair(&source.question, &source.passage, vocab_source, max_len)?;

    let b_t = encode_on_tape(
        tape,
        &params.encoder,
        &config.encoder,
        &pair_t,
        dropout.as_deref_mut(),
    )?;
    let b_s = encode_on_tape(
        tape,
        &params.encoder,
        &config.encoder,
        &pair_s,
        dropout.as_deref_mut(),
    )?;

    // Target path: SAA read of the source, fusion, wide span head.
    let attended = saa_attention(
        tape,
        b_t,
        b_s,
        &pair_t.attention_mask,
        &pair_s.attention_mask,
        config.saa_heads,
        config.use_saa,
    )?;
    let fused = fuse(tape, b_t, attended, params)?;
    let mask_t = if config.whole_sequence_softmax {
        pair_t.attention_mask.clone()
    } else {
        pair_t.passage_mask()
    };
    let (start_t, end_t) = span_logits(tape, fused, &params.target_head, &mask_t)?;

    // Source path: plain span head on the source representation.
    let mask_s = if config.whole_sequence_softmax {
        pair_s.attention_mask.clone()
    } else {
        pair_s.passage_mask()
    };
    let (start_s, end_s) = span_logits(tape, b_s, &params.source_head, &mask_s)?;

    Ok(DualPaths {
        pair_t,
        pair_s,
        b_t,
        b_s,
        start_t,
        end_t,
        start_s,
        end_s,
    })
}

/// Full bilingual forward pass and loss for one example:
/// total = L_target + lambda * L_aux, with lambda = 0 whenever no valid
/// source span exists.
pub fn dual_forward_loss(
    tape: &mut Tape,
    example: &BilingualExample,
    params: &DualParams<NodeId>,
    vocab_target: &Vocabulary,
    vocab_source: &Vocabulary,
    config: &DualConfig,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<DualForward> {
    let paths = dual_paths(
        tape,
        &example.target,
        &example.source,
        params,
        vocab_target,
        vocab_source,
        config,
        dropout,
    )?;
    let DualPaths {
        pair_t,
        pair_s,
        b_t,
        b_s,
        start_t,
        end_t,
        start_s,
        end_s,
    } = paths;

    let answer_t = example.target.primary_answer().ok_or_else(|| Error::Supervision {
        id: example.target.id.clone(),
        reason: "target example has no answer".into(),
    })?;
    let gold_t = char_span_to_token_span(
        &pair_t,
        answer_t.char_start,
        answer_t.text.chars().count(),
    )?
    .ok_or_else(|| Error::Supervision {
        id: example.target.id.clone(),
        reason: "target gold span truncated away".into(),
    })?;

    // A marked-valid source span can still fail to resolve after packing
    // (truncation); that silently downgrades to lambda = 0.
    let gold_s = if example.source_span_valid {
        example
            .source
            .primary_answer()
            .and_then(|a| {
                char_span_to_token_span(&pair_s, a.char_start, a.text.chars().count()).ok()
            })
            .flatten()
    } else {
        None
    };

    let loss_t = span_loss(tape, start_t, end_t, gold_t).map_err(|e| match e {
        Error::MaskedGoldIndex { index } => Error::Supervision {
            id: example.target.id.clone(),
            reason: format!("gold position {index} outside the unmasked region"),
        },
        other => other,
    })?;

    let lambda = match config.lambda_mode {
        LambdaMode::Fixed(v) => LambdaValue::new(v),
        LambdaMode::Dynamic => match gold_s {
            Some(span_s) => {
                let rep_t = span_representation(tape, b_t, gold_t)?;
                let rep_s = span_representation(tape, b_s, span_s)?;
                dynamic_lambda(tape.value(rep_s), tape.value(rep_t))
            }
            None => LambdaValue::new(0.0),
        },
    };

    let mut aux_loss = None;
    let loss = match gold_s {
        Some(span_s) if lambda.value > 0.0 => {
            let loss_aux = span_loss(tape, start_s, end_s, span_s).map_err(|e| match e {
                Error::MaskedGoldIndex { index } => Error::Supervision {
                    id: example.source.id.clone(),
                    reason: format!("source gold position {index} outside the unmasked region"),
                },
                other => other,
            })?;
            aux_loss = Some(tape.value(loss_aux).item());
            let weighted = tape.scale(loss_aux, lambda.value);
            tape.add(loss_t, weighted)?
        }
        _ => loss_t,
    };

    Ok(DualForward {
        loss,
        target_loss: tape.value(loss_t).item(),
        aux_loss,
        lambda,
        target_start: tape.value(start_t).clone(),
        target_end: tape.value(end_t).clone(),
        source_start: tape.value(start_s).clone(),
        source_end: tape.value(end_s).clone(),
        target_pair: pair_t,
    })
}

/// Eval-mode target-side prediction: no supervision is consumed, only the
/// question/passage fields of both languages.
pub fn dual_predict(
    params: &DualParams<Tensor>,
    config: &DualConfig,
    example: &BilingualExample,
    vocab_target: &Vocabulary,
    vocab_source: &Vocabulary,
) -> Result<crate::span::SpanPrediction> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let paths = dual_paths(
        &mut tape,
        &example.target,
        &example.source,
        &bound,
        vocab_target,
        vocab_source,
        config,
        None,
    )?;
    crate::span::decode_span(
        tape.value(paths.start_t),
        tape.value(paths.end_t),
        &paths.pair_t,
        config.max_answer_len,
        "dual",
    )
}

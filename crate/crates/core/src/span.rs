//! Span extraction heads and the three single-encoder model
//! configurations: the monolingual reader, the answer aligner, and the
//! answer verifier. They differ only in how the input is packed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    encode_on_tape, truncated_normal, EncoderConfig, EncoderParams, INIT_STD,
};
use crate::error::{Error, Result};
use crate::params::{param_struct, GradMap, ParamGroup};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use crate::text::{encode_segments, EncodedPair, TokenSpan, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackingKind {
    /// `[CLS] question [SEP] passage [SEP]`
    Reader,
    /// `[CLS] translated_answer [SEP] passage [SEP]`
    Aligner,
    /// `[CLS] question [SEP] translated_answer [SEP] passage [SEP]`
    Verifier,
}

/// Pack the fields a model kind needs. Missing required fields are a
/// packing error; the passage always goes last and is the only part that
/// may be truncated.
pub fn pack_input(
    kind: PackingKind,
    passage: &str,
    question: Option<&str>,
    translated_answer: Option<&str>,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<EncodedPair> {
    let missing = |what: &str| Error::Packing(format!("{kind:?} packing needs {what}"));
    match kind {
        PackingKind::Reader => {
            let q = question.ok_or_else(|| missing("a question"))?;
            encode_segments(&[q], passage, vocab, max_len)
        }
        PackingKind::Aligner => {
            let a = translated_answer.ok_or_else(|| missing("a translated answer"))?;
            encode_segments(&[a], passage, vocab, max_len)
        }
        PackingKind::Verifier => {
            let q = question.ok_or_else(|| missing("a question"))?;
            let a = translated_answer.ok_or_else(|| missing("a translated answer"))?;
            encode_segments(&[q, a], passage, vocab, max_len)
        }
    }
}

param_struct!(SpanHead { projection, bias });

impl SpanHead<Tensor> {
    /// Projection (width, 2) plus bias; column 0 scores starts, column 1 ends.
    pub fn init(width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SpanHead {
            projection: truncated_normal(&mut rng, width, 2, INIT_STD),
            bias: Tensor::zeros(1, 2),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> SpanHead<NodeId> {
        self.map(&mut |t| tape.leaf(t.clone()))
    }
}

impl SpanHead<NodeId> {
    pub fn collect_grads(&self, tape: &Tape, prefix: &str, out: &mut GradMap) {
        self.visit(&mut |name, &id| {
            out.insert(format!("{prefix}{name}"), tape.grad_or_zeros(id));
        });
    }
}

/// Start and end distributions over positions: two masked softmaxes over
/// the head's logit columns, computed independently.
pub fn span_logits(
    tape: &mut Tape,
    representation: NodeId,
    head: &SpanHead<NodeId>,
    mask: &[bool],
) -> Result<(NodeId, NodeId)> {
    let raw = tape.matmul(representation, head.projection)?;
    let logits = tape.add_row(raw, head.bias)?;
    let start_col = tape.slice_cols(logits, 0, 1)?;
    let end_col = tape.slice_cols(logits, 1, 1)?;
    let start_row = tape.transpose(start_col);
    let end_row = tape.transpose(end_col);
    let start = tape.masked_softmax(start_row, mask)?;
    let end = tape.masked_softmax(end_row, mask)?;
    Ok((start, end))
}

/// Per-example span loss: cross-entropy of the start plus the end.
/// Batch averaging happens in the training loop.
pub fn span_loss(
    tape: &mut Tape,
    start_probs: NodeId,
    end_probs: NodeId,
    gold: TokenSpan,
) -> Result<NodeId> {
    let ce_start = tape.cross_entropy(start_probs, gold.start)?;
    let ce_end = tape.cross_entropy(end_probs, gold.end)?;
    tape.add(ce_start, ce_end)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpanPrediction {
    pub start: usize,
    pub end: usize,
    pub text: String,
    pub start_prob: f64,
    pub end_prob: f64,
    /// Which model or pipeline produced this prediction.
    pub provenance: String,
}

impl SpanPrediction {
    pub fn score(&self) -> f64 {
        self.start_prob * self.end_prob
    }

    pub fn span(&self) -> TokenSpan {
        TokenSpan::new(self.start, self.end)
    }
}

/// Maximize start_prob[i] * end_prob[j] over passage positions with
/// i <= j and j - i + 1 <= max_answer_len; ties prefer the smaller i,
/// then the smaller j.
pub fn decode_span(
    start_probs: &Tensor,
    end_probs: &Tensor,
    pair: &EncodedPair,
    max_answer_len: usize,
    provenance: &str,
) -> Result<SpanPrediction> {
    if max_answer_len == 0 {
        return Err(Error::Config("max_answer_len must be at least 1".into()));
    }
    let range = pair.passage_token_range.clone();
    let ps = start_probs.data();
    let pe = end_probs.data();
    let mut best: Option<(usize, usize, f64)> = None;
    for i in range.clone() {
        for j in i..range.end.min(i + max_answer_len) {
            let score = ps[i] * pe[j];
            if best.map(|(_, _, s)| score > s).unwrap_or(true) {
                best = Some((i, j, score));
            }
        }
    }
    let (start, end, _) = best.ok_or(Error::DecodeEmpty)?;
    let text = pair
        .span_text(TokenSpan::new(start, end))
        .ok_or(Error::DecodeEmpty)?;
    Ok(SpanPrediction {
        start,
        end,
        text,
        start_prob: ps[start],
        end_prob: pe[end],
        provenance: provenance.to_string(),
    })
}

/// A single-encoder span model: the shared encoder plus one width-h head.
#[derive(Clone, Debug)]
pub struct SingleModelParams<T> {
    pub encoder: EncoderParams<T>,
    pub head: SpanHead<T>,
}

impl SingleModelParams<Tensor> {
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        Ok(SingleModelParams {
            encoder: crate::encoder::init_params(config)?,
            head: SpanHead::init(config.hidden_size, config.seed ^ 0x5ead),
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> SingleModelParams<NodeId> {
        SingleModelParams {
            encoder: self.encoder.bind(tape),
            head: self.head.bind(tape),
        }
    }
}

impl SingleModelParams<NodeId> {
    pub fn collect_grads(&self, tape: &Tape) -> GradMap {
        let mut out = GradMap::new();
        self.encoder.collect_grads(tape, "encoder.", &mut out);
        self.head.collect_grads(tape, "head.", &mut out);
        out
    }
}

impl ParamGroup for SingleModelParams<Tensor> {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder
            .visit(&mut |name, t| f(&format!("encoder.{name}"), t));
        self.head.visit(&mut |name, t| f(&format!("head.{name}"), t));
    }

    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder
            .visit_mut(&mut |name, t| f(&format!("encoder.{name}"), t));
        self.head
            .visit_mut(&mut |name, t| f(&format!("head.{name}"), t));
    }
}

/// Forward pass for a packed single-encoder input: start/end
/// distributions over passage positions.
pub fn single_forward(
    tape: &mut Tape,
    params: &SingleModelParams<NodeId>,
    config: &EncoderConfig,
    pair: &EncodedPair,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(NodeId, NodeId)> {
    let representation = encode_on_tape(tape, &params.encoder, config, pair, dropout)?;
    span_logits(tape, representation, &params.head, &pair.passage_mask())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::TokenizeMode;

    fn vocab() -> Vocabulary {
        Vocabulary::build(
            &["q1 q2 a1 a2 p1 p2 p3 p4 p5"],
            TokenizeMode::Whitespace,
            32,
        )
        .unwrap()
    }

    #[test]
    fn reader_packing_matches_encode_pair() {
        let v = vocab();
        let via_pack = pack_input(
            PackingKind::Reader,
            "p1 p2 p3",
            Some("q1 q2"),
            None,
            &v,
            16,
        )
        .unwrap();
        let direct = crate::text::encode_pair("q1 q2", "p1 p2 p3", &v, 16).unwrap();
        assert_eq!(via_pack.token_ids, direct.token_ids);
        assert_eq!(via_pack.segment_ids, direct.segment_ids);
    }

    #[test]
    fn aligner_packing_token_count() {
        // 2-token answer + 5-token passage: CLS + 2 + SEP + 5 + SEP = 10.
        let v = vocab();
        let pair = pack_input(
            PackingKind::Aligner,
            "p1 p2 p3 p4 p5",
            None,
            Some("a1 a2"),
            &v,
            16,
        )
        .unwrap();
        assert_eq!(pair.real_len(), 10);
    }

    #[test]
    fn verifier_packing_has_three_separators() {
        let v = vocab();
        let pair = pack_input(
            PackingKind::Verifier,
            "p1 p2",
            Some("q1"),
            Some("a1"),
            &v,
            16,
        )
        .unwrap();
        let seps = pair
            .token_ids
            .iter()
            .filter(|&&id| id == crate::text::SEP_ID)
            .count();
        assert_eq!(seps, 3);
        // Segment 0 covers everything before the passage segment.
        let p = pair.passage_token_range.start;
        assert!(pair.segment_ids[..p].iter().all(|&s| s == 0));
        assert!(pair.segment_ids[p..pair.real_len()].iter().all(|&s| s == 1));
    }

    #[test]
    fn missing_required_field_is_packing_error() {
        let v = vocab();
        assert!(matches!(
            pack_input(PackingKind::Reader, "p1", None, None, &v, 16),
            Err(Error::Packing(_))
        ));
        assert!(matches!(
            pack_input(PackingKind::Verifier, "p1", Some("q1"), None, &v, 16),
            Err(Error::Packing(_))
        ));
    }

    fn uniform_distributions(pair: &EncodedPair) -> (Tensor, Tensor) {
        let len = pair.len();
        let k = pair.passage_token_range.len() as f64;
        let mut data = vec![0.0; len];
        for i in pair.passage_token_range.clone() {
            data[i] = 1.0 / k;
        }
        (Tensor::row(&data), Tensor::row(&data))
    }

    #[test]
    fn span_logits_uniform_over_unmasked() {
        let v = vocab();
        let pair = crate::text::encode_pair("q1", "p1 p2 p3 p4", &v, 12).unwrap();
        let mut tape = Tape::new();
        // Zero representation and zero projections give uniform logits.
        let rep = tape.leaf(Tensor::zeros(pair.len(), 8));
        let head = SpanHead {
            projection: tape.leaf(Tensor::zeros(8, 2)),
            bias: tape.leaf(Tensor::zeros(1, 2)),
        };
        let (start, end) = span_logits(&mut tape, rep, &head, &pair.passage_mask()).unwrap();
        let k = pair.passage_token_range.len() as f64;
        for id in [start, end] {
            let probs = tape.value(id);
            let sum: f64 = probs.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
            for i in pair.passage_token_range.clone() {
                assert!((probs.data()[i] - 1.0 / k).abs() < 1e-12);
            }
            assert_eq!(probs.data()[0], 0.0);
        }
    }

    #[test]
    fn span_logits_argmax_follows_hand_set_logits() {
        let v = vocab();
        let pair = crate::text::encode_pair("q1", "p1 p2 p3 p4", &v, 12).unwrap();
        let mut tape = Tape::new();
        let len = pair.len();
        // Representation row i = i, projection picks a bump at position 3.
        let mut rep = Tensor::zeros(len, 1);
        let favored = pair.passage_token_range.start + 1;
        rep.set(favored, 0, 5.0);
        let rep = tape.leaf(rep);
        let head = SpanHead {
            projection: tape.leaf(Tensor::from_vec(1, 2, vec![1.0, 1.0]).unwrap()),
            bias: tape.leaf(Tensor::zeros(1, 2)),
        };
        let (start, _) = span_logits(&mut tape, rep, &head, &pair.passage_mask()).unwrap();
        let probs = tape.value(start);
        let argmax = probs
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, favored);
    }

    #[test]
    fn span_loss_uniform_is_two_log_k() {
        let v = vocab();
        let pair = crate::text::encode_pair("q1", "p1 p2 p3 p4", &v, 12).unwrap();
        let mut tape = Tape::new();
        let (ps, pe) = uniform_distributions(&pair);
        let ps = tape.leaf(ps);
        let pe = tape.leaf(pe);
        let gold = TokenSpan::new(
            pair.passage_token_range.start,
            pair.passage_token_range.start + 1,
        );
        let loss = span_loss(&mut tape, ps, pe, gold).unwrap();
        let k = pair.passage_token_range.len() as f64;
        assert!((tape.value(loss).item() - 2.0 * k.ln()).abs() < 1e-12);
    }

    #[test]
    fn decode_concentrated_mass() {
        let v = vocab();
        let pair = crate::text::encode_pair("q1", "p1 p2 p3 p4 p5", &v, 12).unwrap();
        let len = pair.len();
        let p = pair.passage_token_range.start;
        let mut ps = vec![0.0; len];
        let mut pe = vec![0.0; len];
        ps[p + 2] = 1.0;
        pe[p + 4] = 1.0;
        let pred = decode_span(&Tensor::row(&ps), &Tensor::row(&pe), &pair, 30, "test").unwrap();
        assert_eq!((pred.start, pred.end), (p + 2, p + 4));
        assert_eq!(pred.text, "p3 p4 p5");
    }

    #[test]
    fn decode_single_token_passage() {
        let v = vocab();
        let pair = crate::text::encode_pair("q1", "p1", &v, 8).unwrap();
        let (ps, pe) = uniform_distributions(&pair);
        let pred = decode_span(&ps, &pe, &pair, 30, "test").unwrap();
        assert_eq!(pred.start, pair.passage_token_range.start);
        assert_eq!(pred.text, "p1");
    }

    #[test]
    fn decode_skips_invalid_end_before_start() {
        let v = vocab();
        let pair = crate::text::encode_pair("q1", "p1 p2 p3 p4 p5", &v, 12).unwrap();
        let len = pair.len();
        let p = pair.passage_token_range.start;
        // Highest mass would be (start=p+3, end=p+1), which is invalid.
        let mut ps = vec![0.0; len];
        let mut pe = vec![0.0; len];
        ps[p + 3] = 0.9;
        ps[p] = 0.1;
        pe[p + 1] = 0.9;
        pe[p + 4] = 0.1;
        let pred = decode_span(&Tensor::row(&ps), &Tensor::row(&pe), &pair, 30, "test").unwrap();
        assert!(pred.start <= pred.end);
        // Best valid pair is (p, p+1) with 0.1*0.9 vs (p+3, p+4) 0.9*0.1;
        // the tie resolves to the smaller start.
        assert_eq!((pred.start, pred.end), (p, p + 1));
    }

    #[test]
    fn decode_respects_max_answer_len() {
        let v = vocab();
        let pair = crate::text::encode_pair("q1", "p1 p2 p3 p4 p5", &v, 12).unwrap();
        let len = pair.len();
        let p = pair.passage_token_range.start;
        let mut ps = vec![0.0; len];
        let mut pe = vec![0.0; len];
        ps[p] = 1.0;
        pe[p + 4] = 1.0;
        pe[p + 1] = 0.5;
        let pred = decode_span(&Tensor::row(&ps), &Tensor::row(&pe), &pair, 2, "test").unwrap();
        assert_eq!((pred.start, pred.end), (p, p + 1));
    }
}

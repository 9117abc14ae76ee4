//! Prompt templates, answer-span masking, restricted ranking, and the
//! fine-tuning step.
//!
//! A template is an ordered list of segments rendered into a token
//! sequence. Training renders replace the answer tokens with [MASK] and
//! record the targets; inference renders end with a single appended
//! [MASK]. Templates serialize as plain text, one `kind:payload` line per
//! segment plus a leading `position:` line:
//!
//! ```text
//! position:mid
//! question:
//! context:0,16
//! answer:
//! ```
//!
//! Payloads: `literal:` carries the literal words, `context:` carries
//! `start,len` into the [CTX] id block, the slot kinds carry nothing.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::encoders::MaskKind;
use crate::error::{CoreError, Result};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::infer::token_logits;
use crate::objectives::mlm_loss;
use crate::encoders::{encode_multimodal, encode_text};
use crate::params::{Bound, Params};
use crate::tensor::Tensor;
use crate::vocab::{TokenSequence, Vocabulary, CLS, MASK, NUM_CTX, SEP};

/// Context lengths exercised by the length/position sweep.
pub const CONTEXT_LENGTHS: [usize; 5] = [1, 4, 8, 16, 32];
pub const DEFAULT_CONTEXT_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Segment {
    Literal(String),
    /// Learnable context tokens: `len` ids starting at [CTX] row `start`.
    Context { start: usize, len: usize },
    QuestionSlot,
    SentenceSlot,
    AnswerSlot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptPosition {
    Begin,
    Mid,
}

impl PromptPosition {
    pub fn name(self) -> &'static str {
        match self {
            PromptPosition::Begin => "begin",
            PromptPosition::Mid => "mid",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub segments: Vec<Segment>,
    pub position: PromptPosition,
}

impl PromptTemplate {
    pub fn new(segments: Vec<Segment>, position: PromptPosition) -> Result<Self> {
        let t = PromptTemplate { segments, position };
        t.validate()?;
        Ok(t)
    }

    /// "[QUESTION] answer : [ANSWER]"
    pub fn vqa_natural() -> Self {
        PromptTemplate {
            segments: alloc::vec![
                Segment::QuestionSlot,
                Segment::Literal("answer :".to_string()),
                Segment::AnswerSlot,
            ],
            position: PromptPosition::Mid,
        }
    }

    /// "[QUESTION] [CTX]*len [ANSWER]" (mid) or "[CTX]*len [QUESTION] [ANSWER]" (begin).
    pub fn vqa_context(len: usize, position: PromptPosition) -> Result<Self> {
        let ctx = Segment::Context { start: 0, len };
        let segments = match position {
            PromptPosition::Begin => {
                alloc::vec![ctx, Segment::QuestionSlot, Segment::AnswerSlot]
            }
            PromptPosition::Mid => {
                alloc::vec![Segment::QuestionSlot, ctx, Segment::AnswerSlot]
            }
        };
        PromptTemplate::new(segments, position)
    }

    /// "a photo of [ANSWER]"
    pub fn classification_natural() -> Self {
        PromptTemplate {
            segments: alloc::vec![
                Segment::Literal("a photo of".to_string()),
                Segment::AnswerSlot,
            ],
            position: PromptPosition::Begin,
        }
    }

    /// "[CTX]*len [ANSWER]"
    pub fn classification_context(len: usize) -> Result<Self> {
        PromptTemplate::new(
            alloc::vec![Segment::Context { start: 0, len }, Segment::AnswerSlot],
            PromptPosition::Begin,
        )
    }

    /// "[SENTENCE] relationship : [ANSWER]"
    pub fn entailment_natural() -> Self {
        PromptTemplate {
            segments: alloc::vec![
                Segment::SentenceSlot,
                Segment::Literal("relationship :".to_string()),
                Segment::AnswerSlot,
            ],
            position: PromptPosition::Mid,
        }
    }

    /// Learnable context only: "[SENTENCE] [CTX]*len [ANSWER]"
    pub fn entailment_context(len: usize) -> Result<Self> {
        PromptTemplate::new(
            alloc::vec![
                Segment::SentenceSlot,
                Segment::Context { start: 0, len },
                Segment::AnswerSlot,
            ],
            PromptPosition::Mid,
        )
    }

    /// Learnable context plus the natural words:
    /// "[SENTENCE] [CTX]*len relationship : [ANSWER]"
    pub fn entailment_context_plus(len: usize) -> Result<Self> {
        PromptTemplate::new(
            alloc::vec![
                Segment::SentenceSlot,
                Segment::Context { start: 0, len },
                Segment::Literal("relationship :".to_string()),
                Segment::AnswerSlot,
            ],
            PromptPosition::Mid,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let answers = self
            .segments
            .iter()
            .filter(|s| matches!(s, Segment::AnswerSlot))
            .count();
        if answers != 1 {
            return Err(CoreError::invalid("template needs exactly one answer slot"));
        }
        let answer_at = self
            .segments
            .iter()
            .position(|s| matches!(s, Segment::AnswerSlot))
            .unwrap();
        for (i, seg) in self.segments.iter().enumerate() {
            if let Segment::Context { start, len } = seg {
                if i > answer_at {
                    return Err(CoreError::invalid("context may not follow the answer slot"));
                }
                if !CONTEXT_LENGTHS.contains(len) {
                    return Err(CoreError::invalid("unsupported context length"));
                }
                if start + len > NUM_CTX {
                    return Err(CoreError::invalid("context ids exceed the [CTX] block"));
                }
                let expected = match self.position {
                    PromptPosition::Begin => 0,
                    PromptPosition::Mid => answer_at - 1,
                };
                // LCP-style templates put literal words between a mid
                // context and the answer; accept context anywhere in
                // (begin-of-body, answer) for Mid except position 0.
                match self.position {
                    PromptPosition::Begin if i != expected => {
                        return Err(CoreError::invalid(
                            "begin-position template must open with its context",
                        ));
                    }
                    PromptPosition::Mid if i == 0 => {
                        return Err(CoreError::invalid(
                            "mid-position template cannot open with its context",
                        ));
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn to_lines(&self) -> String {
        let mut out = format!("position:{}\n", self.position.name());
        for seg in &self.segments {
            match seg {
                Segment::Literal(text) => out.push_str(&format!("literal:{text}\n")),
                Segment::Context { start, len } => {
                    out.push_str(&format!("context:{start},{len}\n"))
                }
                Segment::QuestionSlot => out.push_str("question:\n"),
                Segment::SentenceSlot => out.push_str("sentence:\n"),
                Segment::AnswerSlot => out.push_str("answer:\n"),
            }
        }
        out
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        let mut position = None;
        let mut segments = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (kind, payload) = line
                .split_once(':')
                .ok_or_else(|| CoreError::invalid("template line missing ':'"))?;
            match kind {
                "position" => {
                    position = Some(match payload {
                        "begin" => PromptPosition::Begin,
                        "mid" => PromptPosition::Mid,
                        _ => return Err(CoreError::invalid("unknown position tag")),
                    })
                }
                "literal" => segments.push(Segment::Literal(payload.to_string())),
                "context" => {
                    let (start, len) = payload
                        .split_once(',')
                        .ok_or_else(|| CoreError::invalid("context payload wants start,len"))?;
                    let start = start
                        .parse()
                        .map_err(|_| CoreError::invalid("bad context start"))?;
                    let len = len
                        .parse()
                        .map_err(|_| CoreError::invalid("bad context length"))?;
                    segments.push(Segment::Context { start, len });
                }
                "question" => segments.push(Segment::QuestionSlot),
                "sentence" => segments.push(Segment::SentenceSlot),
                "answer" => segments.push(Segment::AnswerSlot),
                _ => return Err(CoreError::invalid("unknown template line kind")),
            }
        }
        let position = position.ok_or_else(|| CoreError::invalid("template missing position"))?;
        PromptTemplate::new(segments, position)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RenderMode {
    /// Answer tokens become [MASK]s with recorded targets; ends with [SEP].
    Train,
    /// Prompt only, ending with a single appended [MASK].
    Infer,
}

/// Values for the template's slots.
#[derive(Clone, Copy, Debug, Default)]
pub struct SlotValues<'a> {
    pub question: Option<&'a str>,
    pub sentence: Option<&'a str>,
    pub answer: Option<&'a str>,
}

#[derive(Clone, Debug)]
pub struct RenderedPrompt {
    pub seq: TokenSequence,
    /// (position, original token id) pairs for the masked answer span.
    pub targets: Vec<(usize, u32)>,
}

impl RenderedPrompt {
    /// The rendered sequence with any trailing [MASK] dropped — the
    /// prefix handed to the beam decoder, which appends its own masks.
    pub fn decode_prefix(&self) -> TokenSequence {
        let mut ids = self.seq.ids.clone();
        if ids.last() == Some(&MASK) {
            ids.pop();
        }
        TokenSequence::from_ids(ids)
    }
}

pub fn render_prompt(
    template: &PromptTemplate,
    vocab: &Vocabulary,
    slots: SlotValues<'_>,
    mode: RenderMode,
    max_len: usize,
) -> Result<RenderedPrompt> {
    template.validate()?;
    let mut ids: Vec<u32> = alloc::vec![CLS];
    let mut targets = Vec::new();
    let mut answer_span = None;
    let mut prompt_span: Option<(usize, usize)> = None;
    let note_prompt = |start: usize, end: usize, span: &mut Option<(usize, usize)>| {
        *span = Some(match span {
            None => (start, end),
            Some((s, _)) => (*s, end),
        });
    };
    for seg in &template.segments {
        match seg {
            Segment::Literal(text) => {
                let start = ids.len();
                for word in text.split_whitespace() {
                    ids.push(vocab.id(word)?);
                }
                note_prompt(start, ids.len(), &mut prompt_span);
            }
            Segment::Context { start, len } => {
                let at = ids.len();
                for i in *start..start + len {
                    ids.push(vocab.ctx_id(i));
                }
                note_prompt(at, ids.len(), &mut prompt_span);
            }
            Segment::QuestionSlot => {
                let q = slots
                    .question
                    .ok_or_else(|| CoreError::invalid("template needs a question"))?;
                for word in q.split_whitespace() {
                    ids.push(vocab.id(word)?);
                }
            }
            Segment::SentenceSlot => {
                let s = slots
                    .sentence
                    .ok_or_else(|| CoreError::invalid("template needs a sentence"))?;
                for word in s.split_whitespace() {
                    ids.push(vocab.id(word)?);
                }
            }
            Segment::AnswerSlot => match mode {
                RenderMode::Train => {
                    let a = slots
                        .answer
                        .ok_or_else(|| CoreError::invalid("training render needs an answer"))?;
                    let start = ids.len();
                    for word in a.split_whitespace() {
                        let id = vocab.id(word)?;
                        targets.push((ids.len(), id));
                        ids.push(MASK);
                    }
                    if ids.len() == start {
                        return Err(CoreError::invalid("empty answer"));
                    }
                    answer_span = Some((start, ids.len()));
                }
                RenderMode::Infer => {
                    answer_span = Some((ids.len(), ids.len() + 1));
                    ids.push(MASK);
                }
            },
        }
    }
    if mode == RenderMode::Train {
        ids.push(SEP);
    }
    if ids.len() > max_len + 1 {
        return Err(CoreError::invalid(format!(
            "rendered prompt length {} exceeds max {}",
            ids.len(),
            max_len + 1
        )));
    }
    let mut seq = TokenSequence::from_ids(ids);
    seq.prompt_span = prompt_span;
    seq.answer_span = answer_span;
    seq.mask_positions = targets.iter().map(|&(p, _)| p).collect();
    Ok(RenderedPrompt { seq, targets })
}

/// Score a single-[MASK] sequence against a closed label set and return
/// the winning label index plus per-label logits. All labels must be a
/// single token; ties break toward the lower token id.
pub fn restricted_rank<F: Float>(
    visual: &Tensor<F>,
    seq: &TokenSequence,
    labels: &[String],
    vocab: &Vocabulary,
    params: &Params<F>,
) -> Result<(usize, Vec<f64>)> {
    if labels.is_empty() {
        return Err(CoreError::invalid("empty label set"));
    }
    let mask_at: Vec<usize> = seq
        .ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id == MASK)
        .map(|(i, _)| i)
        .collect();
    if mask_at.len() != 1 {
        return Err(CoreError::invalid("restricted ranking wants exactly one [MASK]"));
    }
    let mut label_ids = Vec::with_capacity(labels.len());
    for label in labels {
        if label.split_whitespace().count() != 1 {
            return Err(CoreError::invalid("restricted-rank labels must be one token"));
        }
        label_ids.push(vocab.id(label.trim())?);
    }
    let logits = token_logits(visual, seq, MaskKind::Bidirectional, mask_at[0], params)?;
    let scores: Vec<f64> = label_ids.iter().map(|&id| logits[id as usize].to_f64()).collect();
    let mut best = 0usize;
    for i in 1..scores.len() {
        let wins = scores[i] > scores[best]
            || (scores[i] == scores[best] && label_ids[i] < label_ids[best]);
        if wins {
            best = i;
        }
    }
    Ok((best, scores))
}

/// One fine-tuning forward pass: masked-answer cross-entropy summed over
/// the batch. `kind` should be causal for prompts that will be decoded
/// generatively and bidirectional for restricted ranking.
pub fn finetune_step<F: Float>(
    g: &mut Graph<F>,
    batch: &[(Tensor<F>, RenderedPrompt)],
    kind: MaskKind,
    params: &Params<F>,
    bound: &Bound,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(CoreError::invalid("empty fine-tuning batch"));
    }
    let mut total: Option<Var> = None;
    for (image, rendered) in batch {
        let vis = crate::encoders::encode_image(g, image, params, bound)?;
        let text = encode_text(g, &rendered.seq, kind, params, bound)?;
        let mm = encode_multimodal(g, text, vis, kind, &rendered.seq.visible, params, bound)?;
        let loss = mlm_loss(g, mm, &rendered.targets, params, bound)?;
        total = Some(match total {
            None => loss,
            Some(t) => g.add(t, loss)?,
        });
    }
    Ok(total.unwrap())
}

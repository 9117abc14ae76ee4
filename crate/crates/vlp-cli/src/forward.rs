//! Forward-only evaluation helpers shared by the CLI commands, the
//! studies and the linear-classifier baseline.

use vlp_core::encoders::{encode_multimodal, encode_text, MaskKind};
use vlp_core::corpus::PairedExample;
use vlp_core::infer::{log_softmax, token_logits, visual_states};
use vlp_core::params::Params;
use vlp_core::vocab::{TokenSequence, Vocabulary, CLS, MASK, SEP};
use vlp_core::{Graph, Tensor};

use crate::error::Result;

/// Multimodal [CLS] hidden state for one image/text pair (bidirectional
/// attention), as a plain feature vector.
pub fn mm_cls_feature(
    visual: &Tensor<f32>,
    seq: &TokenSequence,
    params: &Params<f32>,
) -> Result<Vec<f64>> {
    let mut g: Graph<f32> = Graph::new();
    let bound = params.bind(&mut g);
    let text = encode_text(&mut g, seq, MaskKind::Bidirectional, params, &bound)?;
    let vis = g.constant(visual.clone());
    let mm = encode_multimodal(
        &mut g,
        text,
        vis,
        MaskKind::Bidirectional,
        &seq.visible,
        params,
        &bound,
    )?;
    Ok(g.value(mm).row(0).iter().map(|&x| x as f64).collect())
}

/// Mean per-token cross-entropy of a caption under left-to-right
/// prediction: position t is replaced by [MASK] and scored with a causal
/// mask, so it sees only positions < t. The trailing [SEP] counts too
/// (the generator must learn to stop).
pub fn causal_caption_ce(
    visual: &Tensor<f32>,
    caption: &TokenSequence,
    params: &Params<f32>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for t in 1..caption.len() {
        let truth = caption.ids[t];
        let mut ids: Vec<u32> = caption.ids[..t].to_vec();
        ids.push(MASK);
        let seq = TokenSequence::from_ids(ids);
        let logits = token_logits(visual, &seq, MaskKind::Causal, t, params)?;
        let logits: Vec<f64> = logits.iter().map(|&x| x as f64).collect();
        total -= log_softmax(&logits)[truth as usize];
        n += 1;
    }
    Ok(total / n as f64)
}

/// Mean held-out caption cross-entropy over a set of examples.
pub fn mean_caption_ce(examples: &[PairedExample], params: &Params<f32>) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        let visual = visual_states(&ex.image, params)?;
        total += causal_caption_ce(&visual, &ex.caption_tokens, params)?;
    }
    Ok(total / examples.len() as f64)
}

/// Fraction of content tokens the model recovers when they are masked one
/// at a time (bidirectional attention, full remaining context visible).
pub fn masked_token_accuracy(examples: &[PairedExample], params: &Params<f32>) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for ex in examples {
        let visual = visual_states(&ex.image, params)?;
        for (pos, &id) in ex.caption_tokens.ids.iter().enumerate() {
            if Vocabulary::is_special(id) {
                continue;
            }
            let mut seq = ex.caption_tokens.clone();
            seq.ids[pos] = MASK;
            seq.mask_positions = vec![pos];
            let logits = token_logits(&visual, &seq, MaskKind::Bidirectional, pos, params)?;
            let argmax = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i as u32)
                .unwrap();
            if argmax == id {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Content token ids of a caption (for BLEU), specials dropped.
pub fn content_tokens(seq: &TokenSequence) -> Vec<u32> {
    seq.ids
        .iter()
        .copied()
        .filter(|&id| !Vocabulary::is_special(id))
        .collect()
}

/// A decode prefix holding just [CLS].
pub fn cls_prefix() -> TokenSequence {
    TokenSequence::from_ids(vec![CLS])
}

/// True when the decoded ids reproduce the reference caption's content
/// tokens exactly (and stop with [SEP]).
pub fn decodes_verbatim(decoded: &[u32], reference: &TokenSequence) -> bool {
    let body = content_tokens(&TokenSequence::from_ids(decoded.to_vec()));
    body == content_tokens(reference) && decoded.last() == Some(&SEP)
}

//! Forward-only helpers shared by decoding, retrieval, and ranking.
//! Each call builds a throwaway graph and never runs backward.

use alloc::vec::Vec;

use crate::encoders::{encode_image, encode_multimodal, encode_text, MaskKind};
use crate::error::{CoreError, Result};
use crate::float::Float;
use crate::graph::Graph;
use crate::objectives::{itm_logits, mlm_logits};
use crate::params::Params;
use crate::tensor::Tensor;
use crate::vocab::TokenSequence;

/// Visual encoder output for one image, as a plain tensor so it can be
/// reused across many text forwards without re-encoding.
pub fn visual_states<F: Float>(image: &Tensor<F>, params: &Params<F>) -> Result<Tensor<F>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let states = encode_image(&mut g, image, params, &bound)?;
    Ok(g.value(states).clone())
}

fn normalized<F: Float>(row: &[F]) -> Vec<F> {
    let mut norm = F::ZERO;
    for &x in row {
        norm += x * x;
    }
    let norm = norm.sqrt();
    row.iter().map(|&x| x / norm).collect()
}

/// L2-normalized contrastive embedding of an image.
pub fn image_embedding<F: Float>(image: &Tensor<F>, params: &Params<F>) -> Result<Vec<F>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let states = encode_image(&mut g, image, params, &bound)?;
    let cls = g.gather_rows(states, &[0])?;
    let proj = g.matmul(cls, bound.var(params.arch.itc_img))?;
    Ok(normalized(&g.value(proj).data))
}

/// L2-normalized contrastive embedding of a caption (bidirectional text
/// encoding, no multimodal stack).
pub fn text_embedding<F: Float>(seq: &TokenSequence, params: &Params<F>) -> Result<Vec<F>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let states = encode_text(&mut g, seq, MaskKind::Bidirectional, params, &bound)?;
    let cls = g.gather_rows(states, &[0])?;
    let proj = g.matmul(cls, bound.var(params.arch.itc_txt))?;
    Ok(normalized(&g.value(proj).data))
}

/// Vocabulary logits at one text position after the multimodal stack.
pub fn token_logits<F: Float>(
    visual: &Tensor<F>,
    seq: &TokenSequence,
    kind: MaskKind,
    position: usize,
    params: &Params<F>,
) -> Result<Vec<F>> {
    if position >= seq.len() {
        return Err(CoreError::IndexOutOfRange {
            what: "logit position",
            index: position,
            bound: seq.len(),
        });
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let text = encode_text(&mut g, seq, kind, params, &bound)?;
    let vis = g.constant(visual.clone());
    let mm = encode_multimodal(&mut g, text, vis, kind, &seq.visible, params, &bound)?;
    let logits = mlm_logits(&mut g, mm, &[position], params, &bound)?;
    Ok(g.value(logits).data.clone())
}

/// Match score for an image-text pair: the matched-class logit minus the
/// mismatched-class logit from the pair classifier head.
pub fn match_score<F: Float>(
    visual: &Tensor<F>,
    seq: &TokenSequence,
    params: &Params<F>,
) -> Result<f64> {
    let mut g = Graph::new();
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
    let cls = g.gather_rows(mm, &[0])?;
    let logits = itm_logits(&mut g, cls, params, &bound)?;
    let row = &g.value(logits).data;
    Ok(row[1].to_f64() - row[0].to_f64())
}

/// Log-softmax of a logit row, in f64.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for &x in logits {
        z += libm::exp(x - max);
    }
    let lz = libm::log(z) + max;
    logits.iter().map(|&x| x - lz).collect()
}

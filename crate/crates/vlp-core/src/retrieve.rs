//! Two-stage cross-modal retrieval: contrastive embeddings shortlist the
//! gallery, then the pair classifier reranks the shortlist.

use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::float::Float;
use crate::infer::{image_embedding, match_score, text_embedding, visual_states};
use crate::params::Params;
use crate::tensor::Tensor;
use crate::vocab::TokenSequence;

#[derive(Clone, Copy, Debug)]
pub struct RetrievalConfig {
    /// Shortlist size handed to the reranker.
    pub top_k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { top_k: 16 }
    }
}

/// Ranking for one query. `ranking` lists gallery indices best-first:
/// the reranked shortlist, then the remainder in stage-1 order.
#[derive(Clone, Debug)]
pub struct RankedList {
    pub query: usize,
    pub ranking: Vec<usize>,
    /// Stage-1 cosine similarity per gallery item.
    pub stage1: Vec<f64>,
    /// Reranker scores for the shortlist, parallel to its prefix of `ranking`.
    pub stage2: Vec<f64>,
    /// True when top_k exceeded the gallery and was clamped.
    pub clamped: bool,
}

fn dot<F: Float>(a: &[F], b: &[F]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x.to_f64() * y.to_f64();
    }
    s
}

/// Sort indices by score descending, ties broken by ascending index.
fn order_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Rank every caption in the gallery for each query image.
pub fn retrieve_texts<F: Float>(
    images: &[Tensor<F>],
    captions: &[TokenSequence],
    params: &Params<F>,
    config: &RetrievalConfig,
) -> Result<Vec<RankedList>> {
    if images.is_empty() || captions.is_empty() {
        return Err(CoreError::invalid("empty retrieval pool"));
    }
    let text_emb: Vec<Vec<F>> = captions
        .iter()
        .map(|c| text_embedding(c, params))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(images.len());
    for (qi, image) in images.iter().enumerate() {
        let q = image_embedding(image, params)?;
        let stage1: Vec<f64> = text_emb.iter().map(|t| dot(&q, t)).collect();
        let visual = visual_states(image, params)?;
        let rerank = |idx: usize| match_score(&visual, &captions[idx], params);
        out.push(rank_one(qi, stage1, config, rerank)?);
    }
    Ok(out)
}

/// Rank every image in the gallery for each query caption.
pub fn retrieve_images<F: Float>(
    captions: &[TokenSequence],
    images: &[Tensor<F>],
    params: &Params<F>,
    config: &RetrievalConfig,
) -> Result<Vec<RankedList>> {
    if images.is_empty() || captions.is_empty() {
        return Err(CoreError::invalid("empty retrieval pool"));
    }
    let image_emb: Vec<Vec<F>> = images
        .iter()
        .map(|i| image_embedding(i, params))
        .collect::<Result<_>>()?;
    let visuals: Vec<Tensor<F>> = images
        .iter()
        .map(|i| visual_states(i, params))
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(captions.len());
    for (qi, caption) in captions.iter().enumerate() {
        let q = text_embedding(caption, params)?;
        let stage1: Vec<f64> = image_emb.iter().map(|e| dot(&q, e)).collect();
        let rerank = |idx: usize| match_score(&visuals[idx], caption, params);
        out.push(rank_one(qi, stage1, config, rerank)?);
    }
    Ok(out)
}

fn rank_one<E>(
    query: usize,
    stage1: Vec<f64>,
    config: &RetrievalConfig,
    mut rerank: E,
) -> Result<RankedList>
where
    E: FnMut(usize) -> Result<f64>,
{
    if config.top_k == 0 {
        return Err(CoreError::invalid("top_k must be at least 1"));
    }
    let clamped = config.top_k > stage1.len();
    let k = config.top_k.min(stage1.len());
    let by_stage1 = order_desc(&stage1);
    let shortlist = &by_stage1[..k];
    let stage2_scores: Vec<f64> = shortlist
        .iter()
        .map(|&idx| rerank(idx))
        .collect::<Result<_>>()?;
    // rerank order: pair score desc, then stage-1 desc, then index asc
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        stage2_scores[b]
            .partial_cmp(&stage2_scores[a])
            .unwrap_or(core::cmp::Ordering::Equal)
            .then(
                stage1[shortlist[b]]
                    .partial_cmp(&stage1[shortlist[a]])
                    .unwrap_or(core::cmp::Ordering::Equal),
            )
            .then(shortlist[a].cmp(&shortlist[b]))
    });
    let mut ranking: Vec<usize> = order.iter().map(|&o| shortlist[o]).collect();
    ranking.extend_from_slice(&by_stage1[k..]);
    Ok(RankedList {
        query,
        ranking,
        stage1,
        stage2: order.iter().map(|&o| stage2_scores[o]).collect(),
        clamped,
    })
}

/// Fraction of queries with any of their ground-truth indices in the top k.
pub fn recall_at_k(rankings: &[RankedList], truth: &[Vec<usize>], k: usize) -> Result<f64> {
    if rankings.len() != truth.len() {
        return Err(CoreError::invalid("rankings/truth length mismatch"));
    }
    if rankings.is_empty() || k == 0 {
        return Err(CoreError::invalid("recall needs queries and k >= 1"));
    }
    let mut hits = 0usize;
    for (r, t) in rankings.iter().zip(truth) {
        if r.ranking.iter().take(k).any(|idx| t.contains(idx)) {
            hits += 1;
        }
    }
    Ok(hits as f64 / rankings.len() as f64)
}

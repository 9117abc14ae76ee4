//! Beam-search caption decoding via iterative mask filling.
//!
//! Decoding appends a [MASK] token to the running sequence, runs the text
//! and multimodal encoders under a causal mask, reads the vocabulary
//! distribution at the mask position, and extends each beam with its top
//! candidates. A beam finishes when it emits [SEP] or hits the length cap.

use alloc::vec::Vec;

use crate::encoders::MaskKind;
use crate::error::{CoreError, Result};
use crate::float::Float;
use crate::infer::{log_softmax, token_logits, visual_states};
use crate::params::Params;
use crate::tensor::Tensor;
use crate::vocab::{TokenSequence, CLS, MASK, PAD, SEP};

#[derive(Clone, Copy, Debug)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Cap on generated tokens (prefix excluded).
    pub max_len: usize,
    /// Rank finished beams by mean token log-prob instead of the sum.
    pub length_normalize: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 5,
            max_len: 20,
            length_normalize: false,
        }
    }
}

#[derive(Clone, Debug)]
struct Beam {
    generated: Vec<u32>,
    log_prob: f64,
}

impl Beam {
    fn score(&self, normalize: bool) -> f64 {
        if normalize && !self.generated.is_empty() {
            self.log_prob / self.generated.len() as f64
        } else {
            self.log_prob
        }
    }
}

/// Decoded token ids (prefix included, trailing [SEP] kept when emitted)
/// plus the winning beam's score.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub ids: Vec<u32>,
    pub score: f64,
}

/// Candidate ordering: higher log-prob first, ties broken toward the lower
/// token id so equal-probability decodes are deterministic.
fn better(a: (f64, u32), b: (f64, u32)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

pub fn decode<F: Float>(
    image: &Tensor<F>,
    prefix: &TokenSequence,
    params: &Params<F>,
    config: &DecodeConfig,
) -> Result<Decoded> {
    if config.beam_size == 0 {
        return Err(CoreError::invalid("beam size must be at least 1"));
    }
    if config.max_len == 0 {
        return Err(CoreError::invalid("max_len must be at least 1"));
    }
    if prefix.is_empty() || prefix.ids[0] != CLS {
        return Err(CoreError::invalid("decode prefix must start with [CLS]"));
    }
    if prefix.len() + config.max_len > params.config.max_len + 1 {
        return Err(CoreError::invalid(
            "prefix plus max_len exceeds the position table",
        ));
    }
    let visual = visual_states(image, params)?;
    let mut alive = Vec::new();
    alive.push(Beam {
        generated: Vec::new(),
        log_prob: 0.0,
    });
    let mut finished: Vec<Beam> = Vec::new();

    for _step in 0..config.max_len {
        let mut candidates: Vec<Beam> = Vec::new();
        for beam in &alive {
            let mut ids = prefix.ids.clone();
            ids.extend_from_slice(&beam.generated);
            ids.push(MASK);
            let pos = ids.len() - 1;
            let seq = TokenSequence::from_ids(ids);
            let logits = token_logits(&visual, &seq, MaskKind::Causal, pos, params)?;
            let logits: Vec<f64> = logits.iter().map(|x| x.to_f64()).collect();
            let log_probs = log_softmax(&logits);
            // top beam_size continuations of this beam
            let mut top: Vec<(f64, u32)> = Vec::new();
            for (id, &lp) in log_probs.iter().enumerate() {
                let id = id as u32;
                if id == PAD || id == CLS || id == MASK {
                    continue;
                }
                top.push((lp, id));
            }
            top.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(core::cmp::Ordering::Equal)
                    .then(a.1.cmp(&b.1))
            });
            for &(lp, id) in top.iter().take(config.beam_size) {
                let mut generated = beam.generated.clone();
                generated.push(id);
                candidates.push(Beam {
                    generated,
                    log_prob: beam.log_prob + lp,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.log_prob
                .partial_cmp(&a.log_prob)
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(a.generated.cmp(&b.generated))
        });
        alive.clear();
        for beam in candidates {
            if alive.len() >= config.beam_size {
                break;
            }
            if *beam.generated.last().unwrap() == SEP {
                finished.push(beam);
            } else {
                alive.push(beam);
            }
        }
        // Log-probs only accumulate downward, so once the best finished
        // beam outscores every alive prefix the search cannot improve.
        if let Some(best_fin) = finished
            .iter()
            .map(|b| b.log_prob)
            .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.max(x))))
        {
            let best_alive = alive
                .iter()
                .map(|b| b.log_prob)
                .fold(f64::NEG_INFINITY, f64::max);
            if !config.length_normalize && best_fin >= best_alive {
                break;
            }
        }
        if alive.is_empty() {
            break;
        }
    }
    // beams still alive at the cap finish as-is
    finished.extend(alive);
    let mut best: Option<&Beam> = None;
    for beam in &finished {
        let contender = (beam.score(config.length_normalize), beam.generated[0]);
        match best {
            Some(b) if !better(contender, (b.score(config.length_normalize), b.generated[0])) => {}
            _ => best = Some(beam),
        }
    }
    let best = best.ok_or_else(|| CoreError::invalid("no finished beam"))?;
    let mut ids = prefix.ids.clone();
    ids.extend_from_slice(&best.generated);
    Ok(Decoded {
        ids,
        score: best.score(config.length_normalize),
    })
}

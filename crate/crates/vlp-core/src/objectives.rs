//! The three pretraining losses and the per-step mask-mixing objective.

use alloc::vec::Vec;

use crate::corpus::{make_itm_batch, make_mlm_batch, PairedExample};
use crate::encoders::{encode_image, encode_multimodal, encode_text, MaskKind};
use crate::error::{CoreError, Result};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::params::{Bound, Params};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vocab::TokenSequence;

/// Default contrastive temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.07;

/// Per-sample draw rule for mixing causal and bidirectional masks.
/// `p_causal` is the expected fraction of MLM samples encoded causally.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskMixPolicy {
    pub p_causal: f64,
}

impl MaskMixPolicy {
    pub fn new(p_causal: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p_causal) {
            return Err(CoreError::invalid("p_causal must lie in [0, 1]"));
        }
        Ok(MaskMixPolicy { p_causal })
    }

    pub fn draw(&self, rng: &mut Rng) -> MaskKind {
        if rng.bernoulli(self.p_causal) {
            MaskKind::Causal
        } else {
            MaskKind::Bidirectional
        }
    }
}

/// Symmetric image-text contrastive loss over a batch of first hidden
/// states. Projects to the shared low-dimensional space, L2-normalizes,
/// and averages image-to-text and text-to-image softmax losses over the
/// matched diagonal.
pub fn itc_loss<F: Float>(
    g: &mut Graph<F>,
    image_cls: Var,
    text_cls: Var,
    params: &Params<F>,
    bound: &Bound,
    temperature: f64,
) -> Result<Var> {
    let (b, _) = g.value(image_cls).dims2()?;
    if b == 0 {
        return Err(CoreError::invalid("itc_loss: empty batch"));
    }
    if g.value(image_cls).shape != g.value(text_cls).shape {
        return Err(CoreError::ShapeMismatch {
            op: "itc_loss",
            lhs: g.value(image_cls).shape.clone(),
            rhs: g.value(text_cls).shape.clone(),
        });
    }
    let xp = g.matmul(image_cls, bound.var(params.arch.itc_img))?;
    let x = g.normalize_rows(xp)?;
    let yp = g.matmul(text_cls, bound.var(params.arch.itc_txt))?;
    let y = g.normalize_rows(yp)?;
    let yt = g.transpose(y)?;
    let sim = g.matmul(x, yt)?;
    let sim = g.scale(sim, F::from_f64(1.0 / temperature));
    let diag: Vec<usize> = (0..b).collect();
    let i2t = g.cross_entropy_rows(sim, &diag, false)?;
    let sim_t = g.transpose(sim)?;
    let t2i = g.cross_entropy_rows(sim_t, &diag, false)?;
    g.add(i2t, t2i)
}

/// Vocabulary logits of the MLM head at selected positions.
pub fn mlm_logits<F: Float>(
    g: &mut Graph<F>,
    states: Var,
    positions: &[usize],
    params: &Params<F>,
    bound: &Bound,
) -> Result<Var> {
    let picked = g.gather_rows(states, positions)?;
    let logits = g.matmul(picked, bound.var(params.arch.mlm.w))?;
    g.add_row(logits, bound.var(params.arch.mlm.b))
}

/// Sum of cross-entropies at the masked positions; zero when nothing is
/// masked.
pub fn mlm_loss<F: Float>(
    g: &mut Graph<F>,
    multimodal_states: Var,
    targets: &[(usize, u32)],
    params: &Params<F>,
    bound: &Bound,
) -> Result<Var> {
    if targets.is_empty() {
        return Ok(g.constant(Tensor::scalar(F::ZERO)));
    }
    let positions: Vec<usize> = targets.iter().map(|&(p, _)| p).collect();
    let ids: Vec<usize> = targets.iter().map(|&(_, id)| id as usize).collect();
    let logits = mlm_logits(g, multimodal_states, &positions, params, bound)?;
    g.cross_entropy_rows(logits, &ids, true)
}

/// Two-class logits of the matching head. Class 1 = matched.
pub fn itm_logits<F: Float>(
    g: &mut Graph<F>,
    mm_cls: Var,
    params: &Params<F>,
    bound: &Bound,
) -> Result<Var> {
    let logits = g.matmul(mm_cls, bound.var(params.arch.itm.w))?;
    g.add_row(logits, bound.var(params.arch.itm.b))
}

/// Sum of two-class cross-entropies over the batch of multimodal [CLS]
/// states.
pub fn itm_loss<F: Float>(
    g: &mut Graph<F>,
    mm_cls: Var,
    matched: &[bool],
    params: &Params<F>,
    bound: &Bound,
) -> Result<Var> {
    let logits = itm_logits(g, mm_cls, params, bound)?;
    let targets: Vec<usize> = matched.iter().map(|&m| usize::from(m)).collect();
    g.cross_entropy_rows(logits, &targets, true)
}

/// Loss breakdown of one pretraining step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub total: f64,
    pub itc: f64,
    pub mlm: f64,
    pub itm: f64,
    /// Fraction of MLM samples that drew the causal mask this step.
    pub causal_frac: f64,
}

/// Forward pass of one pretraining step over a batch. Per sample the MLM
/// path draws Causal with probability `p_causal`; the ITC and ITM paths
/// always encode bidirectionally (their [CLS]-position summaries are
/// degenerate under a causal mask). Unit loss weights.
///
/// Returns the scalar total-loss node; run `graph.backward` on it to
/// populate gradients.
pub fn pretrain_step<F: Float>(
    g: &mut Graph<F>,
    batch: &[PairedExample],
    params: &Params<F>,
    bound: &Bound,
    policy: MaskMixPolicy,
    mask_prob: f64,
    temperature: f64,
    rng: &mut Rng,
) -> Result<(Var, StepMetrics)> {
    let b = batch.len();
    if b < 2 {
        return Err(CoreError::invalid("pretrain batch must hold >= 2 examples"));
    }

    let visual: Vec<Var> = batch
        .iter()
        .map(|ex| encode_image(g, &ex.image.cast::<F>(), params, bound))
        .collect::<Result<_>>()?;
    let text_bidir: Vec<(Var, TokenSequence)> = batch
        .iter()
        .map(|ex| {
            let seq = ex.caption_tokens.clone();
            let states = encode_text(g, &seq, MaskKind::Bidirectional, params, bound)?;
            Ok((states, seq))
        })
        .collect::<Result<_>>()?;

    // ITC over the first hidden states of both unimodal encoders.
    let img_cls: Vec<Var> = visual
        .iter()
        .map(|&v| g.gather_rows(v, &[0]))
        .collect::<Result<_>>()?;
    let txt_cls: Vec<Var> = text_bidir
        .iter()
        .map(|(v, _)| g.gather_rows(*v, &[0]))
        .collect::<Result<_>>()?;
    let img_cls = g.concat_rows(&img_cls)?;
    let txt_cls = g.concat_rows(&txt_cls)?;
    let l_itc = itc_loss(g, img_cls, txt_cls, params, bound, temperature)?;

    // MLM with per-sample mask mixing.
    let captions: Vec<TokenSequence> = batch.iter().map(|ex| ex.caption_tokens.clone()).collect();
    let mlm_batch = make_mlm_batch(&captions, mask_prob, rng)?;
    let mut causal_draws = 0usize;
    let mut l_mlm = g.constant(Tensor::scalar(F::ZERO));
    for (i, sample) in mlm_batch.iter().enumerate() {
        let kind = policy.draw(rng);
        if kind == MaskKind::Causal {
            causal_draws += 1;
        }
        if sample.targets.is_empty() {
            continue;
        }
        let text_states = encode_text(g, &sample.seq, kind, params, bound)?;
        let mm = encode_multimodal(
            g,
            text_states,
            visual[i],
            kind,
            &sample.seq.visible,
            params,
            bound,
        )?;
        let loss = mlm_loss(g, mm, &sample.targets, params, bound)?;
        l_mlm = g.add(l_mlm, loss)?;
    }

    // ITM on 1:1 positives and negatives, always bidirectional.
    let itm_pairs = make_itm_batch(b, rng)?;
    let mut cls_rows = Vec::with_capacity(itm_pairs.len());
    let mut labels = Vec::with_capacity(itm_pairs.len());
    for pair in &itm_pairs {
        let (text_states, seq) = &text_bidir[pair.text_idx];
        let mm = encode_multimodal(
            g,
            *text_states,
            visual[pair.image_idx],
            MaskKind::Bidirectional,
            &seq.visible,
            params,
            bound,
        )?;
        cls_rows.push(g.gather_rows(mm, &[0])?);
        labels.push(pair.matched);
    }
    let mm_cls = g.concat_rows(&cls_rows)?;
    let l_itm = itm_loss(g, mm_cls, &labels, params, bound)?;

    let partial = g.add(l_itc, l_mlm)?;
    let total = g.add(partial, l_itm)?;

    let metrics = StepMetrics {
        total: g.value(total).item().to_f64(),
        itc: g.value(l_itc).item().to_f64(),
        mlm: g.value(l_mlm).item().to_f64(),
        itm: g.value(l_itm).item().to_f64(),
        causal_frac: causal_draws as f64 / b as f64,
    };
    Ok((total, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{self, TaskMix};
    use crate::testutil::random_matrix;
    use alloc::vec;
    use alloc::vec::Vec;

    fn head_config() -> crate::config::EncoderConfig {
        crate::config::EncoderConfig {
            hidden: 4,
            n_heads: 2,
            layers_visual: 1,
            layers_text: 1,
            layers_mm: 1,
            max_len: 8,
            vocab: 41,
            mlp_ratio: 2,
            contrastive_dim: 4,
            ..crate::config::EncoderConfig::default()
        }
    }

    /// Params with identity contrastive projections so tests control the
    /// post-projection geometry directly.
    fn identity_itc_params() -> Params<f64> {
        let mut params = Params::init(&head_config(), 23).unwrap();
        for &idx in &[params.arch.itc_img, params.arch.itc_txt] {
            let t = &mut params.tensors[idx];
            for r in 0..4 {
                for c in 0..4 {
                    t.data[r * 4 + c] = if r == c { 1.0 } else { 0.0 };
                }
            }
        }
        params
    }

    fn eval_itc(params: &Params<f64>, img: Tensor<f64>, txt: Tensor<f64>, temp: f64) -> f64 {
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let i = g.leaf(img);
        let t = g.leaf(txt);
        let loss = itc_loss(&mut g, i, t, params, &bound, temp).unwrap();
        g.value(loss).item()
    }

    #[test]
    fn itc_single_pair_is_zero() {
        let params = identity_itc_params();
        let v = Tensor::matrix(1, 4, vec![0.3, -0.2, 0.9, 0.1]).unwrap();
        let loss = eval_itc(&params, v.clone(), v, 0.07);
        assert!(loss.abs() < 1e-12, "B=1 softmax has one candidate, got {loss}");
    }

    #[test]
    fn itc_orthogonal_pairs_match_direct_formula() {
        let params = identity_itc_params();
        let img = Tensor::matrix(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let txt = img.clone();
        let loss = eval_itc(&params, img, txt, 1.0);
        // S = I: each direction's per-row loss is ln(1 + e^{-1})
        let expected = 2.0 * (1.0 + (-1.0_f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12, "got {loss}, want {expected}");
    }

    #[test]
    fn itc_batch_permutation_invariant() {
        let params = identity_itc_params();
        let mut rng = Rng::new(31);
        let img = random_matrix(&mut rng, 3, 4);
        let txt = random_matrix(&mut rng, 3, 4);
        let perm = [2usize, 0, 1];
        let permute = |t: &Tensor<f64>| {
            let mut data = Vec::new();
            for &p in &perm {
                data.extend_from_slice(t.row(p));
            }
            Tensor::matrix(3, 4, data).unwrap()
        };
        let a = eval_itc(&params, img.clone(), txt.clone(), 0.07);
        let b = eval_itc(&params, permute(&img), permute(&txt), 0.07);
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn itc_rewards_matched_alignment() {
        // text rows drift from a smeared mixture toward their matched
        // image basis vector; the loss must strictly decrease
        let params = identity_itc_params();
        let img = Tensor::matrix(
            3,
            4,
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        )
        .unwrap();
        let text_at = |a: f64| {
            let off = (1.0 - a) / 2.0;
            let mut data = vec![off; 12];
            for i in 0..3 {
                data[i * 4 + i] = a;
            }
            Tensor::matrix(3, 4, data).unwrap()
        };
        let worse = eval_itc(&params, img.clone(), text_at(0.5), 0.07);
        let better = eval_itc(&params, img, text_at(0.9), 0.07);
        assert!(better < worse, "better {better} !< worse {worse}");
    }

    #[test]
    fn itc_empty_batch_errors() {
        let params = identity_itc_params();
        let mut g: Graph<f64> = Graph::new();
        let bound = params.bind(&mut g);
        let e = g.leaf(Tensor::matrix(0, 4, vec![]).unwrap());
        assert!(itc_loss(&mut g, e, e, &params, &bound, 0.07).is_err());
    }

    #[test]
    fn mlm_no_targets_is_zero_and_uniform_is_ln_v() {
        let mut params = Params::init(&head_config(), 33).unwrap();
        // zero head -> uniform vocabulary distribution
        for &idx in &[params.arch.mlm.w, params.arch.mlm.b] {
            params.tensors[idx].data.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut rng = Rng::new(34);
        let states = random_matrix(&mut rng, 5, 4);
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let s = g.leaf(states);
        let zero = mlm_loss(&mut g, s, &[], &params, &bound).unwrap();
        assert_eq!(g.value(zero).item(), 0.0);
        let one = mlm_loss(&mut g, s, &[(2, 7)], &params, &bound).unwrap();
        let ln_v = (head_config().vocab as f64).ln();
        assert!((g.value(one).item() - ln_v).abs() < 1e-12);
        let three = mlm_loss(&mut g, s, &[(0, 1), (2, 7), (4, 39)], &params, &bound).unwrap();
        assert!((g.value(three).item() - 3.0 * ln_v).abs() < 1e-12);
    }

    #[test]
    fn mlm_decomposes_into_per_position_terms() {
        let params = Params::init(&head_config(), 35).unwrap();
        let mut rng = Rng::new(36);
        let states = random_matrix(&mut rng, 6, 4);
        let targets = [(1usize, 5u32), (3, 17), (5, 40)];
        let eval = |ts: &[(usize, u32)]| {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let s = g.leaf(states.clone());
            let l = mlm_loss(&mut g, s, ts, &params, &bound).unwrap();
            g.value(l).item()
        };
        let joint = eval(&targets);
        let split: f64 = targets.iter().map(|&t| eval(&[t])).sum();
        assert!((joint - split).abs() < 1e-10, "sum reduction must decompose");
    }

    #[test]
    fn itm_uniform_and_separating_cases() {
        let mut params = Params::init(&head_config(), 37).unwrap();
        for &idx in &[params.arch.itm.w, params.arch.itm.b] {
            params.tensors[idx].data.iter_mut().for_each(|x| *x = 0.0);
        }
        let mut rng = Rng::new(38);
        let cls = random_matrix(&mut rng, 4, 4);
        let labels = [true, false, true, false];
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let c = g.leaf(cls);
        let l = itm_loss(&mut g, c, &labels, &params, &bound).unwrap();
        assert!((g.value(l).item() - 4.0 * 2.0_f64.ln()).abs() < 1e-12);

        // separating head: logit margin 40 on the first feature
        params.tensors[params.arch.itm.w].data[0] = -20.0; // class 0 column
        params.tensors[params.arch.itm.w].data[1] = 20.0; // class 1 column
        let cls = Tensor::matrix(
            2,
            4,
            vec![1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let c = g.leaf(cls);
        let l = itm_loss(&mut g, c, &[true, false], &params, &bound).unwrap();
        assert!(g.value(l).item() < 1e-10);
    }

    #[test]
    fn itm_decomposes_per_sample() {
        let params = Params::init(&head_config(), 39).unwrap();
        let mut rng = Rng::new(40);
        let cls = random_matrix(&mut rng, 4, 4);
        let labels = [true, false, false, true];
        let eval = |rows: &[usize], ls: &[bool]| {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let mut data = Vec::new();
            for &r in rows {
                data.extend_from_slice(cls.row(r));
            }
            let c = g.leaf(Tensor::matrix(rows.len(), 4, data).unwrap());
            let l = itm_loss(&mut g, c, ls, &params, &bound).unwrap();
            g.value(l).item()
        };
        let joint = eval(&[0, 1, 2, 3], &labels);
        let split: f64 = (0..4).map(|i| eval(&[i], &labels[i..=i])).sum();
        assert!((joint - split).abs() < 1e-10);
    }

    #[test]
    fn mask_policy_extremes_and_concentration() {
        assert!(MaskMixPolicy::new(-0.1).is_err());
        assert!(MaskMixPolicy::new(1.1).is_err());
        let mut rng = Rng::new(41);
        let zero = MaskMixPolicy::new(0.0).unwrap();
        let one = MaskMixPolicy::new(1.0).unwrap();
        for _ in 0..200 {
            assert_eq!(zero.draw(&mut rng), MaskKind::Bidirectional);
            assert_eq!(one.draw(&mut rng), MaskKind::Causal);
        }
        let half = MaskMixPolicy::new(0.5).unwrap();
        let causal = (0..10_000)
            .filter(|_| half.draw(&mut rng) == MaskKind::Causal)
            .count();
        let frac = causal as f64 / 10_000.0;
        assert!((frac - 0.5).abs() < 0.02, "frac {frac}");
    }

    fn pretrain_config() -> crate::config::EncoderConfig {
        crate::config::EncoderConfig {
            hidden: 8,
            n_heads: 2,
            layers_visual: 1,
            layers_text: 1,
            layers_mm: 1,
            mlp_ratio: 2,
            contrastive_dim: 4,
            vocab: corpus::build_vocab().len(),
            ..crate::config::EncoderConfig::default()
        }
    }

    fn pretrain_batch(n: usize) -> Vec<PairedExample> {
        let vocab = corpus::build_vocab();
        (0..n)
            .map(|i| corpus::generate_example(77, i as u64, TaskMix::default(), &vocab))
            .collect()
    }

    #[test]
    fn pretrain_step_metrics_decompose_and_repeat() {
        let params: Params<f64> = Params::init(&pretrain_config(), 51).unwrap();
        let batch = pretrain_batch(3);
        let run = || {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let mut rng = Rng::new(99);
            let (total, metrics) = pretrain_step(
                &mut g,
                &batch,
                &params,
                &bound,
                MaskMixPolicy::new(0.5).unwrap(),
                0.15,
                0.07,
                &mut rng,
            )
            .unwrap();
            (g.value(total).item(), metrics)
        };
        let (t1, m1) = run();
        let (t2, m2) = run();
        assert_eq!(t1, t2, "same seed, same loss");
        assert_eq!(m1, m2);
        assert!(t1.is_finite());
        assert!((m1.total - (m1.itc + m1.mlm + m1.itm)).abs() < 1e-9);
        assert!(m1.itc > 0.0 && m1.itm > 0.0);
    }

    #[test]
    fn pretrain_step_mask_audit_extremes() {
        let params: Params<f64> = Params::init(&pretrain_config(), 52).unwrap();
        let batch = pretrain_batch(4);
        for (p, want) in [(0.0, 0.0), (1.0, 1.0)] {
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let mut rng = Rng::new(7);
            let (_, metrics) = pretrain_step(
                &mut g,
                &batch,
                &params,
                &bound,
                MaskMixPolicy::new(p).unwrap(),
                0.15,
                0.07,
                &mut rng,
            )
            .unwrap();
            assert_eq!(metrics.causal_frac, want);
        }
        let mut g: Graph<f64> = Graph::new();
        let bound = params.bind(&mut g);
        let mut rng = Rng::new(7);
        assert!(pretrain_step(
            &mut g,
            &batch[..1],
            &params,
            &bound,
            MaskMixPolicy::new(0.5).unwrap(),
            0.15,
            0.07,
            &mut rng,
        )
        .is_err());
    }

    #[test]
    fn pretrain_total_passes_finite_difference_spotcheck() {
        let mut params: Params<f64> = Params::init(&pretrain_config(), 53).unwrap();
        let batch = pretrain_batch(2);
        let eval = |p: &Params<f64>| {
            let mut g = Graph::new();
            let bound = p.bind(&mut g);
            let mut rng = Rng::new(5);
            let (total, _) = pretrain_step(
                &mut g,
                &batch,
                p,
                &bound,
                MaskMixPolicy::new(0.5).unwrap(),
                0.15,
                0.07,
                &mut rng,
            )
            .unwrap();
            g.value(total).item()
        };
        // analytic gradients
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let mut rng = Rng::new(5);
        let (total, _) = pretrain_step(
            &mut g,
            &batch,
            &params,
            &bound,
            MaskMixPolicy::new(0.5).unwrap(),
            0.15,
            0.07,
            &mut rng,
        )
        .unwrap();
        g.backward(total).unwrap();
        let grads = bound.grads(&g, &params);

        // 10 pseudo-random parameter coordinates
        let mut pick = Rng::new(54);
        for _ in 0..10 {
            let ti = pick.below(params.tensors.len());
            let ei = pick.below(params.tensors[ti].data.len());
            // the temperature-scaled contrastive softmax is sharply curved,
            // so the step must be small to keep truncation error below tol
            let h = 1e-6;
            let orig = params.tensors[ti].data[ei];
            params.tensors[ti].data[ei] = orig + h;
            let up = eval(&params);
            params.tensors[ti].data[ei] = orig - h;
            let down = eval(&params);
            params.tensors[ti].data[ei] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads[ti].data[ei];
            let denom = 1.0_f64.max(numeric.abs()).max(analytic.abs());
            let rel = (analytic - numeric).abs() / denom;
            assert!(
                rel < 1e-3,
                "{} [{ei}]: analytic {analytic}, numeric {numeric}",
                params.names[ti]
            );
        }
    }
}

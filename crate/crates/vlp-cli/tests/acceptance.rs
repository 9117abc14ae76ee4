//! Acceptance gate: one test per criterion, each printing a pass/fail
//! line. Run with `cargo test --test acceptance -- --nocapture` to see
//! the lines; any failure fails the suite.

use std::time::Instant;

use vlp_cli::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use vlp_cli::configfile::RunConfig;
use vlp_cli::forward::{cls_prefix, decodes_verbatim, masked_token_accuracy, mean_caption_ce};
use vlp_cli::study::run_study;
use vlp_cli::train::{finetune_steps, freeze_from_list, pretrain_steps, TrainState};

use vlp_core::bleu::bleu4;
use vlp_core::corpus::{build_vocab, generate_corpus, TaskMix};
use vlp_core::decode::{decode, DecodeConfig};
use vlp_core::encoders::{encode_image, encode_multimodal, encode_text, MaskKind};
use vlp_core::infer::{log_softmax, token_logits, visual_states};
use vlp_core::objectives::{itc_loss, itm_loss, mlm_loss, pretrain_step, MaskMixPolicy};
use vlp_core::optim::{AdamConfig, AdamW};
use vlp_core::params::{FreezeSpec, Params};
use vlp_core::prompting::{
    render_prompt, restricted_rank, PromptTemplate, RenderMode, SlotValues,
};
use vlp_core::retrieve::{recall_at_k, retrieve_texts, RankedList, RetrievalConfig};
use vlp_core::vocab::{TokenSequence, CLS, MASK, PAD, SEP};
use vlp_core::{EncoderConfig, Graph, Rng, Tensor, Var};

fn verdict(criterion: u32, ok: bool, detail: &str) {
    println!(
        "criterion {criterion}: {} — {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {criterion} failed: {detail}");
}

/// Tiny architecture for property tests: seconds-scale forwards.
fn tiny_encoder_config(vocab: usize) -> EncoderConfig {
    EncoderConfig {
        hidden: 16,
        n_heads: 2,
        layers_visual: 1,
        layers_text: 1,
        layers_mm: 1,
        patch: 16,
        channels: 3,
        img_h: 32,
        img_w: 32,
        max_len: 16,
        vocab,
        mlp_ratio: 2,
        contrastive_dim: 8,
        ln_eps: 1e-5,
    }
}

fn tiny_run_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.hidden = 16;
    c.n_heads = 2;
    c.layers_visual = 1;
    c.layers_text = 1;
    c.layers_mm = 1;
    c.patch = 16;
    c.max_len = 16;
    c.mlp_ratio = 2;
    c.contrastive_dim = 8;
    c.batch_size = 4;
    c
}

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.normal() * 0.5).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Central finite differences against reverse-mode gradients; returns the
/// worst relative error across all input coordinates.
fn grad_check(
    inputs: &[Tensor<f64>],
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> f64 {
    let forward = |tensors: &[Tensor<f64>]| -> f64 {
        let mut g: Graph<f64> = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let mut g: Graph<f64> = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (vi, var) in vars.iter().enumerate() {
        let analytic = g.grad(*var).unwrap().clone();
        for j in 0..inputs[vi].numel() {
            let x = inputs[vi].data[j];
            let h = 1e-5 * (1.0 + x.abs());
            let mut plus = inputs.to_vec();
            plus[vi].data[j] = x + h;
            let mut minus = inputs.to_vec();
            minus[vi].data[j] = x - h;
            let numeric = (forward(&plus) - forward(&minus)) / (2.0 * h);
            let a = analytic.data[j];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    worst
}

/// Deterministic scalarization: elementwise product with a fixed random
/// matrix, then the sum.
fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> Var {
    let (r, c) = g.value(x).dims2().unwrap();
    let mut rng = Rng::new(seed);
    let w = random_matrix(&mut rng, r, c);
    let w = g.constant(w);
    let p = g.mul(x, w).unwrap();
    g.sum_all(p)
}

#[test]
fn criterion_01_gradient_correctness() {
    let start = Instant::now();
    let mut rng = Rng::new(1);
    let mut worst_op = 0.0f64;

    // Per-op checks on small random inputs.
    let a = random_matrix(&mut rng, 3, 4);
    let b = random_matrix(&mut rng, 4, 2);
    worst_op = worst_op.max(grad_check(&[a, b], &|g, v| {
        let m = g.matmul(v[0], v[1]).unwrap();
        weighted_sum(g, m, 11)
    }));

    let a = random_matrix(&mut rng, 3, 3);
    let b = random_matrix(&mut rng, 3, 3);
    worst_op = worst_op.max(grad_check(&[a, b], &|g, v| {
        let t = g.transpose(v[0]).unwrap();
        let s = g.sub(t, v[1]).unwrap();
        let m = g.mul(s, v[1]).unwrap();
        let m = g.scale(m, 1.7);
        let m = g.add(m, v[0]).unwrap();
        weighted_sum(g, m, 12)
    }));

    let a = random_matrix(&mut rng, 4, 5);
    let row = random_matrix(&mut rng, 1, 5);
    worst_op = worst_op.max(grad_check(&[a, row], &|g, v| {
        let m = g.add_row(v[0], v[1]).unwrap();
        let m = g.gelu(m);
        weighted_sum(g, m, 13)
    }));

    let logits = random_matrix(&mut rng, 3, 4);
    worst_op = worst_op.max(grad_check(&[logits], &|g, v| {
        let mask = Tensor::matrix(1, 4, vec![0.0, 0.0, vlp_core::graph::MASK_BLOCK, 0.0]).unwrap();
        let s = g.masked_softmax(v[0], &mask).unwrap();
        weighted_sum(g, s, 14)
    }));

    let x = random_matrix(&mut rng, 3, 6);
    let gain = random_matrix(&mut rng, 1, 6);
    let bias = random_matrix(&mut rng, 1, 6);
    worst_op = worst_op.max(grad_check(&[x, gain, bias], &|g, v| {
        let n = g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap();
        weighted_sum(g, n, 15)
    }));

    let x = random_matrix(&mut rng, 4, 4);
    worst_op = worst_op.max(grad_check(&[x], &|g, v| {
        let gathered = g.gather_rows(v[0], &[2, 0, 2]).unwrap();
        let cat = g.concat_rows(&[gathered, v[0]]).unwrap();
        let left = g.slice_cols(cat, 0, 2).unwrap();
        let right = g.slice_cols(cat, 2, 2).unwrap();
        let back = g.concat_cols(&[right, left]).unwrap();
        weighted_sum(g, back, 16)
    }));

    let x = random_matrix(&mut rng, 3, 5);
    worst_op = worst_op.max(grad_check(&[x], &|g, v| {
        let n = g.normalize_rows(v[0]).unwrap();
        weighted_sum(g, n, 17)
    }));

    let logits = random_matrix(&mut rng, 3, 6);
    worst_op = worst_op.max(grad_check(&[logits], &|g, v| {
        g.cross_entropy_rows(v[0], &[1, 5, 0], false).unwrap()
    }));

    // Composed model: full pretraining loss on the tiny architecture in
    // f64, finite differences at sampled coordinates. The contrastive
    // softmax at temperature 0.07 is sharply curved, so the step must be
    // small to keep truncation error below tolerance.
    let vocab = build_vocab();
    let config = tiny_encoder_config(vocab.len());
    let params: Params<f64> = Params::init(&config, 3).unwrap();
    let batch = generate_corpus(5, 2, TaskMix::default(), &vocab).unwrap();
    let forward = |p: &Params<f64>| -> f64 {
        let mut g: Graph<f64> = Graph::new();
        let bound = p.bind(&mut g);
        let mut step_rng = Rng::new(9);
        let policy = MaskMixPolicy::new(0.5).unwrap();
        let (loss, _) =
            pretrain_step(&mut g, &batch, p, &bound, policy, 0.5, 0.07, &mut step_rng).unwrap();
        g.value(loss).item()
    };
    let mut g: Graph<f64> = Graph::new();
    let bound = params.bind(&mut g);
    let mut step_rng = Rng::new(9);
    let policy = MaskMixPolicy::new(0.5).unwrap();
    let (loss, _) = pretrain_step(
        &mut g,
        &batch,
        &params,
        &bound,
        policy,
        0.5,
        0.07,
        &mut step_rng,
    )
    .unwrap();
    g.backward(loss).unwrap();
    let grads = bound.grads(&g, &params);
    let mut pick = Rng::new(771);
    let mut worst_model = 0.0f64;
    for _ in 0..8 {
        let ti = pick.below(params.tensors.len());
        let j = pick.below(params.tensors[ti].numel().max(1));
        let x = params.tensors[ti].data[j];
        let h = 1e-6;
        let mut plus = params.clone();
        plus.tensors[ti].data[j] = x + h;
        let mut minus = params.clone();
        minus.tensors[ti].data[j] = x - h;
        let numeric = (forward(&plus) - forward(&minus)) / (2.0 * h);
        let a = grads[ti].data[j];
        let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
        worst_model = worst_model.max(rel);
    }

    let elapsed = start.elapsed().as_secs_f64();
    let ok = worst_op < 1e-4 && worst_model < 1e-3 && elapsed < 60.0;
    verdict(
        1,
        ok,
        &format!(
            "per-op rel err {worst_op:.2e} (< 1e-4), composed rel err {worst_model:.2e} (< 1e-3), {elapsed:.1}s"
        ),
    );
}

#[test]
fn criterion_02_causality_suite() {
    let vocab = build_vocab();
    let config = tiny_encoder_config(vocab.len());
    let params: Params<f32> = Params::init(&config, 7).unwrap();
    let corpus = generate_corpus(11, 4, TaskMix::default(), &vocab).unwrap();
    let mut rng = Rng::new(23);
    let first_word = vlp_core::vocab::FIRST_WORD;
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let len = 5 + rng.below(8);
        let mut ids = vec![CLS];
        for _ in 0..len {
            ids.push(first_word + rng.below(vocab.len() - first_word as usize) as u32);
        }
        let i = 1 + rng.below(len - 2);
        let j = i + 1 + rng.below(len - i);
        let mut other = ids.clone();
        loop {
            let cand = first_word + rng.below(vocab.len() - first_word as usize) as u32;
            if cand != ids[j] {
                other[j] = cand;
                break;
            }
        }
        let image = &corpus[trial % corpus.len()].image;
        let states = |ids: &[u32]| -> (Vec<f32>, usize) {
            let seq = TokenSequence::from_ids(ids.to_vec());
            let mut g: Graph<f32> = Graph::new();
            let bound = params.bind(&mut g);
            let text = encode_text(&mut g, &seq, MaskKind::Causal, &params, &bound).unwrap();
            let vis = encode_image(&mut g, image, &params, &bound).unwrap();
            let mm = encode_multimodal(
                &mut g,
                text,
                vis,
                MaskKind::Causal,
                &seq.visible,
                &params,
                &bound,
            )
            .unwrap();
            let mut flat = g.value(text).data.clone();
            flat.extend_from_slice(&g.value(mm).data);
            (flat, g.value(text).shape[1])
        };
        let (base, width) = states(&ids);
        let (pert, _) = states(&other);
        // Rows <= i of both the text and the multimodal encoder outputs
        // must be unaffected by the perturbation at position j > i.
        let rows = ids.len();
        for block in 0..2 {
            for r in 0..=i {
                for c in 0..width {
                    let idx = block * rows * width + r * width + c;
                    worst = worst.max((base[idx] - pert[idx]).abs() as f64);
                }
            }
        }
    }
    verdict(
        2,
        worst <= 1e-6,
        &format!("100 perturbation tests, max leak {worst:.2e} (<= 1e-6)"),
    );
}

#[test]
fn criterion_03_loss_sanity() {
    let vocab = build_vocab();
    let mut config = tiny_encoder_config(vocab.len());
    config.hidden = 4;
    config.contrastive_dim = 4;
    let mut params: Params<f64> = Params::init(&config, 5).unwrap();

    // Identity contrastive projections isolate the loss arithmetic.
    for name in ["head.itc_img.w", "head.itc_txt.w"] {
        let idx = params.index_of(name).unwrap();
        let t = &mut params.tensors[idx];
        for r in 0..4 {
            for c in 0..4 {
                t.data[r * 4 + c] = if r == c { 1.0 } else { 0.0 };
            }
        }
    }

    // B = 1: both softmaxes are over a single candidate.
    let mut g: Graph<f64> = Graph::new();
    let bound = params.bind(&mut g);
    let img = g.leaf(Tensor::matrix(1, 4, vec![0.3, -0.7, 0.2, 0.9]).unwrap());
    let txt = g.leaf(Tensor::matrix(1, 4, vec![-0.1, 0.5, 0.4, -0.2]).unwrap());
    let l = itc_loss(&mut g, img, txt, &params, &bound, 0.07).unwrap();
    let single = g.value(l).item();

    // Orthogonal 2x2 at temperature 1: closed form 2·ln(1 + e^{-1}).
    let mut g: Graph<f64> = Graph::new();
    let bound = params.bind(&mut g);
    let img = g.leaf(Tensor::matrix(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap());
    let txt = g.leaf(Tensor::matrix(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap());
    let l = itc_loss(&mut g, img, txt, &params, &bound, 1.0).unwrap();
    let ortho = g.value(l).item();
    let ortho_expect = 2.0 * (1.0 + (-1.0f64).exp()).ln();

    // General 2x2 direct-evaluation oracle: both softmax directions
    // normalize over candidates of the same modality pair (the corrected
    // form), computed here by hand.
    let x = [[0.6, -0.2, 0.4, 0.1], [-0.3, 0.8, 0.05, -0.5]];
    let y = [[0.2, 0.9, -0.4, 0.3], [0.7, -0.6, 0.1, 0.2]];
    let sigma = 0.07;
    let norm = |v: &[f64; 4]| -> Vec<f64> {
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter().map(|a| a / n).collect()
    };
    let xs: Vec<Vec<f64>> = x.iter().map(norm).collect();
    let ys: Vec<Vec<f64>> = y.iter().map(norm).collect();
    let mut s = [[0.0f64; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            s[i][j] = xs[i].iter().zip(&ys[j]).map(|(a, b)| a * b).sum::<f64>() / sigma;
        }
    }
    let mut oracle = 0.0;
    for i in 0..2 {
        let row: Vec<f64> = s[i].to_vec();
        oracle -= log_softmax(&row)[i] / 2.0;
        let col: Vec<f64> = vec![s[0][i], s[1][i]];
        oracle -= log_softmax(&col)[i] / 2.0;
    }
    let mut g: Graph<f64> = Graph::new();
    let bound = params.bind(&mut g);
    let img = g.leaf(Tensor::matrix(2, 4, x.concat()).unwrap());
    let txt = g.leaf(Tensor::matrix(2, 4, y.concat()).unwrap());
    let l = itc_loss(&mut g, img, txt, &params, &bound, sigma).unwrap();
    let general = g.value(l).item();

    // Uniform-logit MLM / ITM: zero heads give exactly ln V and B·ln 2.
    let mut zeroed = params.clone();
    for name in ["head.mlm.w", "head.mlm.b", "head.itm.w", "head.itm.b"] {
        let idx = zeroed.index_of(name).unwrap();
        for v in &mut zeroed.tensors[idx].data {
            *v = 0.0;
        }
    }
    let mut g: Graph<f64> = Graph::new();
    let bound = zeroed.bind(&mut g);
    let states = g.leaf(Tensor::matrix(3, 4, vec![0.5; 12]).unwrap());
    let l = mlm_loss(&mut g, states, &[(1, 7), (2, 9)], &zeroed, &bound).unwrap();
    let mlm = g.value(l).item();
    let mlm_expect = 2.0 * (vocab.len() as f64).ln();
    let mut g: Graph<f64> = Graph::new();
    let bound = zeroed.bind(&mut g);
    let cls = g.leaf(Tensor::matrix(4, 4, vec![0.25; 16]).unwrap());
    let l = itm_loss(&mut g, cls, &[true, false, true, false], &zeroed, &bound).unwrap();
    let itm = g.value(l).item();
    let itm_expect = 4.0 * 2.0f64.ln();

    let ok = single == 0.0
        && (ortho - ortho_expect).abs() < 1e-12
        && (general - oracle).abs() < 1e-10
        && (mlm - mlm_expect).abs() < 1e-5
        && (itm - itm_expect).abs() < 1e-5;
    verdict(
        3,
        ok,
        &format!(
            "itc(B=1)={single}, ortho err {:.1e}, 2x2 oracle err {:.1e}, mlm err {:.1e}, itm err {:.1e}",
            (ortho - ortho_expect).abs(),
            (general - oracle).abs(),
            (mlm - mlm_expect).abs(),
            (itm - itm_expect).abs()
        ),
    );
}

#[test]
fn criterion_04_overfit_convergence() {
    let start = Instant::now();
    let vocab = build_vocab();
    let mut config = RunConfig::default();
    config.corpus_size = 32;
    config.batch_size = 32;
    config.p_causal = 0.5;
    config.lr = 1e-3;
    config.warmup_steps = 100;
    config.mask_prob = 0.5;
    config.weight_decay = 0.0;
    let corpus = generate_corpus(3, 32, TaskMix::default(), &vocab).unwrap();
    let mut state = TrainState::fresh(&config, vocab.len(), 3).unwrap();
    let first = pretrain_steps(&mut state, &corpus, &config, 1)
        .unwrap()
        .unwrap();
    let last = pretrain_steps(&mut state, &corpus, &config, 499)
        .unwrap()
        .unwrap();
    let acc = masked_token_accuracy(&corpus, &state.params).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    let ok = last.total <= 0.2 * first.total && acc >= 0.95 && elapsed < 300.0;
    verdict(
        4,
        ok,
        &format!(
            "loss {:.1} -> {:.1} ({:.1}% of initial, <= 20%), masked acc {:.3} (>= 0.95), {elapsed:.0}s (< 300s)",
            first.total,
            last.total,
            100.0 * last.total / first.total,
            acc
        ),
    );
}

#[test]
fn criterion_05_causal_mix_trend() {
    let start = Instant::now();
    let vocab = build_vocab();
    let mut config = RunConfig::default();
    config.corpus_size = 2000;
    config.batch_size = 32;
    config.lr = 1e-3;
    config.warmup_steps = 50;
    let steps = 150;
    let heldout_ce = generate_corpus(0xC0FFEE, 12, TaskMix::default(), &vocab).unwrap();
    let heldout_ret = generate_corpus(0xBEEF, 32, TaskMix::default(), &vocab).unwrap();
    let images: Vec<Tensor<f32>> = heldout_ret.iter().map(|e| e.image.clone()).collect();
    let captions: Vec<TokenSequence> =
        heldout_ret.iter().map(|e| e.caption_tokens.clone()).collect();
    let truth: Vec<Vec<usize>> = (0..heldout_ret.len()).map(|i| vec![i]).collect();

    let mut ce_wins = 0;
    let mut r1_wins = 0;
    let mut detail = String::new();
    for seed in [1u64, 2, 3] {
        let corpus = generate_corpus(seed, 2000, TaskMix::default(), &vocab).unwrap();
        let mut results = Vec::new();
        for p in [0.0f64, 1.0] {
            let mut cell = config.clone();
            cell.p_causal = p;
            let mut state = TrainState::fresh(&cell, vocab.len(), seed).unwrap();
            pretrain_steps(&mut state, &corpus, &cell, steps).unwrap();
            let ce = mean_caption_ce(&heldout_ce, &state.params).unwrap();
            let rcfg = RetrievalConfig { top_k: 8 };
            let ranked = retrieve_texts(&images, &captions, &state.params, &rcfg).unwrap();
            let r1 = recall_at_k(&ranked, &truth, 1).unwrap();
            results.push((ce, r1));
        }
        let (ce0, r10) = results[0];
        let (ce1, r11) = results[1];
        if ce1 < ce0 {
            ce_wins += 1;
        }
        if r10 >= r11 {
            r1_wins += 1;
        }
        detail.push_str(&format!(
            "seed {seed}: ce p0={ce0:.3} p1={ce1:.3}, r1 p0={r10:.2} p1={r11:.2}; "
        ));
    }
    let elapsed = start.elapsed().as_secs_f64();
    let ok = ce_wins == 3 && r1_wins >= 2 && elapsed < 1800.0;
    verdict(
        5,
        ok,
        &format!("{detail}ce wins {ce_wins}/3, r1 wins {r1_wins}/3 (>= 2), {elapsed:.0}s (< 1800s)"),
    );
}

/// Greedy reference decoder: one causal forward per emitted token,
/// excluding [PAD]/[CLS]/[MASK], ties toward the lower token id.
fn greedy_reference(
    image: &Tensor<f32>,
    params: &Params<f32>,
    max_len: usize,
) -> (Vec<u32>, f64) {
    let visual = visual_states(image, params).unwrap();
    let mut generated: Vec<u32> = Vec::new();
    let mut score = 0.0f64;
    for _ in 0..max_len {
        let mut ids = vec![CLS];
        ids.extend_from_slice(&generated);
        ids.push(MASK);
        let pos = ids.len() - 1;
        let seq = TokenSequence::from_ids(ids);
        let logits = token_logits(&visual, &seq, MaskKind::Causal, pos, params).unwrap();
        let logits: Vec<f64> = logits.iter().map(|&x| x as f64).collect();
        let logp = log_softmax(&logits);
        let mut best: Option<(u32, f64)> = None;
        for (id, &lp) in logp.iter().enumerate() {
            let id = id as u32;
            if id == PAD || id == CLS || id == MASK {
                continue;
            }
            if best.map_or(true, |(bid, blp)| lp > blp || (lp == blp && id < bid)) {
                best = Some((id, lp));
            }
        }
        let (id, lp) = best.unwrap();
        generated.push(id);
        score += lp;
        if id == SEP {
            break;
        }
    }
    let mut ids = vec![CLS];
    ids.extend_from_slice(&generated);
    (ids, score)
}

#[test]
fn criterion_06_decoding() {
    let vocab = build_vocab();
    let config = tiny_encoder_config(vocab.len());
    let corpus = generate_corpus(31, 50, TaskMix::default(), &vocab).unwrap();

    // Beam 1 equals greedy token-for-token on 50 random inputs across
    // differently-initialized models.
    let mut greedy_ok = true;
    for (i, ex) in corpus.iter().enumerate() {
        let params: Params<f32> = Params::init(&config, (i % 5) as u64).unwrap();
        let dcfg = DecodeConfig {
            beam_size: 1,
            max_len: 6,
            length_normalize: false,
        };
        let out = decode(&ex.image, &cls_prefix(), &params, &dcfg).unwrap();
        let (ids, score) = greedy_reference(&ex.image, &params, 6);
        if out.ids != ids || (out.score - score).abs() > 1e-6 {
            greedy_ok = false;
            break;
        }
    }

    // Beam monotonicity: a wider beam never returns a worse
    // (un-normalized) log-probability.
    let mut mono_ok = true;
    for seed in 0..5u64 {
        let params: Params<f32> = Params::init(&config, seed).unwrap();
        let image = &corpus[seed as usize].image;
        let mut prev = f64::NEG_INFINITY;
        for beam in [1usize, 3, 5] {
            let dcfg = DecodeConfig {
                beam_size: beam,
                max_len: 6,
                length_normalize: false,
            };
            let s = decode(image, &cls_prefix(), &params, &dcfg).unwrap().score;
            if s + 1e-9 < prev {
                mono_ok = false;
            }
            prev = prev.max(s);
        }
    }

    // A model overfitted on a single pair reproduces its caption
    // verbatim.
    let ex = &corpus[0];
    let mut params: Params<f32> = Params::init(&config, 2).unwrap();
    let mut opt = AdamW::new(
        AdamConfig {
            lr: 3e-3,
            ..AdamConfig::default()
        },
        &params,
    );
    let caption = &ex.caption_tokens;
    for _ in 0..300 {
        let mut g: Graph<f32> = Graph::new();
        let bound = params.bind(&mut g);
        let vis = encode_image(&mut g, &ex.image, &params, &bound).unwrap();
        let mut total: Option<Var> = None;
        for t in 1..caption.len() {
            let mut seq = caption.clone();
            seq.ids[t] = MASK;
            seq.mask_positions = vec![t];
            let text = encode_text(&mut g, &seq, MaskKind::Causal, &params, &bound).unwrap();
            let mm = encode_multimodal(
                &mut g,
                text,
                vis,
                MaskKind::Causal,
                &seq.visible,
                &params,
                &bound,
            )
            .unwrap();
            let loss = mlm_loss(&mut g, mm, &[(t, caption.ids[t])], &params, &bound).unwrap();
            total = Some(match total {
                None => loss,
                Some(acc) => g.add(acc, loss).unwrap(),
            });
        }
        let loss = total.unwrap();
        g.backward(loss).unwrap();
        let grads = bound.grads(&g, &params);
        opt.apply(&mut params, &grads, &FreezeSpec::ALL).unwrap();
    }
    let dcfg = DecodeConfig {
        beam_size: 3,
        max_len: caption.len(),
        length_normalize: false,
    };
    let out = decode(&ex.image, &cls_prefix(), &params, &dcfg).unwrap();
    let verbatim = decodes_verbatim(&out.ids, caption);

    let ok = greedy_ok && mono_ok && verbatim;
    verdict(
        6,
        ok,
        &format!("greedy match {greedy_ok}, beam monotone {mono_ok}, verbatim overfit {verbatim}"),
    );
}

#[test]
fn criterion_07_retrieval_oracle_equivalence() {
    let vocab = build_vocab();
    let config = tiny_encoder_config(vocab.len());
    let params: Params<f32> = Params::init(&config, 13).unwrap();
    let gallery = generate_corpus(17, 64, TaskMix::default(), &vocab).unwrap();
    let images: Vec<Tensor<f32>> = gallery.iter().map(|e| e.image.clone()).collect();
    let captions: Vec<TokenSequence> =
        gallery.iter().map(|e| e.caption_tokens.clone()).collect();
    let rcfg = RetrievalConfig { top_k: 64 };
    let ranked = retrieve_texts(&images, &captions, &params, &rcfg).unwrap();

    let mut ok = true;
    for (qi, list) in ranked.iter().enumerate() {
        let visual = visual_states(&images[qi], &params).unwrap();
        let itm: Vec<f64> = captions
            .iter()
            .map(|c| vlp_core::infer::match_score(&visual, c, &params).unwrap())
            .collect();
        // Exhaustive ranking: match score desc, then stage-1 cosine desc,
        // then index asc (the documented tie-break).
        let mut oracle: Vec<usize> = (0..64).collect();
        oracle.sort_by(|&a, &b| {
            itm[b]
                .partial_cmp(&itm[a])
                .unwrap()
                .then(list.stage1[b].partial_cmp(&list.stage1[a]).unwrap())
                .then(a.cmp(&b))
        });
        if list.ranking != oracle {
            ok = false;
            break;
        }
    }
    verdict(
        7,
        ok,
        "two-stage retrieval with top_k = N equals exhaustive pair-classifier ranking on a 64-item gallery",
    );
}

#[test]
fn criterion_08_prompt_machinery() {
    let vocab = build_vocab();
    let config = tiny_encoder_config(vocab.len());
    let params: Params<f32> = Params::init(&config, 19).unwrap();
    let corpus = generate_corpus(41, 8, TaskMix::default(), &vocab).unwrap();

    // Train/infer render consistency for all three task templates: the
    // infer rendering is the train rendering's prompt with the answer
    // span collapsed to a single appended [MASK].
    let cases: Vec<(PromptTemplate, SlotValues)> = vec![
        (
            PromptTemplate::vqa_natural(),
            SlotValues {
                question: Some("what color is the circle"),
                answer: Some("red"),
                ..Default::default()
            },
        ),
        (
            PromptTemplate::classification_natural(),
            SlotValues {
                answer: Some("red circle"),
                ..Default::default()
            },
        ),
        (
            PromptTemplate::entailment_natural(),
            SlotValues {
                sentence: Some("a red circle"),
                answer: Some("entailment"),
                ..Default::default()
            },
        ),
    ];
    let mut render_ok = true;
    for (template, slots) in &cases {
        let train = render_prompt(template, &vocab, *slots, RenderMode::Train, 40).unwrap();
        let infer = render_prompt(template, &vocab, *slots, RenderMode::Infer, 40).unwrap();
        let answer_start = train.targets.first().map(|&(p, _)| p).unwrap();
        if infer.seq.ids.last() != Some(&MASK)
            || infer.seq.ids[..infer.seq.ids.len() - 1] != train.seq.ids[..answer_start]
            || train.targets.is_empty()
        {
            render_ok = false;
        }
    }

    // Freeze airtightness: ten optimizer steps with only the learnable
    // context rows trainable leave every other value bitwise unchanged.
    let mut run_cfg = tiny_run_config();
    run_cfg.lr = 1e-2;
    let mut state = TrainState {
        params: params.clone(),
        optimizer: AdamW::new(run_cfg.adam_config(), &params),
        rng: Rng::new(3),
        step: 0,
        metrics: Vec::new(),
    };
    let template = PromptTemplate::vqa_context(4, vlp_core::prompting::PromptPosition::Begin)
        .unwrap();
    let mut instances = Vec::new();
    for ex in &corpus {
        if let Some((q, a)) = &ex.qa {
            let slots = SlotValues {
                question: Some(q),
                answer: Some(a),
                ..Default::default()
            };
            let rendered = render_prompt(&template, &vocab, slots, RenderMode::Train, 16).unwrap();
            instances.push((ex.image.clone(), rendered));
        }
    }
    let freeze = freeze_from_list("ctx").unwrap();
    finetune_steps(
        &mut state,
        &instances,
        &run_cfg,
        &freeze,
        MaskKind::Bidirectional,
        10,
    )
    .unwrap();
    let mut freeze_ok = true;
    let mut ctx_moved = false;
    let embed_idx = params.index_of("text.embed").unwrap();
    for i in 0..params.tensors.len() {
        if i == embed_idx {
            let cols = params.tensors[i].shape[1];
            let ctx_lo = vlp_core::vocab::CTX_BASE as usize;
            let ctx_hi = ctx_lo + vlp_core::vocab::NUM_CTX;
            for r in 0..params.tensors[i].shape[0] {
                let same = params.tensors[i].data[r * cols..(r + 1) * cols]
                    == state.params.tensors[i].data[r * cols..(r + 1) * cols];
                if (ctx_lo..ctx_hi).contains(&r) {
                    ctx_moved |= !same;
                } else if !same {
                    freeze_ok = false;
                }
            }
        } else if params.tensors[i].data != state.params.tensors[i].data {
            freeze_ok = false;
        }
    }

    // Restricted ranking always returns a label from the set.
    let labels: Vec<String> = ["red", "blue", "green", "two"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rank_ok = true;
    for ex in corpus.iter().take(4) {
        let slots = SlotValues {
            question: Some("what color is the circle"),
            answer: None,
            ..Default::default()
        };
        let rendered = render_prompt(
            &PromptTemplate::vqa_natural(),
            &vocab,
            slots,
            RenderMode::Infer,
            16,
        )
        .unwrap();
        let visual = visual_states(&ex.image, &params).unwrap();
        let (idx, scores) =
            restricted_rank(&visual, &rendered.seq, &labels, &vocab, &params).unwrap();
        if idx >= labels.len() || scores.len() != labels.len() {
            rank_ok = false;
        }
    }

    // The prompt length × position study emits the full 10-row grid.
    let mut study_cfg = tiny_run_config();
    study_cfg.max_len = 48;
    study_cfg.corpus_size = 12;
    study_cfg.steps = 1;
    study_cfg.batch_size = 2;
    let report = run_study("prompt_len_pos", &study_cfg, 5).unwrap();
    let rows: Vec<&str> = report.lines().skip(1).collect();
    let mut grid_ok = rows.len() == 10;
    let mut want = Vec::new();
    for len in [1usize, 4, 8, 16, 32] {
        for pos in ["begin", "mid"] {
            want.push((len.to_string(), pos.to_string()));
        }
    }
    for (row, (len, pos)) in rows.iter().zip(&want) {
        let cells: Vec<&str> = row.split('\t').collect();
        if cells.len() != 3 || cells[0] != len || cells[1] != pos {
            grid_ok = false;
        }
    }

    let ok = render_ok && freeze_ok && ctx_moved && rank_ok && grid_ok;
    verdict(
        8,
        ok,
        &format!(
            "render consistency {render_ok}, freeze airtight {freeze_ok} (ctx moved {ctx_moved}), restricted rank in-set {rank_ok}, 10-row grid {grid_ok}"
        ),
    );
}

#[test]
fn criterion_09_reproducibility() {
    let vocab = build_vocab();
    let mut config = tiny_run_config();
    config.corpus_size = 8;
    config.steps = 8;
    let corpus = generate_corpus(3, 8, TaskMix::default(), &vocab).unwrap();

    let run = |steps: u64| -> (Vec<u8>, Vec<String>) {
        let mut state = TrainState::fresh(&config, vocab.len(), 21).unwrap();
        pretrain_steps(&mut state, &corpus, &config, steps).unwrap();
        let ckpt = Checkpoint::capture(
            &config,
            &state.params,
            Some(&state.optimizer),
            &state.rng,
            state.step,
        );
        (ckpt.to_bytes(), state.metrics)
    };
    let (bytes_a, log_a) = run(8);
    let (bytes_b, log_b) = run(8);
    let identical = bytes_a == bytes_b && log_a == log_b;

    // Round trip through disk is byte-identical.
    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("a.ckpt");
    let p2 = dir.path().join("b.ckpt");
    std::fs::write(&p1, &bytes_a).unwrap();
    let loaded = load_checkpoint(&p1).unwrap();
    save_checkpoint(&p2, &loaded).unwrap();
    let round_trip = std::fs::read(&p1).unwrap() == std::fs::read(&p2).unwrap();

    // Resume equivalence: 5 steps, checkpoint, 3 more equals 8 straight.
    let mut state = TrainState::fresh(&config, vocab.len(), 21).unwrap();
    pretrain_steps(&mut state, &corpus, &config, 5).unwrap();
    let mid = Checkpoint::capture(
        &config,
        &state.params,
        Some(&state.optimizer),
        &state.rng,
        state.step,
    );
    let mid_path = dir.path().join("mid.ckpt");
    save_checkpoint(&mid_path, &mid).unwrap();
    let mid = load_checkpoint(&mid_path).unwrap();
    let params = mid.to_params(vocab.len()).unwrap();
    let optimizer = mid.to_optimizer(&params).unwrap();
    let mut resumed = TrainState {
        params,
        optimizer,
        rng: mid.rng(),
        step: mid.step,
        metrics: Vec::new(),
    };
    pretrain_steps(&mut resumed, &corpus, &config, 3).unwrap();
    let resumed_bytes = Checkpoint::capture(
        &config,
        &resumed.params,
        Some(&resumed.optimizer),
        &resumed.rng,
        resumed.step,
    )
    .to_bytes();
    let resume_equal = resumed_bytes == bytes_a;

    let ok = identical && round_trip && resume_equal;
    verdict(
        9,
        ok,
        &format!(
            "seeded runs identical {identical}, disk round trip {round_trip}, resume equivalence {resume_equal}"
        ),
    );
}

#[test]
fn criterion_10_metrics() {
    // BLEU-4 identity, disjoint 4-grams, and a hand-worked oracle.
    fn tok(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }
    let identity = bleu4(
        &[tok("a red circle above a blue square")],
        &[tok("a red circle above a blue square")],
    )
    .unwrap();
    // One substitution in the middle leaves no common 4-gram.
    let disjoint = bleu4(
        &[tok("a red circle on a blue square")],
        &[tok("a red circle above a blue square")],
    )
    .unwrap();
    // Hand-worked: hyp repeats the final word. Precisions 7/8, 6/7, 5/6,
    // 4/5; brevity penalty 1 (8 > 7); geometric mean (1/2)^(1/4).
    let worked = bleu4(
        &[tok("a red circle above a blue square square")],
        &[tok("a red circle above a blue square")],
    )
    .unwrap();
    let worked_expect = 0.5f64.powf(0.25);

    // recall_at_k against brute-force counting over random rankings.
    let mut rng = Rng::new(77);
    let n = 12usize;
    let mut rankings = Vec::new();
    let mut truth = Vec::new();
    for q in 0..200 {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.below(i + 1);
            perm.swap(i, j);
        }
        let t: Vec<usize> = (0..n).filter(|_| rng.bernoulli(0.25)).collect();
        let t = if t.is_empty() { vec![rng.below(n)] } else { t };
        rankings.push(RankedList {
            query: q,
            ranking: perm,
            stage1: vec![0.0; n],
            stage2: Vec::new(),
            clamped: false,
        });
        truth.push(t);
    }
    let mut brute_ok = true;
    for k in [1usize, 3, 5] {
        let lib = recall_at_k(&rankings, &truth, k).unwrap();
        let brute = rankings
            .iter()
            .zip(&truth)
            .filter(|(r, t)| r.ranking[..k].iter().any(|i| t.contains(i)))
            .count() as f64
            / rankings.len() as f64;
        if (lib - brute).abs() > 1e-12 {
            brute_ok = false;
        }
    }

    let ok = identity == 1.0
        && disjoint == 0.0
        && (worked - worked_expect).abs() < 1e-9
        && brute_ok;
    verdict(
        10,
        ok,
        &format!(
            "identity {identity}, disjoint {disjoint}, hand-worked err {:.1e}, recall matches brute force {brute_ok}",
            (worked - worked_expect).abs()
        ),
    );
}

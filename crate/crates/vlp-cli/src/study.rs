//! Runnable ablation studies. Each study trains per grid cell under a
//! small, configurable budget and emits a deterministic tab-separated
//! report (header row + one row per cell).
//!
//! The metric columns follow the protocols the studies probe:
//! generation/understanding trade-off under causal-mask mixing, prompt
//! length × position, sample efficiency, in-/out-domain answers,
//! entailment method comparison, and encoder freezing.

use vlp_core::bleu::bleu4;
use vlp_core::corpus::{build_answer_lists, build_vocab, generate_corpus, PairedExample, TaskMix};
use vlp_core::decode::{decode, DecodeConfig};
use vlp_core::encoders::MaskKind;
use vlp_core::infer::{log_softmax, token_logits, visual_states};
use vlp_core::optim::AdamW;
use vlp_core::params::Params;
use vlp_core::prompting::{
    render_prompt, PromptPosition, PromptTemplate, RenderMode, RenderedPrompt, SlotValues,
    CONTEXT_LENGTHS,
};
use vlp_core::retrieve::{recall_at_k, retrieve_texts, RetrievalConfig};
use vlp_core::vocab::Vocabulary;
use vlp_core::{Rng, Tensor};

use crate::baseline::{linear_classifier_baseline, task_labels, BaselineTask};
use crate::configfile::RunConfig;
use crate::error::{CliError, Result};
use crate::forward::{content_tokens, cls_prefix, mean_caption_ce};
use crate::train::{freeze_from_list, pretrain_steps, TrainState};

pub const STUDY_KINDS: [&str; 6] = [
    "mask_mix_sweep",
    "prompt_len_pos",
    "few_shot",
    "vqa_domain_split",
    "ve_methods",
    "cls_freeze",
];

/// Train/test split plus the shared vocabulary.
struct StudyEnv {
    vocab: Vocabulary,
    train: Vec<PairedExample>,
    test: Vec<PairedExample>,
}

impl StudyEnv {
    fn new(config: &RunConfig, seed: u64) -> Result<StudyEnv> {
        if config.corpus_size < 8 {
            return Err(CliError::Validation(
                "studies need corpus_size >= 8".into(),
            ));
        }
        let vocab = build_vocab();
        let corpus = generate_corpus(seed, config.corpus_size, TaskMix::default(), &vocab)?;
        let split = config.corpus_size * 3 / 4;
        Ok(StudyEnv {
            vocab,
            train: corpus[..split].to_vec(),
            test: corpus[split..].to_vec(),
        })
    }

    fn eval_slice(&self) -> &[PairedExample] {
        &self.test[..self.test.len().min(16)]
    }
}

/// Slot values of an example for a task; `None` when the annotation is
/// missing.
fn task_slots(ex: &PairedExample, task: BaselineTask) -> Option<(SlotValues<'_>, &str)> {
    match task {
        BaselineTask::VqaClosed => ex.qa.as_ref().map(|(q, a)| {
            (
                SlotValues {
                    question: Some(q.as_str()),
                    answer: Some(a.as_str()),
                    ..Default::default()
                },
                a.as_str(),
            )
        }),
        BaselineTask::Classification => ex.class_label.as_ref().map(|label| {
            (
                SlotValues {
                    answer: Some(label.as_str()),
                    ..Default::default()
                },
                label.as_str(),
            )
        }),
        BaselineTask::Entailment => ex.entailment.as_ref().map(|(hyp, label)| {
            (
                SlotValues {
                    sentence: Some(hyp.as_str()),
                    answer: Some(label.name()),
                    ..Default::default()
                },
                label.name(),
            )
        }),
    }
}

/// Training instances (image, masked-answer prompt) for a task/template.
fn prompt_instances(
    examples: &[PairedExample],
    task: BaselineTask,
    template: &PromptTemplate,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<(Tensor<f32>, RenderedPrompt)>> {
    let mut out = Vec::new();
    for ex in examples {
        if let Some((slots, _)) = task_slots(ex, task) {
            let rendered = render_prompt(template, vocab, slots, RenderMode::Train, max_len)?;
            out.push((ex.image.clone(), rendered));
        }
    }
    Ok(out)
}

/// Closed-set prediction at the masked answer span: every label is
/// tokenized, all labels must have the same token count, and each is
/// scored by its summed log-probability at the mask positions. Returns
/// the winning label index.
fn prompt_rank(
    visual: &Tensor<f32>,
    rendered: &RenderedPrompt,
    label_tokens: &[Vec<u32>],
    params: &Params<f32>,
) -> Result<usize> {
    let positions: Vec<usize> = rendered.targets.iter().map(|&(p, _)| p).collect();
    let mut scores = vec![0.0f64; label_tokens.len()];
    for (slot, &pos) in positions.iter().enumerate() {
        let logits = token_logits(visual, &rendered.seq, MaskKind::Bidirectional, pos, params)?;
        let logits: Vec<f64> = logits.iter().map(|&x| x as f64).collect();
        let logp = log_softmax(&logits);
        for (li, toks) in label_tokens.iter().enumerate() {
            scores[li] += logp[toks[slot] as usize];
        }
    }
    let mut best = 0;
    for i in 1..scores.len() {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

fn tokenize_labels(labels: &[String], vocab: &Vocabulary) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::with_capacity(labels.len());
    let mut width = None;
    for label in labels {
        let toks: Vec<u32> = label
            .split_whitespace()
            .map(|w| vocab.id(w))
            .collect::<core::result::Result<_, _>>()?;
        if *width.get_or_insert(toks.len()) != toks.len() {
            return Err(CliError::Validation(
                "ranked labels must share one token count".into(),
            ));
        }
        out.push(toks);
    }
    Ok(out)
}

/// Accuracy of masked-answer ranking over a closed label set.
fn prompt_accuracy(
    params: &Params<f32>,
    examples: &[PairedExample],
    task: BaselineTask,
    template: &PromptTemplate,
    labels: &[String],
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<f64> {
    let label_tokens = tokenize_labels(labels, vocab)?;
    let mut hits = 0usize;
    let mut total = 0usize;
    for ex in examples {
        let Some((mut slots, answer)) = task_slots(ex, task) else {
            continue;
        };
        total += 1;
        // The mask layout is answer-independent (uniform token count), so
        // render with the first label as a placeholder.
        slots.answer = Some(labels[0].as_str());
        let rendered = render_prompt(template, vocab, slots, RenderMode::Train, max_len)?;
        let visual = visual_states(&ex.image, params)?;
        let pred = prompt_rank(&visual, &rendered, &label_tokens, params)?;
        if labels[pred] == answer {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(CliError::Validation(
            "no evaluation example carries the task annotation".into(),
        ));
    }
    Ok(hits as f64 / total as f64)
}

/// Unigram precision with brevity penalty (corpus level).
fn bleu1(hyps: &[Vec<u32>], refs: &[Vec<u32>]) -> f64 {
    use std::collections::BTreeMap;
    let mut matched = 0usize;
    let mut hyp_total = 0usize;
    let mut ref_total = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
        for &t in r {
            *counts.entry(t).or_insert(0) += 1;
        }
        for &t in h {
            if let Some(c) = counts.get_mut(&t) {
                if *c > 0 {
                    *c -= 1;
                    matched += 1;
                }
            }
        }
        hyp_total += h.len();
        ref_total += r.len();
    }
    if hyp_total == 0 || matched == 0 {
        return 0.0;
    }
    let precision = matched as f64 / hyp_total as f64;
    let bp = if hyp_total < ref_total {
        (1.0 - ref_total as f64 / hyp_total as f64).exp()
    } else {
        1.0
    };
    precision * bp
}

/// Caption quality of a model on an eval slice: (mean causal CE, BLEU-1,
/// BLEU-4).
fn caption_metrics(
    params: &Params<f32>,
    examples: &[PairedExample],
    config: &RunConfig,
) -> Result<(f64, f64, f64)> {
    let ce = mean_caption_ce(examples, params)?;
    let dcfg = DecodeConfig {
        beam_size: config.beam_size,
        max_len: config.decode_max_len.min(config.max_len),
        length_normalize: config.length_normalize,
    };
    let mut hyps = Vec::new();
    let mut refs = Vec::new();
    for ex in examples {
        let out = decode(&ex.image, &cls_prefix(), params, &dcfg)?;
        hyps.push(content_tokens(&vlp_core::vocab::TokenSequence::from_ids(
            out.ids,
        )));
        refs.push(content_tokens(&ex.caption_tokens));
    }
    let b1 = bleu1(&hyps, &refs);
    let b4 = bleu4(&hyps, &refs)?;
    Ok((ce, b1, b4))
}

/// Image-to-text R@1 where caption i is the ground truth for image i.
fn retrieval_r1(
    params: &Params<f32>,
    examples: &[PairedExample],
    config: &RunConfig,
) -> Result<f64> {
    let images: Vec<Tensor<f32>> = examples.iter().map(|e| e.image.clone()).collect();
    let captions: Vec<_> = examples.iter().map(|e| e.caption_tokens.clone()).collect();
    let rcfg = RetrievalConfig {
        top_k: config.top_k.min(examples.len()),
    };
    let ranked = retrieve_texts(&images, &captions, params, &rcfg)?;
    let truth: Vec<Vec<usize>> = (0..examples.len()).map(|i| vec![i]).collect();
    Ok(recall_at_k(&ranked, &truth, 1)?)
}

fn pretrained_state(
    env: &StudyEnv,
    config: &RunConfig,
    seed: u64,
) -> Result<TrainState> {
    let mut state = TrainState::fresh(config, env.vocab.len(), seed)?;
    pretrain_steps(&mut state, &env.train, config, config.steps)?;
    Ok(state)
}

/// Clone a base model into a fine-tuning state with a fresh optimizer.
fn finetune_state(base: &TrainState, config: &RunConfig, seed: u64) -> TrainState {
    let params = base.params.clone();
    let optimizer = AdamW::new(config.adam_config(), &params);
    TrainState {
        params,
        optimizer,
        rng: Rng::new(seed).derive(2),
        step: 0,
        metrics: Vec::new(),
    }
}

fn study_mask_mix(config: &RunConfig, seed: u64) -> Result<String> {
    let env = StudyEnv::new(config, seed)?;
    let mut out = String::from("p_causal\tcaption_ce\tbleu1\tbleu4\tretrieval_r1\n");
    for &p in &[0.0, 0.33, 0.66, 1.0] {
        let mut cell = config.clone();
        cell.p_causal = p;
        let state = pretrained_state(&env, &cell, seed)?;
        let eval = env.eval_slice();
        let (ce, b1, b4) = caption_metrics(&state.params, eval, &cell)?;
        let r1 = retrieval_r1(&state.params, eval, &cell)?;
        out.push_str(&format!("{p}\t{ce:.4}\t{b1:.4}\t{b4:.4}\t{r1:.4}\n"));
    }
    Ok(out)
}

fn study_prompt_len_pos(config: &RunConfig, seed: u64) -> Result<String> {
    let env = StudyEnv::new(config, seed)?;
    let base = pretrained_state(&env, config, seed)?;
    let (answers, _) = build_answer_lists(
        &env.train,
        config.answer_list_size.min(distinct_answers(&env.train)),
    )?;
    let mut out = String::from("prompt_len\tposition\taccuracy\n");
    for &len in &CONTEXT_LENGTHS {
        for pos in [PromptPosition::Begin, PromptPosition::Mid] {
            let template = PromptTemplate::vqa_context(len, pos)?;
            let mut state = finetune_state(&base, config, seed);
            let instances = prompt_instances(
                &env.train,
                BaselineTask::VqaClosed,
                &template,
                &env.vocab,
                config.max_len,
            )?;
            let freeze = freeze_from_list("ctx")?;
            crate::train::finetune_steps(
                &mut state,
                &instances,
                config,
                &freeze,
                MaskKind::Bidirectional,
                config.steps,
            )?;
            let acc = prompt_accuracy(
                &state.params,
                env.eval_slice(),
                BaselineTask::VqaClosed,
                &template,
                &answers,
                &env.vocab,
                config.max_len,
            )?;
            out.push_str(&format!("{len}\t{}\t{acc:.4}\n", pos.name()));
        }
    }
    Ok(out)
}

fn distinct_answers(examples: &[PairedExample]) -> usize {
    let mut set = std::collections::BTreeSet::new();
    for ex in examples {
        if let Some((_, a)) = &ex.qa {
            set.insert(a.as_str());
        }
    }
    set.len()
}

fn study_few_shot(config: &RunConfig, seed: u64) -> Result<String> {
    let env = StudyEnv::new(config, seed)?;
    let base = pretrained_state(&env, config, seed)?;
    let (answers, _) = build_answer_lists(
        &env.train,
        config.answer_list_size.min(distinct_answers(&env.train)),
    )?;
    let template = PromptTemplate::vqa_natural();
    let all = prompt_instances(
        &env.train,
        BaselineTask::VqaClosed,
        &template,
        &env.vocab,
        config.max_len,
    )?;
    let mut out = String::from("fraction\tn_samples\taccuracy\n");
    for &frac in &[0.125, 0.25, 0.5, 1.0] {
        let n = ((all.len() as f64 * frac).ceil() as usize).max(1);
        let mut state = finetune_state(&base, config, seed);
        let freeze = freeze_from_list(&config.trainable)?;
        crate::train::finetune_steps(
            &mut state,
            &all[..n],
            config,
            &freeze,
            MaskKind::Bidirectional,
            config.steps,
        )?;
        let acc = prompt_accuracy(
            &state.params,
            env.eval_slice(),
            BaselineTask::VqaClosed,
            &template,
            &answers,
            &env.vocab,
            config.max_len,
        )?;
        out.push_str(&format!("{frac}\t{n}\t{acc:.4}\n"));
    }
    Ok(out)
}

fn study_vqa_domain_split(config: &RunConfig, seed: u64) -> Result<String> {
    let env = StudyEnv::new(config, seed)?;
    let base = pretrained_state(&env, config, seed)?;
    let distinct = distinct_answers(&env.train);
    if distinct < 3 {
        return Err(CliError::Validation(
            "domain split needs >= 3 distinct training answers".into(),
        ));
    }
    // Keep at least one answer out of the closed list so the out-domain
    // slice is non-trivial.
    let list_size = config.answer_list_size.min(distinct - 1);
    let (in_domain, inventory) = build_answer_lists(&env.train, list_size)?;

    let template = PromptTemplate::vqa_natural();
    let instances = prompt_instances(
        &env.train,
        BaselineTask::VqaClosed,
        &template,
        &env.vocab,
        config.max_len,
    )?;
    let mut state = finetune_state(&base, config, seed);
    let freeze = freeze_from_list(&config.trainable)?;
    crate::train::finetune_steps(
        &mut state,
        &instances,
        config,
        &freeze,
        MaskKind::Bidirectional,
        config.steps,
    )?;

    let (in_test, out_test): (Vec<PairedExample>, Vec<PairedExample>) = env
        .test
        .iter()
        .filter(|ex| ex.qa.is_some())
        .cloned()
        .partition(|ex| in_domain.contains(&ex.qa.as_ref().unwrap().1));

    let mut out = String::from("method\tdomain\tn\taccuracy\n");
    // The prompt method ranks over the full inventory, so out-of-list
    // answers remain reachable.
    for (domain, slice) in [("in", &in_test), ("out", &out_test)] {
        let acc = if slice.is_empty() {
            f64::NAN
        } else {
            prompt_accuracy(
                &state.params,
                slice,
                BaselineTask::VqaClosed,
                &template,
                &inventory,
                &env.vocab,
                config.max_len,
            )?
        };
        out.push_str(&format!("prompt\t{domain}\t{}\t{acc:.4}\n", slice.len()));
    }
    // The linear classifier is closed over the in-domain list; its
    // out-domain accuracy is structurally zero.
    let (clf, _, _) = linear_classifier_baseline(
        &base.params,
        BaselineTask::VqaClosed,
        &in_domain,
        &env.train,
        &env.test,
        &env.vocab,
        100,
        0.5,
    )?;
    for (domain, slice) in [("in", &in_test), ("out", &out_test)] {
        let acc = if slice.is_empty() {
            f64::NAN
        } else {
            crate::baseline::baseline_accuracy(
                &base.params,
                &clf,
                BaselineTask::VqaClosed,
                slice,
                &env.vocab,
            )?
        };
        out.push_str(&format!("linear\t{domain}\t{}\t{acc:.4}\n", slice.len()));
    }
    Ok(out)
}

fn study_ve_methods(config: &RunConfig, seed: u64) -> Result<String> {
    let env = StudyEnv::new(config, seed)?;
    let base = pretrained_state(&env, config, seed)?;
    let labels = task_labels(BaselineTask::Entailment, &[]);
    let mut out = String::from("method\taccuracy\n");

    // LC: linear classifier on the frozen backbone.
    let (_, _, lc_acc) = linear_classifier_baseline(
        &base.params,
        BaselineTask::Entailment,
        &labels,
        &env.train,
        env.eval_slice(),
        &env.vocab,
        100,
        0.5,
    )?;
    out.push_str(&format!("LC\t{lc_acc:.4}\n"));

    // NLP: natural-language prompt, full fine-tuning.
    // LCP: learnable-context prompt, context embeddings only.
    // 1inK: restricted ranking with no fine-tuning at all.
    let cells: [(&str, PromptTemplate, &str, u64); 3] = [
        ("NLP", PromptTemplate::entailment_natural(), "", config.steps),
        (
            "LCP",
            PromptTemplate::entailment_context_plus(config.context_len)?,
            "ctx",
            config.steps,
        ),
        ("1inK", PromptTemplate::entailment_natural(), "", 0),
    ];
    for (name, template, trainable, steps) in cells {
        let mut state = finetune_state(&base, config, seed);
        if steps > 0 {
            let instances = prompt_instances(
                &env.train,
                BaselineTask::Entailment,
                &template,
                &env.vocab,
                config.max_len,
            )?;
            let freeze = freeze_from_list(trainable)?;
            crate::train::finetune_steps(
                &mut state,
                &instances,
                config,
                &freeze,
                MaskKind::Bidirectional,
                steps,
            )?;
        }
        let acc = prompt_accuracy(
            &state.params,
            env.eval_slice(),
            BaselineTask::Entailment,
            &template,
            &labels,
            &env.vocab,
            config.max_len,
        )?;
        out.push_str(&format!("{name}\t{acc:.4}\n"));
    }
    Ok(out)
}

fn study_cls_freeze(config: &RunConfig, seed: u64) -> Result<String> {
    let env = StudyEnv::new(config, seed)?;
    let base = pretrained_state(&env, config, seed)?;
    let labels = task_labels(BaselineTask::Classification, &[]);
    let grid: [(&str, &str); 5] = [
        ("all", ""),
        ("freeze_ve", "te,me,heads"),
        ("freeze_te", "ve,me,heads"),
        ("freeze_ve_te", "me,heads"),
        ("ctx_only", "ctx"),
    ];
    let mut out = String::from("trainable\taccuracy\n");
    for (name, trainable) in grid {
        let template = if trainable == "ctx" {
            PromptTemplate::classification_context(config.context_len)?
        } else {
            PromptTemplate::classification_natural()
        };
        let instances = prompt_instances(
            &env.train,
            BaselineTask::Classification,
            &template,
            &env.vocab,
            config.max_len,
        )?;
        let mut state = finetune_state(&base, config, seed);
        let freeze = freeze_from_list(trainable)?;
        crate::train::finetune_steps(
            &mut state,
            &instances,
            config,
            &freeze,
            MaskKind::Bidirectional,
            config.steps,
        )?;
        let acc = prompt_accuracy(
            &state.params,
            env.eval_slice(),
            BaselineTask::Classification,
            &template,
            &labels,
            &env.vocab,
            config.max_len,
        )?;
        out.push_str(&format!("{name}\t{acc:.4}\n"));
    }
    Ok(out)
}

/// Run one study and return its tab-separated report.
pub fn run_study(kind: &str, config: &RunConfig, seed: u64) -> Result<String> {
    match kind {
        "mask_mix_sweep" => study_mask_mix(config, seed),
        "prompt_len_pos" => study_prompt_len_pos(config, seed),
        "few_shot" => study_few_shot(config, seed),
        "vqa_domain_split" => study_vqa_domain_split(config, seed),
        "ve_methods" => study_ve_methods(config, seed),
        "cls_freeze" => study_cls_freeze(config, seed),
        other => Err(CliError::Validation(format!(
            "unknown study kind {other:?} (expected one of {})",
            STUDY_KINDS.join("/")
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_study_config() -> RunConfig {
        let mut c = RunConfig::default();
        c.hidden = 16;
        c.n_heads = 2;
        c.layers_visual = 1;
        c.layers_text = 1;
        c.layers_mm = 1;
        c.patch = 16;
        c.max_len = 48;
        c.contrastive_dim = 8;
        c.corpus_size = 12;
        c.batch_size = 2;
        c.steps = 1;
        c.beam_size = 1;
        c.decode_max_len = 8;
        c.top_k = 4;
        c
    }

    #[test]
    fn unknown_study_kind_errors() {
        let err = run_study("nope", &tiny_study_config(), 1).unwrap_err();
        assert!(err.to_string().contains("unknown study kind"));
    }

    #[test]
    fn few_shot_rows_have_monotone_sample_counts() {
        let report = run_study("few_shot", &tiny_study_config(), 5).unwrap();
        let counts: Vec<usize> = report
            .lines()
            .skip(1)
            .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
            .collect();
        assert_eq!(counts.len(), 4);
        assert!(counts.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn ve_methods_emits_all_four_rows() {
        let report = run_study("ve_methods", &tiny_study_config(), 5).unwrap();
        for name in ["LC", "NLP", "LCP", "1inK"] {
            assert!(report.lines().any(|l| l.starts_with(name)), "{report}");
        }
    }

    #[test]
    fn reports_are_reproducible_per_seed() {
        let cfg = tiny_study_config();
        let a = run_study("cls_freeze", &cfg, 9).unwrap();
        let b = run_study("cls_freeze", &cfg, 9).unwrap();
        assert_eq!(a, b);
    }
}

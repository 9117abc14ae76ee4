//! `vlp` — train, fine-tune, decode, retrieve, evaluate and run studies
//! for the desk-scale vision-language model.
//!
//! Exit codes: 0 success, 1 validation error, 2 numeric abort (NaN),
//! 3 I/O error.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use vlp_cli::baseline::{linear_classifier_baseline, task_labels, BaselineTask};
use vlp_cli::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use vlp_cli::configfile::RunConfig;
use vlp_cli::error::{CliError, Result};
use vlp_cli::export::export_corpus;
use vlp_cli::forward::{cls_prefix, masked_token_accuracy, mean_caption_ce};
use vlp_cli::study::run_study;
use vlp_cli::train::{
    finetune_steps, freeze_from_config, pretrain_steps, TrainState, METRICS_HEADER,
};

use vlp_core::corpus::{build_answer_lists, build_vocab, generate_corpus, PairedExample, TaskMix};
use vlp_core::decode::{decode, DecodeConfig};
use vlp_core::encoders::MaskKind;
use vlp_core::optim::AdamW;
use vlp_core::prompting::{
    render_prompt, PromptPosition, PromptTemplate, RenderMode, SlotValues,
};
use vlp_core::retrieve::{recall_at_k, retrieve_texts, RetrievalConfig};
use vlp_core::vocab::{TokenSequence, Vocabulary};
use vlp_core::{Rng, Tensor};

#[derive(Parser)]
#[command(name = "vlp", about = "Desk-scale vision-language pretraining harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Random seed for data, initialization and training order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Plain `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and export it to disk.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain from scratch or resume from a checkpoint.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Resume training from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Prompt-based fine-tuning on top of a pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pretrained starting point.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Beam-search captions for held-out images.
    Decode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Two-stage image-to-text retrieval over a held-out gallery.
    Retrieve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Caption, masked-token and retrieval metrics for a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run an ablation study and write its tab-separated report.
    Study {
        #[command(flatten)]
        common: Common,
        /// One of: mask_mix_sweep, prompt_len_pos, few_shot,
        /// vqa_domain_split, ve_methods, cls_freeze.
        #[arg(long)]
        kind: String,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(path) => RunConfig::from_file(path),
        None => Ok(RunConfig::default()),
    }
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Held-out slice: examples the training stream never samples because
/// they come from a different stream of the generator.
fn heldout(config: &RunConfig, seed: u64, n: usize, vocab: &Vocabulary) -> Result<Vec<PairedExample>> {
    let _ = config;
    Ok(generate_corpus(seed ^ 0x9e37_79b9, n, TaskMix::default(), vocab)?)
}

fn cmd_gen_data(common: &Common) -> Result<()> {
    let config = load_config(common)?;
    let vocab = build_vocab();
    let corpus = generate_corpus(common.seed, config.corpus_size, TaskMix::default(), &vocab)?;
    ensure_out(&common.out)?;
    export_corpus(&common.out, common.seed, &corpus)?;
    println!(
        "wrote {} examples to {}",
        corpus.len(),
        common.out.display()
    );
    Ok(())
}

fn cmd_pretrain(common: &Common, resume: Option<&Path>) -> Result<()> {
    let config = load_config(common)?;
    let vocab = build_vocab();
    let corpus = generate_corpus(common.seed, config.corpus_size, TaskMix::default(), &vocab)?;
    ensure_out(&common.out)?;

    let mut state = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let params = ckpt.to_params(vocab.len())?;
            let optimizer = ckpt.to_optimizer(&params)?;
            TrainState {
                params,
                optimizer,
                rng: ckpt.rng(),
                step: ckpt.step,
                metrics: Vec::new(),
            }
        }
        None => TrainState::fresh(&config, vocab.len(), common.seed)?,
    };

    let ckpt_path = common.out.join("checkpoint.ckpt");
    let metrics_path = common.out.join("metrics.log");
    let mut log = String::new();
    if state.step == 0 {
        log.push_str(METRICS_HEADER);
        log.push('\n');
    }

    let total = config.steps;
    while state.step < total {
        let chunk = if config.checkpoint_interval == 0 {
            total - state.step
        } else {
            config.checkpoint_interval.min(total - state.step)
        };
        let result = pretrain_steps(&mut state, &corpus, &config, chunk);
        for line in state.metrics.drain(..) {
            log.push_str(&line);
            log.push('\n');
        }
        write_text(&metrics_path, &log)?;
        match result {
            Ok(_) => {
                let ckpt = Checkpoint::capture(
                    &config,
                    &state.params,
                    Some(&state.optimizer),
                    &state.rng,
                    state.step,
                );
                save_checkpoint(&ckpt_path, &ckpt)?;
            }
            // Numeric abort: keep the last good checkpoint on disk.
            Err(e) => return Err(e),
        }
    }
    if total == 0 {
        let ckpt = Checkpoint::capture(
            &config,
            &state.params,
            Some(&state.optimizer),
            &state.rng,
            0,
        );
        save_checkpoint(&ckpt_path, &ckpt)?;
        write_text(&metrics_path, &log)?;
    }
    println!(
        "pretrained to step {} -> {}",
        state.step,
        ckpt_path.display()
    );
    Ok(())
}

/// The prompt template selected by the config's task/prompt keys.
fn template_from_config(config: &RunConfig) -> Result<(BaselineTask, PromptTemplate)> {
    let task = BaselineTask::parse(&config.task)?;
    let position = match config.prompt_position.as_str() {
        "begin" => PromptPosition::Begin,
        "mid" => PromptPosition::Mid,
        other => {
            return Err(CliError::Validation(format!(
                "unknown prompt_position {other:?} (expected begin/mid)"
            )))
        }
    };
    let template = match (task, config.prompt_style.as_str()) {
        (BaselineTask::VqaClosed, "natural") => PromptTemplate::vqa_natural(),
        (BaselineTask::VqaClosed, "context") => {
            PromptTemplate::vqa_context(config.context_len, position)?
        }
        (BaselineTask::Classification, "natural") => PromptTemplate::classification_natural(),
        (BaselineTask::Classification, "context") => {
            PromptTemplate::classification_context(config.context_len)?
        }
        (BaselineTask::Entailment, "natural") => PromptTemplate::entailment_natural(),
        (BaselineTask::Entailment, "context") => {
            PromptTemplate::entailment_context_plus(config.context_len)?
        }
        (_, other) => {
            return Err(CliError::Validation(format!(
                "unknown prompt_style {other:?} (expected natural/context)"
            )))
        }
    };
    Ok((task, template))
}

fn cmd_finetune(common: &Common, checkpoint: &Path) -> Result<()> {
    let config = load_config(common)?;
    let vocab = build_vocab();
    let ckpt = load_checkpoint(checkpoint)?;
    let params = ckpt.to_params(vocab.len())?;
    let (task, template) = template_from_config(&config)?;

    let corpus = generate_corpus(common.seed, config.corpus_size, TaskMix::default(), &vocab)?;
    let mut instances = Vec::new();
    for ex in &corpus {
        let slots = match task {
            BaselineTask::VqaClosed => ex.qa.as_ref().map(|(q, a)| SlotValues {
                question: Some(q.as_str()),
                answer: Some(a.as_str()),
                ..Default::default()
            }),
            BaselineTask::Classification => ex.class_label.as_ref().map(|label| SlotValues {
                answer: Some(label.as_str()),
                ..Default::default()
            }),
            BaselineTask::Entailment => ex.entailment.as_ref().map(|(h, l)| SlotValues {
                sentence: Some(h.as_str()),
                answer: Some(l.name()),
                ..Default::default()
            }),
        };
        if let Some(slots) = slots {
            let rendered = render_prompt(&template, &vocab, slots, RenderMode::Train, config.max_len)?;
            instances.push((ex.image.clone(), rendered));
        }
    }

    let optimizer = AdamW::new(config.adam_config(), &params);
    let mut state = TrainState {
        params,
        optimizer,
        rng: Rng::new(common.seed).derive(2),
        step: 0,
        metrics: Vec::new(),
    };
    let freeze = freeze_from_config(&config)?;
    let last = finetune_steps(
        &mut state,
        &instances,
        &config,
        &freeze,
        MaskKind::Bidirectional,
        config.steps,
    )?;

    ensure_out(&common.out)?;
    let out_path = common.out.join("finetuned.ckpt");
    let out_ckpt = Checkpoint::capture(
        &config,
        &state.params,
        Some(&state.optimizer),
        &state.rng,
        state.step,
    );
    save_checkpoint(&out_path, &out_ckpt)?;
    println!(
        "fine-tuned {} steps (final batch loss {:.4}) -> {}",
        state.step,
        last.unwrap_or(f64::NAN),
        out_path.display()
    );
    Ok(())
}

fn cmd_decode(common: &Common, checkpoint: &Path) -> Result<()> {
    let config = load_config(common)?;
    let vocab = build_vocab();
    let ckpt = load_checkpoint(checkpoint)?;
    let params = ckpt.to_params(vocab.len())?;
    let n = 16usize.min(config.corpus_size.max(1));
    let eval = heldout(&config, common.seed, n, &vocab)?;
    let dcfg = DecodeConfig {
        beam_size: config.beam_size,
        max_len: config.decode_max_len.min(ckpt.config.max_len),
        length_normalize: config.length_normalize,
    };
    let mut report = String::from("index\tscore\thypothesis\treference\n");
    for (i, ex) in eval.iter().enumerate() {
        let out = decode(&ex.image, &cls_prefix(), &params, &dcfg)?;
        let text = vocab.detokenize(&TokenSequence::from_ids(out.ids));
        report.push_str(&format!("{i}\t{:.4}\t{text}\t{}\n", out.score, ex.caption));
    }
    ensure_out(&common.out)?;
    let path = common.out.join("decoded.tsv");
    write_text(&path, &report)?;
    print!("{report}");
    Ok(())
}

fn cmd_retrieve(common: &Common, checkpoint: &Path) -> Result<()> {
    let config = load_config(common)?;
    let vocab = build_vocab();
    let ckpt = load_checkpoint(checkpoint)?;
    let params = ckpt.to_params(vocab.len())?;
    let n = 32usize.min(config.corpus_size.max(2));
    let eval = heldout(&config, common.seed, n, &vocab)?;
    let images: Vec<Tensor<f32>> = eval.iter().map(|e| e.image.clone()).collect();
    let captions: Vec<TokenSequence> = eval.iter().map(|e| e.caption_tokens.clone()).collect();
    let rcfg = RetrievalConfig {
        top_k: config.top_k.min(n),
    };
    let ranked = retrieve_texts(&images, &captions, &params, &rcfg)?;
    let truth: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut report = String::from("metric\tvalue\n");
    for k in [1usize, 5, 10] {
        if k <= n {
            report.push_str(&format!("R@{k}\t{:.4}\n", recall_at_k(&ranked, &truth, k)?));
        }
    }
    ensure_out(&common.out)?;
    write_text(&common.out.join("retrieval.tsv"), &report)?;
    print!("{report}");
    Ok(())
}

fn cmd_eval(common: &Common, checkpoint: &Path) -> Result<()> {
    let config = load_config(common)?;
    let vocab = build_vocab();
    let ckpt = load_checkpoint(checkpoint)?;
    let params = ckpt.to_params(vocab.len())?;
    let n = 16usize.min(config.corpus_size.max(2));
    let eval = heldout(&config, common.seed, n, &vocab)?;

    let ce = mean_caption_ce(&eval, &params)?;
    let acc = masked_token_accuracy(&eval, &params)?;
    let images: Vec<Tensor<f32>> = eval.iter().map(|e| e.image.clone()).collect();
    let captions: Vec<TokenSequence> = eval.iter().map(|e| e.caption_tokens.clone()).collect();
    let rcfg = RetrievalConfig {
        top_k: config.top_k.min(n),
    };
    let ranked = retrieve_texts(&images, &captions, &params, &rcfg)?;
    let truth: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let r1 = recall_at_k(&ranked, &truth, 1)?;

    // Discriminative comparator on the same split.
    let (answers, _) = build_answer_lists(&eval, 1.max(3.min(n)))
        .or_else(|_| build_answer_lists(&eval, 1))?;
    let labels = task_labels(BaselineTask::VqaClosed, &answers);
    let lc = linear_classifier_baseline(
        &params,
        BaselineTask::VqaClosed,
        &labels,
        &eval,
        &eval,
        &vocab,
        50,
        0.5,
    )
    .map(|(_, _, acc)| acc)
    .unwrap_or(f64::NAN);

    let mut report = String::from("metric\tvalue\n");
    report.push_str(&format!("caption_ce\t{ce:.4}\n"));
    report.push_str(&format!("masked_token_accuracy\t{acc:.4}\n"));
    report.push_str(&format!("retrieval_r1\t{r1:.4}\n"));
    report.push_str(&format!("linear_vqa_accuracy\t{lc:.4}\n"));
    ensure_out(&common.out)?;
    write_text(&common.out.join("eval.tsv"), &report)?;
    print!("{report}");
    Ok(())
}

fn cmd_study(common: &Common, kind: &str) -> Result<()> {
    let config = load_config(common)?;
    let report = run_study(kind, &config, common.seed)?;
    ensure_out(&common.out)?;
    let path = common.out.join(format!("study_{kind}.tsv"));
    write_text(&path, &report)?;
    print!("{report}");
    Ok(())
}

fn run() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData { common } => cmd_gen_data(common),
        Command::Pretrain { common, resume } => cmd_pretrain(common, resume.as_deref()),
        Command::Finetune { common, checkpoint } => cmd_finetune(common, checkpoint),
        Command::Decode { common, checkpoint } => cmd_decode(common, checkpoint),
        Command::Retrieve { common, checkpoint } => cmd_retrieve(common, checkpoint),
        Command::Eval { common, checkpoint } => cmd_eval(common, checkpoint),
        Command::Study { common, kind } => cmd_study(common, kind),
    }
}

fn main() {
    if let Err(e) = run() {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}

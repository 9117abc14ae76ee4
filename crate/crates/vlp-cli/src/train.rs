//! Pretraining and fine-tuning loops.
//!
//! A loop owns a [`TrainState`] (parameters, optimizer, rng, step count)
//! and is fully deterministic: the batch schedule, the masking draws and
//! the optimizer trajectory depend only on the state, so resuming from a
//! checkpoint reproduces an uninterrupted run bitwise.

use vlp_core::corpus::PairedExample;
use vlp_core::encoders::MaskKind;
use vlp_core::objectives::{pretrain_step, MaskMixPolicy, StepMetrics};
use vlp_core::optim::AdamW;
use vlp_core::params::{FreezeSpec, Params};
use vlp_core::prompting::{finetune_step, RenderedPrompt};
use vlp_core::{Graph, Rng, Tensor};

use crate::configfile::RunConfig;
use crate::error::{CliError, Result};

/// Everything that evolves during training.
pub struct TrainState {
    pub params: Params<f32>,
    pub optimizer: AdamW<f32>,
    pub rng: Rng,
    pub step: u64,
    /// One metrics line per completed step.
    pub metrics: Vec<String>,
}

impl TrainState {
    /// Fresh state: seeded initialization, zero moments, step 0. The
    /// parameter init and the training stream use decorrelated rngs
    /// derived from the same seed.
    pub fn fresh(config: &RunConfig, vocab: usize, seed: u64) -> Result<TrainState> {
        let enc = config.encoder_config(vocab);
        let params = Params::init(&enc, seed)?;
        let optimizer = AdamW::new(config.adam_config(), &params);
        Ok(TrainState {
            params,
            optimizer,
            rng: Rng::new(seed).derive(1),
            step: 0,
            metrics: Vec::new(),
        })
    }
}

/// Header naming the metrics-line fields.
pub const METRICS_HEADER: &str = "# step, L_itc, L_mlm, L_itm, causal_frac";

fn metrics_line(step: u64, m: &StepMetrics) -> String {
    format!(
        "{}, {:.6}, {:.6}, {:.6}, {:.6}",
        step, m.itc, m.mlm, m.itm, m.causal_frac
    )
}

/// Effective learning rate under linear warmup.
fn warmed_lr(base: f64, warmup: u64, step: u64) -> f64 {
    if warmup == 0 || step >= warmup {
        base
    } else {
        base * (step + 1) as f64 / warmup as f64
    }
}

/// Run `steps` pretraining steps in place. Returns the metrics of the
/// last completed step. Batches are drawn with replacement from the
/// corpus; a non-finite loss or gradient aborts with a numeric error and
/// leaves the state at the last good step.
pub fn pretrain_steps(
    state: &mut TrainState,
    corpus: &[PairedExample],
    config: &RunConfig,
    steps: u64,
) -> Result<Option<StepMetrics>> {
    if corpus.is_empty() {
        return Err(CliError::Validation("corpus must be non-empty".into()));
    }
    if config.batch_size < 2 {
        return Err(CliError::Validation(
            "pretraining needs batch_size >= 2".into(),
        ));
    }
    let policy = MaskMixPolicy::new(config.p_causal)?;
    let mut last = None;
    for _ in 0..steps {
        // Distinct examples per batch when the corpus allows it: the
        // matching loss labels duplicated examples as mismatched pairs,
        // which would poison its targets. Falls back to sampling with
        // replacement for corpora smaller than a batch.
        let n = corpus.len();
        let batch: Vec<PairedExample> = if config.batch_size <= n {
            let mut idx: Vec<usize> = (0..n).collect();
            for i in 0..config.batch_size {
                let j = i + state.rng.below(n - i);
                idx.swap(i, j);
            }
            idx[..config.batch_size].iter().map(|&i| corpus[i].clone()).collect()
        } else {
            (0..config.batch_size)
                .map(|_| corpus[state.rng.below(n)].clone())
                .collect()
        };
        let mut g: Graph<f32> = Graph::new();
        let bound = state.params.bind(&mut g);
        let (loss, metrics) = pretrain_step(
            &mut g,
            &batch,
            &state.params,
            &bound,
            policy,
            config.mask_prob,
            config.temperature,
            &mut state.rng,
        )?;
        if !metrics.total.is_finite() {
            return Err(CliError::Numeric(format!(
                "non-finite loss at step {}",
                state.step + 1
            )));
        }
        g.backward(loss)?;
        let grads = bound.grads(&g, &state.params);
        state.optimizer.config.lr = warmed_lr(config.lr, config.warmup_steps, state.step);
        state
            .optimizer
            .apply(&mut state.params, &grads, &FreezeSpec::ALL)?;
        state.step += 1;
        state.metrics.push(metrics_line(state.step, &metrics));
        last = Some(metrics);
    }
    Ok(last)
}

/// The trainable-component set named by the config's `trainable` key
/// (comma list of ve/te/me/heads/ctx); empty means everything.
pub fn freeze_from_config(config: &RunConfig) -> Result<FreezeSpec> {
    freeze_from_list(&config.trainable)
}

pub fn freeze_from_list(list: &str) -> Result<FreezeSpec> {
    if list.trim().is_empty() {
        return Ok(FreezeSpec::ALL);
    }
    let mut spec = FreezeSpec {
        visual: false,
        text: false,
        multimodal: false,
        heads: false,
        ctx_embeddings: false,
    };
    for part in list.split(',') {
        spec.enable(part.trim())?;
    }
    spec.validate()?;
    Ok(spec)
}

/// Run `steps` fine-tuning steps over rendered prompt examples, updating
/// only the components allowed by `freeze`. The loss is the masked-answer
/// cross-entropy of [`finetune_step`].
pub fn finetune_steps(
    state: &mut TrainState,
    examples: &[(Tensor<f32>, RenderedPrompt)],
    config: &RunConfig,
    freeze: &FreezeSpec,
    kind: MaskKind,
    steps: u64,
) -> Result<Option<f64>> {
    if examples.is_empty() {
        return Err(CliError::Validation(
            "fine-tuning set must be non-empty".into(),
        ));
    }
    let batch_size = config.batch_size.max(1).min(examples.len());
    let mut last = None;
    for _ in 0..steps {
        let batch: Vec<(Tensor<f32>, RenderedPrompt)> = (0..batch_size)
            .map(|_| examples[state.rng.below(examples.len())].clone())
            .collect();
        let mut g: Graph<f32> = Graph::new();
        let bound = state.params.bind(&mut g);
        let loss = finetune_step(&mut g, &batch, kind, &state.params, &bound)?;
        let value = g.value(loss).item() as f64;
        if !value.is_finite() {
            return Err(CliError::Numeric(format!(
                "non-finite loss at step {}",
                state.step + 1
            )));
        }
        g.backward(loss)?;
        let grads = bound.grads(&g, &state.params);
        state.optimizer.config.lr = warmed_lr(config.lr, config.warmup_steps, state.step);
        state.optimizer.apply(&mut state.params, &grads, freeze)?;
        state.step += 1;
        last = Some(value);
    }
    Ok(last)
}

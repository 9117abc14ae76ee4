//! Plain `key = value` run configuration.
//!
//! One key per line; `#` starts a comment; unknown keys are rejected so
//! typos fail loudly. The same text format is embedded in checkpoints,
//! which makes a checkpoint self-describing.

use std::path::Path;

use vlp_core::EncoderConfig;

use crate::error::{CliError, Result};

/// Everything a run needs beyond the CLI arguments. Field groups mirror
/// the library types they configure: the encoder architecture, the
/// optimizer, the pretraining objectives, decoding and retrieval.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    // Architecture (EncoderConfig).
    pub hidden: usize,
    pub n_heads: usize,
    pub layers_visual: usize,
    pub layers_text: usize,
    pub layers_mm: usize,
    pub patch: usize,
    pub channels: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub max_len: usize,
    pub mlp_ratio: usize,
    pub contrastive_dim: usize,
    pub ln_eps: f64,
    // Optimizer.
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    // Training.
    pub steps: u64,
    pub batch_size: usize,
    pub p_causal: f64,
    pub mask_prob: f64,
    pub temperature: f64,
    /// Extra checkpoint every this many steps; 0 = final checkpoint only.
    pub checkpoint_interval: u64,
    pub corpus_size: usize,
    /// Components left trainable during fine-tuning (comma list of
    /// ve/te/me/heads/ctx); empty = everything trainable.
    pub trainable: String,
    // Fine-tuning task selection.
    pub task: String,
    pub prompt_style: String,
    pub context_len: usize,
    pub prompt_position: String,
    pub answer_list_size: usize,
    // Decoding.
    pub beam_size: usize,
    pub decode_max_len: usize,
    pub length_normalize: bool,
    // Retrieval.
    pub top_k: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::default();
        RunConfig {
            hidden: enc.hidden,
            n_heads: enc.n_heads,
            layers_visual: enc.layers_visual,
            layers_text: enc.layers_text,
            layers_mm: enc.layers_mm,
            patch: enc.patch,
            channels: enc.channels,
            img_h: enc.img_h,
            img_w: enc.img_w,
            max_len: enc.max_len,
            mlp_ratio: enc.mlp_ratio,
            contrastive_dim: enc.contrastive_dim,
            ln_eps: enc.ln_eps,
            lr: 1e-4,
            weight_decay: 0.02,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
            steps: 100,
            batch_size: 32,
            p_causal: 0.5,
            mask_prob: 0.25,
            temperature: 0.07,
            checkpoint_interval: 0,
            corpus_size: 256,
            trainable: String::new(),
            task: "vqa".to_string(),
            prompt_style: "natural".to_string(),
            context_len: 16,
            prompt_position: "begin".to_string(),
            answer_list_size: 16,
            beam_size: 5,
            decode_max_len: 20,
            length_normalize: false,
            top_k: 16,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CliError::Validation(format!("bad value {value:?} for key {key:?}")))
}

impl RunConfig {
    /// Architecture section as a library config; the vocabulary size is
    /// supplied by the caller because it comes from the corpus lexicon.
    pub fn encoder_config(&self, vocab: usize) -> EncoderConfig {
        EncoderConfig {
            hidden: self.hidden,
            n_heads: self.n_heads,
            layers_visual: self.layers_visual,
            layers_text: self.layers_text,
            layers_mm: self.layers_mm,
            patch: self.patch,
            channels: self.channels,
            img_h: self.img_h,
            img_w: self.img_w,
            max_len: self.max_len,
            vocab,
            mlp_ratio: self.mlp_ratio,
            contrastive_dim: self.contrastive_dim,
            ln_eps: self.ln_eps,
        }
    }

    pub fn adam_config(&self) -> vlp_core::optim::AdamConfig {
        vlp_core::optim::AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    /// Apply one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "hidden" => self.hidden = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "layers_visual" => self.layers_visual = parse(key, value)?,
            "layers_text" => self.layers_text = parse(key, value)?,
            "layers_mm" => self.layers_mm = parse(key, value)?,
            "patch" => self.patch = parse(key, value)?,
            "channels" => self.channels = parse(key, value)?,
            "img_h" => self.img_h = parse(key, value)?,
            "img_w" => self.img_w = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "contrastive_dim" => self.contrastive_dim = parse(key, value)?,
            "ln_eps" => self.ln_eps = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "beta1" => self.beta1 = parse(key, value)?,
            "beta2" => self.beta2 = parse(key, value)?,
            "eps" => self.eps = parse(key, value)?,
            "warmup_steps" => self.warmup_steps = parse(key, value)?,
            "steps" => self.steps = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "p_causal" => self.p_causal = parse(key, value)?,
            "mask_prob" => self.mask_prob = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(key, value)?,
            "corpus_size" => self.corpus_size = parse(key, value)?,
            "trainable" => self.trainable = value.to_string(),
            "task" => self.task = value.to_string(),
            "prompt_style" => self.prompt_style = value.to_string(),
            "context_len" => self.context_len = parse(key, value)?,
            "prompt_position" => self.prompt_position = value.to_string(),
            "answer_list_size" => self.answer_list_size = parse(key, value)?,
            "beam_size" => self.beam_size = parse(key, value)?,
            "decode_max_len" => self.decode_max_len = parse(key, value)?,
            "length_normalize" => self.length_normalize = parse(key, value)?,
            "top_k" => self.top_k = parse(key, value)?,
            other => {
                return Err(CliError::Validation(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    /// Parse the full text of a config file on top of the defaults.
    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Validation(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        RunConfig::from_text(&text)
    }

    /// Canonical text form: every key, one per line, fixed order. Parsing
    /// this text reproduces the config exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        kv("hidden", self.hidden.to_string());
        kv("n_heads", self.n_heads.to_string());
        kv("layers_visual", self.layers_visual.to_string());
        kv("layers_text", self.layers_text.to_string());
        kv("layers_mm", self.layers_mm.to_string());
        kv("patch", self.patch.to_string());
        kv("channels", self.channels.to_string());
        kv("img_h", self.img_h.to_string());
        kv("img_w", self.img_w.to_string());
        kv("max_len", self.max_len.to_string());
        kv("mlp_ratio", self.mlp_ratio.to_string());
        kv("contrastive_dim", self.contrastive_dim.to_string());
        kv("ln_eps", format!("{:e}", self.ln_eps));
        kv("lr", format!("{:e}", self.lr));
        kv("weight_decay", format!("{:e}", self.weight_decay));
        kv("beta1", self.beta1.to_string());
        kv("beta2", self.beta2.to_string());
        kv("eps", format!("{:e}", self.eps));
        kv("warmup_steps", self.warmup_steps.to_string());
        kv("steps", self.steps.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("p_causal", self.p_causal.to_string());
        kv("mask_prob", self.mask_prob.to_string());
        kv("temperature", self.temperature.to_string());
        kv("checkpoint_interval", self.checkpoint_interval.to_string());
        kv("corpus_size", self.corpus_size.to_string());
        kv("trainable", self.trainable.clone());
        kv("task", self.task.clone());
        kv("prompt_style", self.prompt_style.clone());
        kv("context_len", self.context_len.to_string());
        kv("prompt_position", self.prompt_position.clone());
        kv("answer_list_size", self.answer_list_size.to_string());
        kv("beam_size", self.beam_size.to_string());
        kv("decode_max_len", self.decode_max_len.to_string());
        kv("length_normalize", self.length_normalize.to_string());
        kv("top_k", self.top_k.to_string());
        s
    }
}

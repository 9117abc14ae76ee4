use crate::error::{CoreError, Result};

/// Shared architecture configuration for the three encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    /// Hidden width.
    pub hidden: usize,
    pub n_heads: usize,
    /// Layer counts: visual / text / multimodal.
    pub layers_visual: usize,
    pub layers_text: usize,
    pub layers_mm: usize,
    /// Patch side.
    pub patch: usize,
    pub channels: usize,
    pub img_h: usize,
    pub img_w: usize,
    /// Max text length excluding [CLS] (a sequence holds up to max_len+1 positions).
    pub max_len: usize,
    /// Vocabulary size.
    pub vocab: usize,
    pub mlp_ratio: usize,
    /// Contrastive projection width.
    pub contrastive_dim: usize,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    /// Desk-scale configuration: seconds-scale training on one CPU core.
    fn default() -> Self {
        EncoderConfig {
            hidden: 64,
            n_heads: 4,
            layers_visual: 2,
            layers_text: 2,
            layers_mm: 2,
            patch: 8,
            channels: 3,
            img_h: 32,
            img_w: 32,
            max_len: 24,
            vocab: 0, // filled in from the vocabulary
            mlp_ratio: 4,
            contrastive_dim: 32,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// Number of image patches N = H·W / P².
    pub fn n_patches(&self) -> usize {
        (self.img_h / self.patch) * (self.img_w / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.n_heads == 0 || self.hidden % self.n_heads != 0 {
            return Err(CoreError::invalid(alloc::format!(
                "hidden {} must be a positive multiple of n_heads {}",
                self.hidden,
                self.n_heads
            )));
        }
        if self.patch == 0 || self.img_h % self.patch != 0 || self.img_w % self.patch != 0 {
            return Err(CoreError::invalid(alloc::format!(
                "image {}x{} not divisible by patch {}",
                self.img_h,
                self.img_w,
                self.patch
            )));
        }
        if self.vocab == 0 {
            return Err(CoreError::invalid("vocab size not set"));
        }
        if self.contrastive_dim == 0 || self.max_len == 0 {
            return Err(CoreError::invalid("contrastive_dim and max_len must be > 0"));
        }
        Ok(())
    }
}

//! Learnable parameters of the three encoders plus heads, stored as a flat
//! named-tensor table with typed indices. The flat table drives the
//! optimizer, freezing and checkpoints; the indices drive the forward pass.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::config::EncoderConfig;
use crate::error::{CoreError, Result};
use crate::float::Float;
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vocab::{CTX_BASE, NUM_CTX};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct LinearIdx {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LnIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnIdx {
    pub q: LinearIdx,
    pub k: LinearIdx,
    pub v: LinearIdx,
    pub o: LinearIdx,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpIdx {
    pub fc1: LinearIdx,
    pub fc2: LinearIdx,
}

/// Pre-LN block: LN before each sublayer, no LN on the residual path.
#[derive(Clone, Copy, Debug)]
pub struct VisualLayerIdx {
    pub ln1: LnIdx,
    pub attn: AttnIdx,
    pub ln2: LnIdx,
    pub mlp: MlpIdx,
}

/// Post-LN block: LN applied to each sublayer output before the residual add.
#[derive(Clone, Copy, Debug)]
pub struct TextLayerIdx {
    pub attn: AttnIdx,
    pub ln1: LnIdx,
    pub mlp: MlpIdx,
    pub ln2: LnIdx,
}

/// Post-LN block with an extra cross-attention step.
#[derive(Clone, Copy, Debug)]
pub struct MmLayerIdx {
    pub self_attn: AttnIdx,
    pub ln1: LnIdx,
    pub cross_attn: AttnIdx,
    pub ln2: LnIdx,
    pub mlp: MlpIdx,
    pub ln3: LnIdx,
}

#[derive(Clone, Debug)]
pub struct Arch {
    pub patch_proj: LinearIdx,
    pub v_cls: usize,
    pub v_pos: usize,
    pub v_layers: Vec<VisualLayerIdx>,
    pub embed: usize,
    pub t_pos: usize,
    pub t_layers: Vec<TextLayerIdx>,
    pub m_layers: Vec<MmLayerIdx>,
    /// Contrastive projections [H × d_c].
    pub itc_img: usize,
    pub itc_txt: usize,
    /// Matching head [H × 2] + bias.
    pub itm: LinearIdx,
    /// Vocabulary head [H × V] + bias, untied from the embedding.
    pub mlm: LinearIdx,
}

/// All learnable parameters, flat and named.
#[derive(Clone, Debug)]
pub struct Params<F: Float> {
    pub config: EncoderConfig,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<F>>,
    pub arch: Arch,
}

struct Builder<F: Float> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    rng: Rng,
}

impl<F: Float> Builder<F> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let data = (0..rows * cols)
            .map(|_| F::from_f64(self.rng.trunc_normal(INIT_STD)))
            .collect();
        self.names.push(name);
        self.tensors
            .push(Tensor::matrix(rows, cols, data).expect("builder shapes are consistent"));
        self.tensors.len() - 1
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.names.push(name);
        self.tensors.push(Tensor::zeros(alloc::vec![rows, cols]));
        self.tensors.len() - 1
    }

    fn ones(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.names.push(name);
        self.tensors.push(Tensor::full(alloc::vec![rows, cols], F::ONE));
        self.tensors.len() - 1
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) -> LinearIdx {
        LinearIdx {
            w: self.weight(alloc::format!("{prefix}.w"), din, dout),
            b: self.zeros(alloc::format!("{prefix}.b"), 1, dout),
        }
    }

    fn ln(&mut self, prefix: &str, dim: usize) -> LnIdx {
        LnIdx {
            gain: self.ones(alloc::format!("{prefix}.gain"), 1, dim),
            bias: self.zeros(alloc::format!("{prefix}.bias"), 1, dim),
        }
    }

    fn attn(&mut self, prefix: &str, h: usize) -> AttnIdx {
        AttnIdx {
            q: self.linear(&alloc::format!("{prefix}.q"), h, h),
            k: self.linear(&alloc::format!("{prefix}.k"), h, h),
            v: self.linear(&alloc::format!("{prefix}.v"), h, h),
            o: self.linear(&alloc::format!("{prefix}.o"), h, h),
        }
    }

    fn mlp(&mut self, prefix: &str, h: usize, ratio: usize) -> MlpIdx {
        MlpIdx {
            fc1: self.linear(&alloc::format!("{prefix}.fc1"), h, h * ratio),
            fc2: self.linear(&alloc::format!("{prefix}.fc2"), h * ratio, h),
        }
    }
}

impl<F: Float> Params<F> {
    /// Truncated-normal weights (std 0.02), zero biases, unit LN gains.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let h = config.hidden;
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: Rng::new(seed),
        };

        let patch_proj = b.linear("visual.patch_proj", config.patch_dim(), h);
        let v_cls = b.weight("visual.cls".into(), 1, h);
        let v_pos = b.weight("visual.pos".into(), config.n_patches() + 1, h);
        let v_layers = (0..config.layers_visual)
            .map(|i| VisualLayerIdx {
                ln1: b.ln(&alloc::format!("visual.layer{i}.ln1"), h),
                attn: b.attn(&alloc::format!("visual.layer{i}.attn"), h),
                ln2: b.ln(&alloc::format!("visual.layer{i}.ln2"), h),
                mlp: b.mlp(&alloc::format!("visual.layer{i}.mlp"), h, config.mlp_ratio),
            })
            .collect();

        let embed = b.weight("text.embed".into(), config.vocab, h);
        let t_pos = b.weight("text.pos".into(), config.max_len + 1, h);
        let t_layers = (0..config.layers_text)
            .map(|i| TextLayerIdx {
                attn: b.attn(&alloc::format!("text.layer{i}.attn"), h),
                ln1: b.ln(&alloc::format!("text.layer{i}.ln1"), h),
                mlp: b.mlp(&alloc::format!("text.layer{i}.mlp"), h, config.mlp_ratio),
                ln2: b.ln(&alloc::format!("text.layer{i}.ln2"), h),
            })
            .collect();

        let m_layers = (0..config.layers_mm)
            .map(|i| MmLayerIdx {
                self_attn: b.attn(&alloc::format!("mm.layer{i}.self_attn"), h),
                ln1: b.ln(&alloc::format!("mm.layer{i}.ln1"), h),
                cross_attn: b.attn(&alloc::format!("mm.layer{i}.cross_attn"), h),
                ln2: b.ln(&alloc::format!("mm.layer{i}.ln2"), h),
                mlp: b.mlp(&alloc::format!("mm.layer{i}.mlp"), h, config.mlp_ratio),
                ln3: b.ln(&alloc::format!("mm.layer{i}.ln3"), h),
            })
            .collect();

        let itc_img = b.weight("head.itc_img.w".into(), h, config.contrastive_dim);
        let itc_txt = b.weight("head.itc_txt.w".into(), h, config.contrastive_dim);
        let itm = b.linear("head.itm", h, 2);
        let mlm = b.linear("head.mlm", h, config.vocab);

        Ok(Params {
            config: config.clone(),
            names: b.names,
            tensors: b.tensors,
            arch: Arch {
                patch_proj,
                v_cls,
                v_pos,
                v_layers,
                embed,
                t_pos,
                t_layers,
                m_layers,
                itc_img,
                itc_txt,
                itm,
                mlm,
            },
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn by_name(&self) -> BTreeMap<&str, usize> {
        self.names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect()
    }

    pub fn cast<G: Float>(&self) -> Params<G> {
        Params {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            arch: self.arch.clone(),
        }
    }

    /// Register every parameter as a trainable leaf on a fresh tape.
    pub fn bind(&self, graph: &mut Graph<F>) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| graph.leaf(t.clone()))
            .collect();
        Bound { vars }
    }
}

/// Tape handles for one forward/backward pass, parallel to `Params.tensors`.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    /// Collect gradients back into a table parallel to the parameters.
    /// Parameters the loss never touched get zero gradients.
    pub fn grads<F: Float>(&self, graph: &Graph<F>, params: &Params<F>) -> Vec<Tensor<F>> {
        self.vars
            .iter()
            .enumerate()
            .map(|(i, &v)| match graph.grad(v) {
                Some(g) => g.clone(),
                None => Tensor::zeros(params.tensors[i].shape.clone()),
            })
            .collect()
    }
}

/// Which rows of a parameter tensor may move during fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowFilter {
    All,
    None,
    /// Only the [CTX] block of the embedding.
    CtxRows,
    /// Everything but the [CTX] block.
    NonCtxRows,
}

impl RowFilter {
    pub fn allows(self, row: usize) -> bool {
        let ctx = (CTX_BASE as usize..CTX_BASE as usize + NUM_CTX).contains(&row);
        match self {
            RowFilter::All => true,
            RowFilter::None => false,
            RowFilter::CtxRows => ctx,
            RowFilter::NonCtxRows => !ctx,
        }
    }
}

/// Trainable-component set. Unset components are frozen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreezeSpec {
    pub visual: bool,
    pub text: bool,
    pub multimodal: bool,
    pub heads: bool,
    /// The [CTX] rows of the word embedding, independent of `text`.
    pub ctx_embeddings: bool,
}

impl FreezeSpec {
    pub const ALL: FreezeSpec = FreezeSpec {
        visual: true,
        text: true,
        multimodal: true,
        heads: true,
        ctx_embeddings: true,
    };

    pub fn only(component: &str) -> Result<FreezeSpec> {
        let mut s = FreezeSpec {
            visual: false,
            text: false,
            multimodal: false,
            heads: false,
            ctx_embeddings: false,
        };
        s.enable(component)?;
        Ok(s)
    }

    pub fn enable(&mut self, component: &str) -> Result<()> {
        match component {
            "ve" | "visual" => self.visual = true,
            "te" | "text" => self.text = true,
            "me" | "multimodal" => self.multimodal = true,
            "heads" => self.heads = true,
            "ctx" | "ctx_embeddings" => self.ctx_embeddings = true,
            other => {
                return Err(CoreError::invalid(alloc::format!(
                    "unknown component {other:?} (expected ve/te/me/heads/ctx)"
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.visual || self.text || self.multimodal || self.heads || self.ctx_embeddings) {
            return Err(CoreError::invalid("freeze spec leaves nothing trainable"));
        }
        Ok(())
    }

    /// Row-level trainability of a parameter, by name.
    pub fn filter(&self, name: &str) -> RowFilter {
        if name == "text.embed" {
            return match (self.text, self.ctx_embeddings) {
                (true, true) => RowFilter::All,
                (true, false) => RowFilter::NonCtxRows,
                (false, true) => RowFilter::CtxRows,
                (false, false) => RowFilter::None,
            };
        }
        let trainable = if name.starts_with("visual.") {
            self.visual
        } else if name.starts_with("text.") {
            self.text
        } else if name.starts_with("mm.") {
            self.multimodal
        } else {
            self.heads
        };
        if trainable {
            RowFilter::All
        } else {
            RowFilter::None
        }
    }
}

/// Weight-decay eligibility: projection matrices only; no decay on LN
/// parameters, biases, embeddings, positions or the class token.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w") && name != "text.embed"
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            vocab: 50,
            ..EncoderConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic_and_named() {
        let cfg = tiny_config();
        let a: Params<f32> = Params::init(&cfg, 1).unwrap();
        let b: Params<f32> = Params::init(&cfg, 1).unwrap();
        assert_eq!(a.tensors, b.tensors);
        assert_eq!(a.names.len(), a.tensors.len());
        // names unique
        let set: alloc::collections::BTreeSet<_> = a.names.iter().collect();
        assert_eq!(set.len(), a.names.len());
    }

    #[test]
    fn shapes_follow_config() {
        let cfg = tiny_config();
        let p: Params<f32> = Params::init(&cfg, 2).unwrap();
        assert_eq!(
            p.tensors[p.arch.patch_proj.w].shape,
            alloc::vec![cfg.patch_dim(), cfg.hidden]
        );
        assert_eq!(
            p.tensors[p.arch.v_pos].shape,
            alloc::vec![cfg.n_patches() + 1, cfg.hidden]
        );
        assert_eq!(
            p.tensors[p.arch.embed].shape,
            alloc::vec![cfg.vocab, cfg.hidden]
        );
        assert_eq!(
            p.tensors[p.arch.mlm.w].shape,
            alloc::vec![cfg.hidden, cfg.vocab]
        );
    }

    #[test]
    fn freeze_filters() {
        let spec = FreezeSpec::only("ctx").unwrap();
        assert_eq!(spec.filter("text.embed"), RowFilter::CtxRows);
        assert_eq!(spec.filter("text.pos"), RowFilter::None);
        assert_eq!(spec.filter("visual.cls"), RowFilter::None);
        let ve = FreezeSpec::only("ve").unwrap();
        assert_eq!(ve.filter("visual.layer0.attn.q.w"), RowFilter::All);
        assert_eq!(ve.filter("head.mlm.w"), RowFilter::None);
        assert!(FreezeSpec {
            visual: false,
            text: false,
            multimodal: false,
            heads: false,
            ctx_embeddings: false
        }
        .validate()
        .is_err());
    }

    #[test]
    fn decay_excludes_norms_biases_embeddings() {
        assert!(decays("visual.layer0.attn.q.w"));
        assert!(decays("head.mlm.w"));
        assert!(!decays("text.embed"));
        assert!(!decays("text.pos"));
        assert!(!decays("visual.layer0.ln1.gain"));
        assert!(!decays("head.mlm.b"));
        assert!(!decays("visual.cls"));
    }
}

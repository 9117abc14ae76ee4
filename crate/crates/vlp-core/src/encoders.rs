//! The three-encoder architecture: pre-LN visual encoder, post-LN text
//! encoder, multimodal encoder with cross-attention, and attention-mask
//! construction.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::float::Float;
use crate::graph::{Graph, Var, MASK_BLOCK};
use crate::params::{AttnIdx, Bound, LnIdx, MlpIdx, Params};
use crate::tensor::Tensor;
use crate::vocab::TokenSequence;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Bidirectional,
    /// Lower-triangular visibility: token i attends to j <= i.
    Causal,
}

/// Additive [L×L] attention mask: 0 where visible, a large negative
/// constant where blocked. Both kinds block pad columns.
pub fn build_attention_mask<F: Float>(kind: MaskKind, visible: &[bool]) -> Tensor<F> {
    let l = visible.len();
    let block = F::from_f64(MASK_BLOCK);
    let mut data = vec![F::ZERO; l * l];
    for i in 0..l {
        for j in 0..l {
            let ok = visible[j] && (kind == MaskKind::Bidirectional || j <= i);
            if !ok {
                data[i * l + j] = block;
            }
        }
    }
    Tensor {
        shape: vec![l, l],
        data,
    }
}

/// All-visible single broadcast row, for cross-attention over the image.
fn open_mask<F: Float>(len: usize) -> Tensor<F> {
    Tensor::zeros(vec![1, len])
}

/// [C, H, W] image -> [N, P²·C] patch matrix. Patches run row-major over
/// the grid; within a patch the order is channel-major, then pixel rows.
pub fn patchify<F: Float>(image: &Tensor<F>, patch: usize) -> Result<Tensor<F>> {
    if image.shape.len() != 3 {
        return Err(CoreError::invalid(alloc::format!(
            "patchify expects [C, H, W], got {:?}",
            image.shape
        )));
    }
    let (c, h, w) = (image.shape[0], image.shape[1], image.shape[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(CoreError::ShapeMismatch {
            op: "patchify",
            lhs: image.shape.clone(),
            rhs: vec![patch, patch],
        });
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = patch * patch * c;
    let mut data = Vec::with_capacity(gh * gw * pd);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let (y, x) = (py * patch + dy, px * patch + dx);
                        data.push(image.data[ch * h * w + y * w + x]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![gh * gw, pd], data)
}

/// Inverse of [`patchify`]; exact reconstruction.
pub fn unpatchify<F: Float>(
    patches: &Tensor<F>,
    channels: usize,
    img_h: usize,
    img_w: usize,
    patch: usize,
) -> Result<Tensor<F>> {
    let (n, pd) = patches.dims2()?;
    let (gh, gw) = (img_h / patch, img_w / patch);
    if n != gh * gw || pd != patch * patch * channels {
        return Err(CoreError::ShapeMismatch {
            op: "unpatchify",
            lhs: patches.shape.clone(),
            rhs: vec![gh * gw, patch * patch * channels],
        });
    }
    let mut data = vec![F::ZERO; channels * img_h * img_w];
    for py in 0..gh {
        for px in 0..gw {
            let row = patches.row(py * gw + px);
            let mut k = 0;
            for ch in 0..channels {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let (y, x) = (py * patch + dy, px * patch + dx);
                        data[ch * img_h * img_w + y * img_w + x] = row[k];
                        k += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![channels, img_h, img_w], data)
}

fn linear<F: Float>(
    g: &mut Graph<F>,
    x: Var,
    idx: crate::params::LinearIdx,
    bound: &Bound,
) -> Result<Var> {
    let y = g.matmul(x, bound.var(idx.w))?;
    g.add_row(y, bound.var(idx.b))
}

fn layer_norm<F: Float>(
    g: &mut Graph<F>,
    x: Var,
    idx: LnIdx,
    bound: &Bound,
    eps: F,
) -> Result<Var> {
    g.layer_norm(x, bound.var(idx.gain), bound.var(idx.bias), eps)
}

/// Multi-head attention with queries from `x` and keys/values from `kv`.
/// `mask` rows follow the query axis.
fn attention<F: Float>(
    g: &mut Graph<F>,
    x: Var,
    kv: Var,
    idx: AttnIdx,
    bound: &Bound,
    n_heads: usize,
    mask: &Tensor<F>,
) -> Result<Var> {
    let h = g.value(x).dims2()?.1;
    let dh = h / n_heads;
    let scale = F::from_f64(1.0 / libm::sqrt(dh as f64));
    let q = linear(g, x, idx.q, bound)?;
    let k = linear(g, kv, idx.k, bound)?;
    let v = linear(g, kv, idx.v, bound)?;
    let mut heads = Vec::with_capacity(n_heads);
    for head in 0..n_heads {
        let qh = g.slice_cols(q, head * dh, dh)?;
        let kh = g.slice_cols(k, head * dh, dh)?;
        let vh = g.slice_cols(v, head * dh, dh)?;
        let kht = g.transpose(kh)?;
        let scores = g.matmul(qh, kht)?;
        let scores = g.scale(scores, scale);
        let probs = g.masked_softmax(scores, mask)?;
        heads.push(g.matmul(probs, vh)?);
    }
    let merged = g.concat_cols(&heads)?;
    linear(g, merged, idx.o, bound)
}

fn mlp<F: Float>(g: &mut Graph<F>, x: Var, idx: MlpIdx, bound: &Bound) -> Result<Var> {
    let hidden = linear(g, x, idx.fc1, bound)?;
    let act = g.gelu(hidden);
    linear(g, act, idx.fc2, bound)
}

/// Visual encoder: patch embedding + class token + positions, then pre-LN
/// residual blocks. Output row 0 is the visual [CLS] state. Image
/// attention is always bidirectional.
pub fn encode_image<F: Float>(
    g: &mut Graph<F>,
    image: &Tensor<F>,
    params: &Params<F>,
    bound: &Bound,
) -> Result<Var> {
    let cfg = &params.config;
    let patches = patchify(image, cfg.patch)?;
    let n = patches.shape[0];
    let patches = g.constant(patches);
    let projected = linear(g, patches, params.arch.patch_proj, bound)?;
    let z0 = g.concat_rows(&[bound.var(params.arch.v_cls), projected])?;
    let mut z = g.add(z0, bound.var(params.arch.v_pos))?;
    let eps = F::from_f64(cfg.ln_eps);
    let mask = open_mask::<F>(n + 1);
    for layer in &params.arch.v_layers {
        let normed = layer_norm(g, z, layer.ln1, bound, eps)?;
        let attn_out = attention(g, normed, normed, layer.attn, bound, cfg.n_heads, &mask)?;
        let z_mid = g.add(attn_out, z)?;
        let normed2 = layer_norm(g, z_mid, layer.ln2, bound, eps)?;
        let mlp_out = mlp(g, normed2, layer.mlp, bound)?;
        z = g.add(mlp_out, z_mid)?;
    }
    Ok(z)
}

/// Text encoder: word embedding + positions, then post-LN residual blocks
/// (LN on each sublayer output, residual added after).
pub fn encode_text<F: Float>(
    g: &mut Graph<F>,
    seq: &TokenSequence,
    kind: MaskKind,
    params: &Params<F>,
    bound: &Bound,
) -> Result<Var> {
    let cfg = &params.config;
    let l = seq.len();
    if l == 0 {
        return Err(CoreError::invalid("empty token sequence"));
    }
    if l > cfg.max_len + 1 {
        return Err(CoreError::invalid(alloc::format!(
            "sequence length {l} exceeds max {}",
            cfg.max_len + 1
        )));
    }
    let ids: Vec<usize> = seq.ids.iter().map(|&id| id as usize).collect();
    let embedded = g.gather_rows(bound.var(params.arch.embed), &ids)?;
    let positions: Vec<usize> = (0..l).collect();
    let pos = g.gather_rows(bound.var(params.arch.t_pos), &positions)?;
    let mut p = g.add(embedded, pos)?;
    let eps = F::from_f64(cfg.ln_eps);
    let mask = build_attention_mask::<F>(kind, &seq.visible);
    for layer in &params.arch.t_layers {
        let attn_out = attention(g, p, p, layer.attn, bound, cfg.n_heads, &mask)?;
        let normed = layer_norm(g, attn_out, layer.ln1, bound, eps)?;
        let p_mid = g.add(normed, p)?;
        let mlp_out = mlp(g, p_mid, layer.mlp, bound)?;
        let normed2 = layer_norm(g, mlp_out, layer.ln2, bound, eps)?;
        p = g.add(normed2, p_mid)?;
    }
    Ok(p)
}

/// Multimodal encoder: masked self-attention over the text stream, then
/// cross-attention with queries from text and keys/values from the visual
/// output (never masked: the image is fully visible), then MLP; post-LN
/// throughout. With zero layers this is the identity on `text_states`.
pub fn encode_multimodal<F: Float>(
    g: &mut Graph<F>,
    text_states: Var,
    visual_states: Var,
    kind: MaskKind,
    text_visible: &[bool],
    params: &Params<F>,
    bound: &Bound,
) -> Result<Var> {
    let cfg = &params.config;
    let (l, h) = g.value(text_states).dims2()?;
    let (vn, vh) = g.value(visual_states).dims2()?;
    if h != vh {
        return Err(CoreError::ShapeMismatch {
            op: "encode_multimodal",
            lhs: g.value(text_states).shape.clone(),
            rhs: g.value(visual_states).shape.clone(),
        });
    }
    if text_visible.len() != l {
        return Err(CoreError::invalid("visibility length != text length"));
    }
    let eps = F::from_f64(cfg.ln_eps);
    let self_mask = build_attention_mask::<F>(kind, text_visible);
    let cross_mask = open_mask::<F>(vn);
    let mut m = text_states;
    for layer in &params.arch.m_layers {
        let sa = attention(g, m, m, layer.self_attn, bound, cfg.n_heads, &self_mask)?;
        let sa = layer_norm(g, sa, layer.ln1, bound, eps)?;
        let m2 = g.add(sa, m)?;
        let ca = attention(
            g,
            m2,
            visual_states,
            layer.cross_attn,
            bound,
            cfg.n_heads,
            &cross_mask,
        )?;
        let ca = layer_norm(g, ca, layer.ln2, bound, eps)?;
        let m1 = g.add(ca, m2)?;
        let ff = mlp(g, m1, layer.mlp, bound)?;
        let ff = layer_norm(g, ff, layer.ln3, bound, eps)?;
        m = g.add(ff, m1)?;
    }
    Ok(m)
}

//! Forward pass of the single-stream encoder.
//!
//! Image patches and caption tokens are embedded separately, tagged with a
//! modality vector, concatenated into one sequence and processed by shared
//! pre-norm transformer blocks. A 1-D convolution over the sequence axis
//! followed by one affine layer maps the contextualised sequence to voxels.

use super::{Modality, ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Splits a `[C × H × W]` image into non-overlapping `P × P` patches.
///
/// Patches are ordered row-major over the patch grid; each row of the result
/// is the `[C × P × P]` row-major flattening of one patch.
pub fn patchify<T: Real>(image: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Shape(format!(
            "patchify expects a [C×H×W] image, got {:?}",
            image.shape()
        )));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} is not divisible by patch size P={patch}"
        )));
    }
    Tensor::new(
        [(h / patch) * (w / patch), patch * patch * c],
        patchify_raw(image.values(), c, h, w, patch),
    )
}

fn patchify_raw<T: Real>(img: &[T], c: usize, h: usize, w: usize, p: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(img.len());
    for gy in 0..h / p {
        for gx in 0..w / p {
            for ch in 0..c {
                for y in 0..p {
                    let row = (ch * h + gy * p + y) * w + gx * p;
                    out.extend_from_slice(&img[row..row + p]);
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct BoundBlock {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub qkv_weight: Var,
    pub qkv_bias: Var,
    pub out_weight: Var,
    pub out_bias: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub mlp_in_weight: Var,
    pub mlp_in_bias: Var,
    pub mlp_out_weight: Var,
    pub mlp_out_bias: Var,
}

#[derive(Clone, Debug)]
pub struct BoundText {
    pub word_embedding: Var,
    pub text_cls: Var,
    pub text_positions: Var,
    pub text_type: Var,
}

/// Graph handles for every parameter, in [`ModelParams::entries`] order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub patch_projection: Var,
    pub image_cls: Var,
    pub image_positions: Var,
    pub image_type: Var,
    pub text: Option<BoundText>,
    pub blocks: Vec<BoundBlock>,
    pub pool_weight: Var,
    pub conv_weight: Var,
    pub conv_bias: Var,
    pub head_weight: Var,
    pub head_bias: Var,
    pub all: Vec<Var>,
}

/// Records every parameter as a leaf. With `trainable` unset the leaves are
/// constants, which keeps inference from allocating gradients.
pub fn bind<T: Real>(g: &mut Graph<T>, params: &ModelParams<T>, trainable: bool) -> Bound {
    let all: Vec<Var> = params
        .entries()
        .into_iter()
        .map(|(_, _, t)| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        })
        .collect();
    let mut it = all.iter().copied();
    let mut next = || it.next().expect("bound parameter");
    let patch_projection = next();
    let image_cls = next();
    let image_positions = next();
    let image_type = next();
    let text = params.text.as_ref().map(|_| BoundText {
        word_embedding: next(),
        text_cls: next(),
        text_positions: next(),
        text_type: next(),
    });
    let blocks = params
        .blocks
        .iter()
        .map(|_| BoundBlock {
            ln1_gamma: next(),
            ln1_beta: next(),
            qkv_weight: next(),
            qkv_bias: next(),
            out_weight: next(),
            out_bias: next(),
            ln2_gamma: next(),
            ln2_beta: next(),
            mlp_in_weight: next(),
            mlp_in_bias: next(),
            mlp_out_weight: next(),
            mlp_out_bias: next(),
        })
        .collect();
    Bound {
        patch_projection,
        image_cls,
        image_positions,
        image_type,
        text,
        blocks,
        pool_weight: next(),
        conv_weight: next(),
        conv_bias: next(),
        head_weight: next(),
        head_bias: next(),
        all,
    }
}

fn repeat_rows<T: Real>(g: &mut Graph<T>, x: Var, times: usize) -> Result<Var> {
    if times == 1 {
        return Ok(x);
    }
    g.concat_rows(&vec![x; times])
}

/// Prepends `cls` to each of `batch` consecutive groups of `per` rows.
fn prepend_per_sample<T: Real>(
    g: &mut Graph<T>,
    rows: Var,
    cls: Var,
    batch: usize,
    per: usize,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(2 * batch);
    for b in 0..batch {
        parts.push(cls);
        if batch == 1 {
            parts.push(rows);
        } else {
            parts.push(g.slice_rows(rows, b * per, per)?);
        }
    }
    g.concat_rows(&parts)
}

/// `[cls; patches·V] + V^pos` per sample; `patches` is `[batch·N × P²·C]`.
pub fn embed_image<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &Bound,
    patches: Var,
    batch: usize,
) -> Result<Var> {
    let n = cfg.num_patches();
    let s = g.shape(patches);
    if s.len() != 2 || s[0] != batch * n || s[1] != cfg.patch_dim() {
        return Err(Error::shape(
            "embed_image",
            s,
            [batch * n, cfg.patch_dim()],
        ));
    }
    let projected = g.matmul(patches, p.patch_projection)?;
    let seq = prepend_per_sample(g, projected, p.image_cls, batch, n)?;
    let pos = repeat_rows(g, p.image_positions, batch)?;
    g.add(seq, pos)
}

/// `[cls; T[ids]] + T^pos` per sample; `ids` holds `batch·L` token ids.
pub fn embed_text<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &Bound,
    ids: &[usize],
    batch: usize,
) -> Result<Var> {
    let text = p
        .text
        .as_ref()
        .ok_or_else(|| Error::Config("model was built without a text branch".into()))?;
    let l = cfg.text_length;
    if ids.len() != batch * l {
        return Err(Error::Shape(format!(
            "embed_text expects {} ids ({batch}×{l}), got {}",
            batch * l,
            ids.len()
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= cfg.vocab_size) {
        return Err(Error::Data(format!(
            "token id {bad} out of range for vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let words = g.gather_rows(text.word_embedding, ids)?;
    let seq = prepend_per_sample(g, words, text.text_cls, batch, l)?;
    let pos = repeat_rows(g, text.text_positions, batch)?;
    g.add(seq, pos)
}

/// Output of [`fuse`]: `batch` stacked sequences of `seq_len` rows each.
#[derive(Clone, Copy, Debug)]
pub struct FusedSequence {
    pub z: Var,
    /// Row index (within one sample) where the text span starts.
    pub boundary: usize,
    pub seq_len: usize,
    pub batch: usize,
}

/// Adds the modality-type vectors and concatenates image then text rows for
/// every sample. With `text = None` the sequence is the image span alone.
pub fn fuse<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    image: Var,
    text: Option<Var>,
    batch: usize,
) -> Result<FusedSequence> {
    let h = g.value(image).last_dim();
    let img_len = g.shape(image)[0] / batch;
    let image = g.add_row(image, p.image_type)?;
    let Some(text) = text else {
        return Ok(FusedSequence {
            z: image,
            boundary: img_len,
            seq_len: img_len,
            batch,
        });
    };
    if g.value(text).last_dim() != h {
        return Err(Error::shape("fuse", g.shape(image), g.shape(text)));
    }
    let type_vec = p
        .text
        .as_ref()
        .ok_or_else(|| Error::Config("model was built without a text branch".into()))?
        .text_type;
    let txt_len = g.shape(text)[0] / batch;
    let text = g.add_row(text, type_vec)?;
    let z = if batch == 1 {
        g.concat_rows(&[image, text])?
    } else {
        let mut parts = Vec::with_capacity(2 * batch);
        for b in 0..batch {
            parts.push(g.slice_rows(image, b * img_len, img_len)?);
            parts.push(g.slice_rows(text, b * txt_len, txt_len)?);
        }
        g.concat_rows(&parts)?
    };
    Ok(FusedSequence {
        z,
        boundary: img_len,
        seq_len: img_len + txt_len,
        batch,
    })
}

/// One pre-norm block: `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
pub fn transformer_block<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    b: &BoundBlock,
    x: Var,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let heads = cfg.heads;
    let h = g.layer_norm(x, b.ln1_gamma, b.ln1_beta, LAYER_NORM_EPS)?;
    let qkv = g.matmul(h, b.qkv_weight)?;
    let qkv = g.add_row(qkv, b.qkv_bias)?;
    let q = g.split_heads(qkv, 0, batch, seq, heads)?;
    let k = g.split_heads(qkv, 1, batch, seq, heads)?;
    let v = g.split_heads(qkv, 2, batch, seq, heads)?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.scale(scores, T::of(1.0 / (cfg.head_dim() as f64).sqrt()))?;
    let attn = g.softmax(scores)?;
    let ctx = g.bmm(attn, v, false)?;
    let ctx = g.merge_heads(ctx, batch, seq, heads)?;
    let o = g.matmul(ctx, b.out_weight)?;
    let o = g.add_row(o, b.out_bias)?;
    let x = g.add(x, o)?;

    let h = g.layer_norm(x, b.ln2_gamma, b.ln2_beta, LAYER_NORM_EPS)?;
    let m = g.matmul(h, b.mlp_in_weight)?;
    let m = g.add_row(m, b.mlp_in_bias)?;
    let m = g.gelu(m)?;
    let m = g.matmul(m, b.mlp_out_weight)?;
    let m = g.add_row(m, b.mlp_out_bias)?;
    g.add(x, m)
}

/// Runs all `depth` blocks; `z` is `[batch·seq × H]`.
pub fn encode<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &Bound,
    z: Var,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let s = g.shape(z);
    if s.len() != 2 || s[0] != batch * seq || s[1] != cfg.hidden_size {
        return Err(Error::shape("encode", s, [batch * seq, cfg.hidden_size]));
    }
    p.blocks
        .iter()
        .try_fold(z, |x, b| transformer_block(g, cfg, b, x, batch, seq))
}

/// `tanh(z[0] · W_pool)` for every sample, giving `[batch × H]`.
pub fn pool<T: Real>(g: &mut Graph<T>, p: &Bound, z: Var, batch: usize, seq: usize) -> Result<Var> {
    let first: Vec<usize> = (0..batch).map(|b| b * seq).collect();
    let cls = g.gather_rows(z, &first)?;
    let proj = g.matmul(cls, p.pool_weight)?;
    g.tanh(proj)
}

/// Convolution along the sequence (channels = H) with relu, flatten, then
/// one affine layer to `voxel_count` outputs.
pub fn reduce_and_map<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &Bound,
    z: Var,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let h = cfg.hidden_size;
    if seq != cfg.seq_len() || g.shape(z) != [batch * seq, h] {
        return Err(Error::Shape(format!(
            "reduction head expects {batch}×{} rows of width {h}, got {:?}",
            cfg.seq_len(),
            g.shape(z)
        )));
    }
    let x = g.reshape(z, [batch, seq, h])?;
    let x = g.transpose(x)?;
    let x = g.conv1d(x, p.conv_weight, Some(p.conv_bias), 1)?;
    let x = g.relu(x)?;
    let x = g.reshape(x, [batch, cfg.reduced_dim()])?;
    let y = g.matmul(x, p.head_weight)?;
    g.add_row(y, p.head_bias)
}

/// One stimulus as seen by the network.
#[derive(Clone, Copy, Debug)]
pub struct Stimulus<'a, T> {
    /// `[C × H × W]` row-major pixels.
    pub image: &'a [T],
    /// `L` token ids; ignored in image-only mode.
    pub tokens: &'a [usize],
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub predictions: Var,
    pub pooled: Var,
    pub fused: FusedSequence,
    pub encoded: Var,
}

/// Records the full forward pass for a batch; `predictions` is
/// `[batch × voxel_count]`.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    p: &Bound,
    batch: &[Stimulus<'_, T>],
) -> Result<Forward> {
    let n = batch.len();
    if n == 0 {
        return Err(Error::Usage("empty batch".into()));
    }
    let (c, ih, iw, ps) = (
        cfg.image_channels,
        cfg.image_height,
        cfg.image_width,
        cfg.patch_size,
    );
    let mut patches = Vec::with_capacity(n * cfg.image_numel());
    for s in batch {
        if s.image.len() != cfg.image_numel() {
            return Err(Error::Shape(format!(
                "image has {} values, config expects {c}×{ih}×{iw}",
                s.image.len()
            )));
        }
        patches.extend(patchify_raw(s.image, c, ih, iw, ps));
    }
    let patches = g.constant(Tensor::new([n * cfg.num_patches(), cfg.patch_dim()], patches)?);
    let image = embed_image(g, cfg, p, patches, n)?;
    let text = match cfg.mode {
        Modality::Multimodal => {
            let ids: Vec<usize> = batch.iter().flat_map(|s| s.tokens.iter().copied()).collect();
            Some(embed_text(g, cfg, p, &ids, n)?)
        }
        Modality::ImageOnly => None,
    };
    let fused = fuse(g, p, image, text, n)?;
    let encoded = encode(g, cfg, p, fused.z, n, fused.seq_len)?;
    let pooled = pool(g, p, encoded, n, fused.seq_len)?;
    let predictions = reduce_and_map(g, cfg, p, encoded, n, fused.seq_len)?;
    Ok(Forward {
        predictions,
        pooled,
        fused,
        encoded,
    })
}

/// Inference-only forward returning `[batch × voxel_count]` predictions.
pub fn predict<T: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    batch: &[Stimulus<'_, T>],
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let f = forward(&mut g, cfg, &bound, batch)?;
    Ok(g.value(f.predictions).clone())
}

/// Inference-only pooled representation, `[batch × H]`.
pub fn pooled<T: Real>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    batch: &[Stimulus<'_, T>],
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let bound = bind(&mut g, params, false);
    let f = forward(&mut g, cfg, &bound, batch)?;
    Ok(g.value(f.pooled).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_counts() {
        let img = Tensor::<f32>::zeros([3, 224, 224]);
        let p = patchify(&img, 32).unwrap();
        assert_eq!(p.shape(), &[49, 3072]);
        let img = Tensor::<f32>::zeros([3, 64, 64]);
        assert_eq!(patchify(&img, 32).unwrap().shape()[0], 4);
        let img = Tensor::<f32>::zeros([3, 100, 100]);
        let err = patchify(&img, 32).unwrap_err().to_string();
        assert!(err.contains("P=32"), "{err}");
    }

    #[test]
    fn patchify_layout() {
        // 1 channel 4×4 image with value = 10·y + x; P = 2
        let v: Vec<f64> = (0..16).map(|i| (10 * (i / 4) + i % 4) as f64).collect();
        let img = Tensor::<f64>::from_f64([1, 4, 4], &v).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.row(0), &[0., 1., 10., 11.]);
        assert_eq!(p.row(1), &[2., 3., 12., 13.]);
        assert_eq!(p.row(2), &[20., 21., 30., 31.]);
    }
}

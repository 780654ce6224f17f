//! Per-mask embeddings: mask pooling and the two-stream fusion block.
//!
//! The spatial stream (stride-4 mask features by default) and the CLIP
//! stream are mask-pooled, projected to the text embedding width, treated
//! as a two-token sequence per mask and refined by one self-attention
//! block. The read-out is the token average, layer-normed and unit-scaled.

use crate::decoder::MaskPredictions;
use crate::error::{shape_err, Result};
use crate::numerics::{bilinear_resize, l2_normalize, multi_head_attention, AttnWeights, Linear, NormParams, Tensor};

pub const DEFAULT_MIN_MASK_AREA: f32 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct LdpWeights {
    pub sam_proj: Linear,
    pub clip_proj: Linear,
    pub attn: AttnWeights,
    pub norm: NormParams,
}

impl LdpWeights {
    pub fn embed_dim(&self) -> usize {
        self.sam_proj.out_dim()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Pooling {
    /// Probability-weighted average.
    Soft,
    /// Binary mask `p >= threshold` after resizing.
    Hard { threshold: f32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamSource {
    /// Mask-pool the decoder's stride-4 pixel embedding.
    PixelEmbedding,
    /// Use the decoder's region feature row of each query directly.
    RegionFeatures,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LdpConfig {
    pub pooling: Pooling,
    pub sam_source: SamSource,
    /// Minimum pooled mask mass for a mask to count as non-empty.
    pub min_area: f32,
}

impl Default for LdpConfig {
    fn default() -> Self {
        Self {
            pooling: Pooling::Soft,
            sam_source: SamSource::PixelEmbedding,
            min_area: DEFAULT_MIN_MASK_AREA,
        }
    }
}

/// Pooled rows with a flag per mask; invalid rows are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Pooled {
    pub rows: Tensor,
    pub valid: Vec<bool>,
}

/// Per-mask embeddings for both classification paths.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskEmbeddings {
    pub g_ldp: Tensor,
    pub g_clip: Tensor,
    pub valid: Vec<bool>,
}

/// Weighted mean of `features` (`D x h x w`) under each mask of
/// `mask_probs` (`N x Hm x Wm`, resized to `h x w`).
pub fn mask_pool(features: &Tensor, mask_probs: &Tensor, pooling: Pooling, min_area: f32) -> Result<Pooled> {
    let (d, h, w) = features.as_chw("mask_pool features")?;
    let (n, _, _) = mask_probs.as_chw("mask_pool masks")?;
    let mut masks = if n == 0 {
        Tensor::zeros(&[0, h, w])
    } else {
        bilinear_resize(mask_probs, h, w, false)?
    };
    if let Pooling::Hard { threshold } = pooling {
        masks = masks.map(|p| if p >= threshold { 1.0 } else { 0.0 });
    }
    let hw = h * w;
    let feats = features.data();
    let mut rows = Tensor::zeros(&[n, d]);
    let mut valid = vec![false; n];
    for k in 0..n {
        let m = &masks.data()[k * hw..(k + 1) * hw];
        let mass: f64 = m.iter().map(|&v| v as f64).sum();
        if mass < min_area as f64 {
            continue;
        }
        valid[k] = true;
        let row = rows.row_mut(k);
        for (c, out) in row.iter_mut().enumerate() {
            let plane = &feats[c * hw..(c + 1) * hw];
            let acc: f64 = plane.iter().zip(m).map(|(&f, &mv)| f as f64 * mv as f64).sum();
            *out = (acc / mass) as f32;
        }
    }
    Ok(Pooled { rows, valid })
}

/// Mask-pooled CLIP features, unit rows where valid.
pub fn clip_embed(f_clip: &Tensor, mask_probs: &Tensor, pooling: Pooling, min_area: f32) -> Result<Pooled> {
    let mut pooled = mask_pool(f_clip, mask_probs, pooling, min_area)?;
    for k in 0..pooled.valid.len() {
        if pooled.valid[k] {
            l2_normalize(pooled.rows.row_mut(k));
        }
    }
    Ok(pooled)
}

/// Fuses pooled rows (`N x D_pix`, `N x D_clip`) into unit `N x D_emb` rows.
/// Each mask is processed independently.
pub fn ldp_forward(sam_pooled: &Tensor, clip_pooled: &Tensor, weights: &LdpWeights) -> Result<Tensor> {
    let (n, _) = sam_pooled.as_matrix("ldp sam rows")?;
    let (n2, _) = clip_pooled.as_matrix("ldp clip rows")?;
    if n != n2 {
        return Err(shape_err!("ldp got {n} SAM rows and {n2} CLIP rows"));
    }
    let d = weights.embed_dim();
    if n == 0 {
        return Ok(Tensor::zeros(&[0, d]));
    }
    let sam = weights.sam_proj.forward(sam_pooled)?;
    let clip = weights.clip_proj.forward(clip_pooled)?;
    if clip.dim(1) != d {
        return Err(shape_err!("ldp projections disagree: {d} vs {}", clip.dim(1)));
    }
    let mut out = Tensor::zeros(&[n, d]);
    for k in 0..n {
        let tokens = Tensor::from_vec(&[2, d], [sam.row(k), clip.row(k)].concat())?;
        let refined = tokens.add(&multi_head_attention(&tokens, &tokens, &tokens, &weights.attn, None)?)?;
        let avg: Vec<f32> = (0..d).map(|c| 0.5 * (refined.row(0)[c] + refined.row(1)[c])).collect();
        let normed = weights.norm.forward(&Tensor::from_vec(&[1, d], avg)?)?;
        let row = out.row_mut(k);
        row.copy_from_slice(normed.data());
        l2_normalize(row);
    }
    Ok(out)
}

/// Both embedding paths for a set of decoder predictions.
pub fn embed_masks(
    preds: &MaskPredictions,
    mask_probs: &Tensor,
    f_clip: &Tensor,
    weights: &LdpWeights,
    cfg: &LdpConfig,
) -> Result<MaskEmbeddings> {
    let sam = mask_pool(&preds.pixel_embedding, mask_probs, cfg.pooling, cfg.min_area)?;
    let clip = clip_embed(f_clip, mask_probs, cfg.pooling, cfg.min_area)?;
    let sam_rows = match cfg.sam_source {
        SamSource::PixelEmbedding => sam.rows,
        SamSource::RegionFeatures => preds.f_masked.clone(),
    };
    let valid: Vec<bool> = sam.valid.iter().zip(&clip.valid).map(|(&a, &b)| a && b).collect();
    let mut g_ldp = ldp_forward(&sam_rows, &clip.rows, weights)?;
    let mut g_clip = clip.rows;
    for (k, &ok) in valid.iter().enumerate() {
        if !ok {
            g_ldp.row_mut(k).fill(0.0);
            g_clip.row_mut(k).fill(0.0);
        }
    }
    Ok(MaskEmbeddings { g_ldp, g_clip, valid })
}

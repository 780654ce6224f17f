//! Query-based mask decoder with masked cross-attention.
//!
//! Each layer lets the queries attend to one pyramid level (cycling strides
//! 32, 16, 8), then to each other, then runs an FFN; every sub-block is
//! residual followed by layer norm. The cross-attention mask of a layer is
//! the previous prediction resized to that level and thresholded. Masks are
//! the dot product of a per-query embedding with the stride-4 pixel map.

use crate::error::{shape_err, Error, Result};
use crate::numerics::{
    bilinear_resize, multi_head_attention, relu, sigmoid, AttnMask, AttnWeights, Linear, NormParams, Tensor,
};
use crate::pyramid::{ConvLayer, MultiScaleFeatures};

/// Strides attended by successive layers.
pub const CROSS_ATTENTION_CYCLE: [usize; 3] = [32, 16, 8];
pub const DEFAULT_LAYERS: usize = 9;
pub const DEFAULT_QUERIES: usize = 250;

/// Stack of linear layers with ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = h.map(relu);
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayerWeights {
    pub cross_attn: AttnWeights,
    pub cross_norm: NormParams,
    pub self_attn: AttnWeights,
    pub self_norm: NormParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    pub ffn_norm: NormParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderWeights {
    /// Initial query features, `N x D_pix`.
    pub query_feat: Tensor,
    /// 1x1 projection of the stride-4 map into the mask embedding space.
    pub mask_features: ConvLayer,
    pub layers: Vec<DecoderLayerWeights>,
    pub decoder_norm: NormParams,
    /// Query-to-mask-embedding MLP.
    pub mask_embed: Mlp,
    /// `D_pix -> D_pix -> 1`, sigmoid applied by the decoder.
    pub iou_head: Mlp,
}

impl DecoderWeights {
    pub fn num_queries(&self) -> usize {
        self.query_feat.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.query_feat.dim(1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderConfig {
    pub layers: usize,
    /// Adds 2-D sinusoidal encodings to cross-attention keys.
    pub positional_encoding: bool,
    /// Probability threshold for admitting a pixel into a query's attention.
    pub mask_threshold: f32,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: DEFAULT_LAYERS,
            positional_encoding: false,
            mask_threshold: 0.5,
        }
    }
}

/// Per-query decoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPredictions {
    /// Region features, `N x D_pix`.
    pub f_masked: Tensor,
    /// `N x ceil(H/4) x ceil(W/4)`.
    pub p_mask_logits: Tensor,
    /// Predicted IoU per query, in `[0, 1]`.
    pub p_iou: Tensor,
    /// Stride-4 mask-feature map the logits were computed against.
    pub pixel_embedding: Tensor,
}

impl MaskPredictions {
    pub fn num_queries(&self) -> usize {
        self.p_mask_logits.dim(0)
    }

    pub fn mask_grid(&self) -> (usize, usize) {
        (self.p_mask_logits.dim(1), self.p_mask_logits.dim(2))
    }
}

/// Elementwise sigmoid of the mask logits.
pub fn mask_probabilities(p: &MaskPredictions) -> Tensor {
    p.p_mask_logits.map(sigmoid)
}

/// `C x H x W` -> `HW x C`.
pub fn flatten_pixels(map: &Tensor) -> Result<Tensor> {
    let (c, h, w) = map.as_chw("flatten_pixels")?;
    map.clone().reshape(&[c, h * w])?.transpose()
}

/// 2-D sinusoidal position encoding, `HW x D`: the first half of the
/// channels encodes the row, the second half the column.
pub fn sine_position_encoding(h: usize, w: usize, d: usize) -> Tensor {
    let half = d / 2;
    let mut out = Tensor::zeros(&[h * w, d]);
    for y in 0..h {
        for x in 0..w {
            let row = out.row_mut(y * w + x);
            for (offset, pos) in [(0, y), (half, x)] {
                for i in 0..half {
                    let freq = 10000f64.powf((2 * (i / 2)) as f64 / half.max(1) as f64);
                    let a = pos as f64 / freq;
                    row[offset + i] = if i % 2 == 0 { a.sin() } else { a.cos() } as f32;
                }
            }
        }
    }
    out
}

fn predict_masks(queries: &Tensor, pixel: &Tensor, weights: &DecoderWeights) -> Result<Tensor> {
    let (d, h, w) = pixel.as_chw("pixel embedding")?;
    let normed = weights.decoder_norm.forward(queries)?;
    let embed = weights.mask_embed.forward(&normed)?;
    if embed.dim(1) != d {
        return Err(shape_err!(
            "mask embedding dim {} vs pixel embedding dim {d}",
            embed.dim(1)
        ));
    }
    let flat = pixel.clone().reshape(&[d, h * w])?;
    embed.matmul(&flat)?.reshape(&[queries.dim(0), h, w])
}

fn attention_mask(logits: &Tensor, h: usize, w: usize, threshold: f32) -> Result<AttnMask> {
    let n = logits.dim(0);
    let resized = bilinear_resize(logits, h, w, false)?;
    let allowed = resized.data().iter().map(|&v| sigmoid(v) >= threshold).collect();
    AttnMask::new(n, h * w, allowed)
}

pub fn decoder_forward(
    f_ms: &MultiScaleFeatures,
    weights: &DecoderWeights,
    cfg: &DecoderConfig,
) -> Result<MaskPredictions> {
    if cfg.layers == 0 {
        return Err(Error::InvalidArgument("decoder needs at least one layer".into()));
    }
    if cfg.layers > weights.layers.len() {
        return Err(Error::InvalidArgument(format!(
            "decoder asked for {} layers but weights hold {}",
            cfg.layers,
            weights.layers.len()
        )));
    }
    let d = weights.dim();
    if f_ms.channels() != d {
        return Err(shape_err!(
            "pyramid has {} channels, decoder expects {d}",
            f_ms.channels()
        ));
    }
    let pixel = weights.mask_features.conv(f_ms.finest(), 1)?;
    let mut queries = weights.query_feat.clone();
    let mut logits = predict_masks(&queries, &pixel, weights)?;

    for (l, lw) in weights.layers.iter().take(cfg.layers).enumerate() {
        let stride = CROSS_ATTENTION_CYCLE[l % CROSS_ATTENTION_CYCLE.len()];
        let level = f_ms
            .at_stride(stride)
            .ok_or_else(|| shape_err!("no pyramid level at stride {stride}"))?;
        let (_, h, w) = level.as_chw("pyramid level")?;
        let memory = flatten_pixels(level)?;
        let keys = if cfg.positional_encoding {
            memory.add(&sine_position_encoding(h, w, d))?
        } else {
            memory.clone()
        };
        let mask = attention_mask(&logits, h, w, cfg.mask_threshold)?;

        let attended = multi_head_attention(&queries, &keys, &memory, &lw.cross_attn, Some(&mask))?;
        queries = lw.cross_norm.forward(&queries.add(&attended)?)?;

        let mixed = multi_head_attention(&queries, &queries, &queries, &lw.self_attn, None)?;
        queries = lw.self_norm.forward(&queries.add(&mixed)?)?;

        let hidden = lw.ffn_in.forward(&queries)?.map(relu);
        let ffn = lw.ffn_out.forward(&hidden)?;
        queries = lw.ffn_norm.forward(&queries.add(&ffn)?)?;

        logits = predict_masks(&queries, &pixel, weights)?;
    }

    let f_masked = weights.decoder_norm.forward(&queries)?;
    let iou_raw = weights.iou_head.forward(&f_masked)?;
    if iou_raw.dim(1) != 1 {
        return Err(shape_err!("IoU head must emit one value per query"));
    }
    let n = f_masked.dim(0);
    let p_iou = iou_raw.reshape(&[n])?.map(sigmoid);
    for t in [&f_masked, &logits, &p_iou] {
        t.ensure_finite("decoder output")?;
    }
    Ok(MaskPredictions {
        f_masked,
        p_mask_logits: logits,
        p_iou,
        pixel_embedding: pixel,
    })
}

//! End-to-end inference for one image, plus two fixture generators built on
//! it: an oracle decoder that reproduces the ground truth, and crafted
//! scenes for comparing ensembling rules.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{overlap_mask, GroundTruth, PanopticMap, Synonyms, Vocabulary};
use crate::decoder::{decoder_forward, mask_probabilities, DecoderConfig, MaskPredictions};
use crate::error::{Error, Result};
use crate::fixtures::{synth_bundle, FeatureBundle, ModelWeights, SynthSpec};
use crate::inference::{
    classify, ensemble, panoptic_fuse, ClassDistributions, FusedClassScores, FusionConfig, SeConf, DEFAULT_ALPHA,
    DEFAULT_BETA,
};
use crate::ldp::{embed_masks, LdpConfig, MaskEmbeddings};
use crate::metrics::{pq_accumulate, pq_report, PqAccumulator};
use crate::numerics::Tensor;
use crate::pyramid::{fpn_forward, FpnConfig};

/// Logit magnitude the oracle decoder emits.
pub const ORACLE_LOGIT: f32 = 20.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EnsembleMode {
    Mase,
    Geometric,
    /// Adaptive exponents with a fixed confidence ratio.
    ForcedSeConf(f64),
}

impl EnsembleMode {
    fn se_conf(self) -> SeConf {
        match self {
            EnsembleMode::Mase => SeConf::Adaptive,
            EnsembleMode::Geometric => SeConf::Forced(0.0),
            EnsembleMode::ForcedSeConf(v) => SeConf::Forced(v),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub fpn: FpnConfig,
    pub decoder: DecoderConfig,
    pub ldp: LdpConfig,
    pub alpha: f64,
    pub beta: f64,
    /// Overrides the temperature stored with the weights.
    pub tau: Option<f64>,
    /// Temperature of the CLIP path; defaults to the LDP temperature.
    pub tau_clip: Option<f64>,
    pub ensemble: EnsembleMode,
    pub fusion: FusionConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            fpn: FpnConfig::default(),
            decoder: DecoderConfig::default(),
            ldp: LdpConfig::default(),
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            tau: None,
            tau_clip: None,
            ensemble: EnsembleMode::Mase,
            fusion: FusionConfig::default(),
        }
    }
}

impl PipelineConfig {
    fn taus(&self, weights_tau: f64) -> (f64, f64) {
        let tau = self.tau.unwrap_or(weights_tau);
        (tau, self.tau_clip.unwrap_or(tau))
    }
}

/// Training-category flags for a vocabulary; all false when it lists no
/// seen names.
pub fn vocabulary_overlap(vocab: &Vocabulary, synonyms: &Synonyms) -> Vec<bool> {
    match vocab.seen_names() {
        Some(seen) => overlap_mask(vocab, seen, synonyms),
        None => vec![false; vocab.len()],
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskDebug {
    pub query: usize,
    pub p_iou: f64,
    /// Category id of the best fused score.
    pub label: u32,
    pub score: f64,
    pub se_ldp: f64,
    pub se_clip: f64,
    pub se_conf: f64,
    pub alpha_hat: f64,
    pub beta_hat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageDebug {
    pub image_h: usize,
    pub image_w: usize,
    pub masks: Vec<MaskDebug>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub panoptic: PanopticMap,
    pub fused: FusedClassScores,
    pub debug: ImageDebug,
}

pub fn predict(bundle: &FeatureBundle, weights: &ModelWeights, cfg: &PipelineConfig) -> Result<MaskPredictions> {
    let ms = fpn_forward(&bundle.f_sam, &weights.fpn, bundle.image_h, bundle.image_w, cfg.fpn)?;
    decoder_forward(&ms, &weights.decoder, &cfg.decoder)
}

/// Classification, ensembling and fusion for given mask predictions.
pub fn finish(
    bundle: &FeatureBundle,
    preds: &MaskPredictions,
    embeddings: &MaskEmbeddings,
    overlap: &[bool],
    tau: f64,
    tau_clip: f64,
    cfg: &PipelineConfig,
) -> Result<ImageResult> {
    let dist = ClassDistributions {
        p_ldp_raw: classify(&embeddings.g_ldp, &embeddings.valid, &bundle.g_text, tau)?,
        p_clip_raw: classify(&embeddings.g_clip, &embeddings.valid, &bundle.g_text, tau_clip)?,
        overlap_mask: overlap.to_vec(),
        alpha: cfg.alpha,
        beta: cfg.beta,
    };
    let p_iou: Vec<f64> = preds.p_iou.data().iter().map(|&v| v as f64).collect();
    let fused = ensemble(&dist, &p_iou, cfg.ensemble.se_conf())?;
    let probs = mask_probabilities(preds);
    let panoptic = panoptic_fuse(
        &probs,
        &fused,
        &bundle.vocabulary,
        bundle.image_h,
        bundle.image_w,
        &cfg.fusion,
    )?;
    let cats = bundle.vocabulary.categories();
    let masks = (0..fused.num_masks())
        .map(|k| {
            let (label, score) = fused.best(k);
            MaskDebug {
                query: k,
                p_iou: fused.p_iou[k],
                label: cats[label].id,
                score,
                se_ldp: fused.se_ldp[k],
                se_clip: fused.se_clip[k],
                se_conf: fused.se_conf[k],
                alpha_hat: fused.alpha_hat[k],
                beta_hat: fused.beta_hat[k],
            }
        })
        .collect();
    Ok(ImageResult {
        panoptic,
        fused,
        debug: ImageDebug {
            image_h: bundle.image_h,
            image_w: bundle.image_w,
            masks,
        },
    })
}

/// Full forward pass for one image.
pub fn run_image(
    bundle: &FeatureBundle,
    weights: &ModelWeights,
    overlap: &[bool],
    cfg: &PipelineConfig,
) -> Result<ImageResult> {
    let (d_emb, d_text) = (weights.ldp.embed_dim(), bundle.g_text.dim(1));
    if d_emb != d_text {
        return Err(Error::Shape(format!(
            "weights embed into {d_emb} dimensions but text rows have {d_text}"
        )));
    }
    let preds = predict(bundle, weights, cfg)?;
    let probs = mask_probabilities(&preds);
    let embeddings = embed_masks(&preds, &probs, &bundle.f_clip, &weights.ldp, &cfg.ldp)?;
    let (tau, tau_clip) = cfg.taus(weights.tau as f64);
    finish(bundle, &preds, &embeddings, overlap, tau, tau_clip, cfg)
}

/// Decoder outputs that reproduce `gt` exactly: one query per segment with
/// saturated logits, IoU 1 and embeddings equal to the class text row, then
/// `extra` empty queries with IoU 0.
pub fn oracle_outputs(
    gt: &GroundTruth,
    bundle: &FeatureBundle,
    extra: usize,
) -> Result<(MaskPredictions, MaskEmbeddings)> {
    gt.validate()?;
    let (h, w) = gt.grid(4);
    let n = gt.len() + extra;
    let d = bundle.g_text.dim(1);
    let mut logits = Tensor::full(&[n, h, w], -ORACLE_LOGIT);
    for (i, m) in gt.rasterize(4).iter().enumerate() {
        let plane = &mut logits.data_mut()[i * h * w..(i + 1) * h * w];
        for (v, &y) in plane.iter_mut().zip(m) {
            if y > 0.5 {
                *v = ORACLE_LOGIT;
            }
        }
    }
    let mut p_iou = Tensor::zeros(&[n]);
    let mut g = Tensor::zeros(&[n, d]);
    let mut valid = vec![false; n];
    for (i, &c) in gt.classes.iter().enumerate() {
        p_iou.data_mut()[i] = 1.0;
        g.row_mut(i).copy_from_slice(bundle.g_text.row(c));
        valid[i] = true;
    }
    let preds = MaskPredictions {
        f_masked: Tensor::zeros(&[n, d]),
        p_mask_logits: logits,
        p_iou,
        pixel_embedding: Tensor::zeros(&[d, h, w]),
    };
    let embeddings = MaskEmbeddings {
        g_ldp: g.clone(),
        g_clip: g,
        valid,
    };
    Ok((preds, embeddings))
}

/// How a crafted segment's two class streams behave.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SceneSegment {
    /// Training category: LDP confident and right, CLIP a near tie, wrong.
    Seen,
    /// Novel category: CLIP confident and right, LDP confidently wrong.
    NovelHard,
    /// Novel category: CLIP confident and right, LDP mildly wrong.
    NovelSoft,
}

/// Pre-computed class rows and masks for one crafted image.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationScene {
    pub vocabulary: Vocabulary,
    pub overlap: Vec<bool>,
    pub gt: PanopticMap,
    pub kinds: Vec<SceneSegment>,
    /// `N x H/4 x W/4`; true segments first, then low-IoU distractors.
    pub mask_probs: Tensor,
    pub p_ldp_raw: Tensor<f64>,
    pub p_clip_raw: Tensor<f64>,
    pub p_iou: Vec<f64>,
}

pub const ABLATION_CLASSES: usize = 8;
const ABLATION_SEGMENTS: usize = 4;

fn peaked_row(c: usize, peaks: &[(usize, f64)]) -> Vec<f64> {
    let mass: f64 = peaks.iter().map(|p| p.1).sum();
    let rest = (1.0 - mass) / (c - peaks.len()) as f64;
    let mut row = vec![rest; c];
    for &(i, v) in peaks {
        row[i] = v;
    }
    row
}

/// A 64x64 scene with four segments and two low-IoU distractor masks.
/// Categories 0-3 are seen in training, 4-7 are novel.
pub fn ablation_scene(seed: u64) -> Result<AblationScene> {
    let spec = SynthSpec {
        c_test: ABLATION_CLASSES,
        n_gt_segments: ABLATION_SEGMENTS,
        seen_fraction: 0.5,
        ..SynthSpec::default()
    };
    let (bundle, mut gt) = synth_bundle(seed, &spec)?;
    let vocabulary = bundle.vocabulary;
    let overlap = vocabulary_overlap(&vocabulary, &Synonyms::default());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ab1a);

    let hard = match rng.random_range(0..10) {
        0 => 0,
        1..=5 => 1,
        _ => 2,
    };
    let mut kinds = vec![SceneSegment::Seen; 2];
    kinds.extend(std::iter::repeat_n(SceneSegment::NovelHard, hard));
    kinds.extend(std::iter::repeat_n(SceneSegment::NovelSoft, 2 - hard));
    kinds.shuffle(&mut rng);

    let c = ABLATION_CLASSES;
    let mut seen: Vec<usize> = (0..c / 2).collect();
    let mut novel: Vec<usize> = (c / 2..c).collect();
    seen.shuffle(&mut rng);
    novel.shuffle(&mut rng);
    let (mut si, mut ni) = (0, 0);
    let mut ldp_rows = Vec::new();
    let mut clip_rows = Vec::new();
    let mut p_iou = Vec::new();
    for (k, kind) in kinds.iter().enumerate() {
        let (y, wrong) = if *kind == SceneSegment::Seen {
            si += 1;
            (seen[si - 1], seen[c / 2 - si])
        } else {
            ni += 1;
            (novel[ni - 1], novel[c / 2 - ni])
        };
        gt.classes[k] = y;
        gt.is_thing[k] = vocabulary.categories()[y].is_thing;
        let (l, v) = match kind {
            SceneSegment::Seen => (vec![(y, 0.80), (wrong, 0.08)], vec![(wrong, 0.44), (y, 0.40)]),
            SceneSegment::NovelHard => (vec![(wrong, 0.75), (y, 0.15)], vec![(y, 0.80), (wrong, 0.08)]),
            SceneSegment::NovelSoft => (vec![(wrong, 0.45), (y, 0.35)], vec![(y, 0.80), (wrong, 0.08)]),
        };
        ldp_rows.push(peaked_row(c, &l));
        clip_rows.push(peaked_row(c, &v));
        p_iou.push(rng.random_range(0.92..=1.0));
    }

    let (h, w) = gt.grid(4);
    let targets = gt.rasterize(4);
    let mut planes: Vec<Vec<f32>> = targets
        .iter()
        .map(|t| t.iter().map(|&y| if y > 0.5 { 0.97 } else { 0.03 }).collect())
        .collect();
    for d in 0..2 {
        let a = rng.random_range(0..ABLATION_SEGMENTS);
        let b = (a + 1 + d) % ABLATION_SEGMENTS;
        planes.push(
            targets[a]
                .iter()
                .zip(&targets[b])
                .map(|(&x, &y)| if x + y > 0.5 { 0.97 } else { 0.03 })
                .collect(),
        );
        let row = peaked_row(c, &[(gt.classes[a], 0.9)]);
        ldp_rows.push(row.clone());
        clip_rows.push(row);
        p_iou.push(rng.random_range(0.25..0.35));
    }
    let n = planes.len();
    let mask_probs = Tensor::from_vec(&[n, h, w], planes.concat())?;
    let p_ldp_raw = Tensor::from_vec(&[n, c], ldp_rows.concat())?;
    let p_clip_raw = Tensor::from_vec(&[n, c], clip_rows.concat())?;
    let gt_map = gt.to_panoptic(&vocabulary)?;
    Ok(AblationScene {
        vocabulary,
        overlap,
        gt: gt_map,
        kinds,
        mask_probs,
        p_ldp_raw,
        p_clip_raw,
        p_iou,
    })
}

/// PQ of one crafted scene under the given exponents and ensemble rule.
pub fn score_scene(scene: &AblationScene, alpha: f64, beta: f64, mode: EnsembleMode) -> Result<f64> {
    let dist = ClassDistributions {
        p_ldp_raw: scene.p_ldp_raw.clone(),
        p_clip_raw: scene.p_clip_raw.clone(),
        overlap_mask: scene.overlap.clone(),
        alpha,
        beta,
    };
    let fused = ensemble(&dist, &scene.p_iou, mode.se_conf())?;
    let pan = panoptic_fuse(
        &scene.mask_probs,
        &fused,
        &scene.vocabulary,
        scene.gt.height,
        scene.gt.width,
        &FusionConfig::default(),
    )?;
    let mut acc = PqAccumulator::new(&scene.vocabulary, scene.overlap.clone())?;
    pq_accumulate(&mut acc, &pan, &scene.gt, &scene.vocabulary)?;
    Ok(pq_report(&acc, &scene.vocabulary).all.pq)
}

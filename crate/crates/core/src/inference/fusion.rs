use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataio::{PanopticMap, SegmentInfo, Vocabulary};
use crate::error::{shape_err, Error, Result};
use crate::numerics::{bilinear_resize, nearest_resize, Tensor};

use super::ensemble::FusedClassScores;

/// Marks void pixels in a category grid.
pub const VOID_CLASS: usize = usize::MAX;

/// How stride-4 mask probabilities are brought to image resolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Upsample {
    /// Each pixel reads its stride-4 cell; a mask that is exact on the grid
    /// stays exact.
    #[default]
    Nearest,
    /// Half-pixel bilinear; rounds mask corners.
    Bilinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Masks whose best fused score is lower are discarded.
    pub score_thresh: f64,
    /// A pixel belongs to its winning mask only if the mask's probability
    /// there reaches this value.
    pub mask_thresh: f64,
    /// Minimum pixel area of a kept segment.
    pub min_area: usize,
    /// Minimum fraction of a mask's own area that must survive the argmax.
    pub overlap_thresh: f64,
    /// Optional lower bound on the predicted IoU of a kept mask.
    pub min_iou: Option<f64>,
    pub upsample: Upsample,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.3,
            mask_thresh: 0.5,
            min_area: 16,
            overlap_thresh: 0.8,
            min_iou: None,
            upsample: Upsample::Nearest,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        let mut checks = vec![
            ("score_thresh", self.score_thresh),
            ("mask_thresh", self.mask_thresh),
            ("overlap_thresh", self.overlap_thresh),
        ];
        if let Some(v) = self.min_iou {
            checks.push(("min_iou", v));
        }
        for (name, v) in checks {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("fusion.{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Resolves overlapping masks into a panoptic map at `image_h x image_w`.
///
/// Each surviving mask competes per pixel with weight `score * prob`; the
/// lower mask index wins ties. Segments that end up too small, or lose too
/// much of their own area, are dropped and their pixels become void. Stuff
/// segments of one category share an id.
pub fn panoptic_fuse(
    mask_probs: &Tensor,
    fused: &FusedClassScores,
    vocab: &Vocabulary,
    image_h: usize,
    image_w: usize,
    cfg: &FusionConfig,
) -> Result<PanopticMap> {
    cfg.validate()?;
    let (n, _, _) = mask_probs.as_chw("mask probabilities")?;
    if fused.num_masks() != n {
        return Err(shape_err!("{} score rows for {n} masks", fused.num_masks()));
    }
    if fused.p_class.dim(1) != vocab.len() {
        return Err(shape_err!(
            "{} score columns for a vocabulary of {}",
            fused.p_class.dim(1),
            vocab.len()
        ));
    }
    let hw = image_h * image_w;
    if hw == 0 {
        return Err(Error::InvalidArgument("image has no pixels".into()));
    }

    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    for k in 0..n {
        let (label, score) = fused.best(k);
        if score < cfg.score_thresh {
            continue;
        }
        if cfg.min_iou.is_some_and(|floor| fused.p_iou[k] < floor) {
            continue;
        }
        candidates.push((k, label, score));
    }

    let up = match cfg.upsample {
        Upsample::Nearest => nearest_resize(mask_probs, image_h, image_w)?,
        Upsample::Bilinear => bilinear_resize(mask_probs, image_h, image_w, false)?,
    };
    let plane = |k: usize| &up.data()[k * hw..(k + 1) * hw];

    let mut owner = vec![usize::MAX; hw];
    for p in 0..hw {
        let mut best: Option<(usize, f64)> = None;
        for (slot, &(k, _, score)) in candidates.iter().enumerate() {
            let v = score * plane(k)[p] as f64;
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((slot, v));
            }
        }
        if let Some((slot, _)) = best {
            if plane(candidates[slot].0)[p] as f64 >= cfg.mask_thresh {
                owner[p] = slot;
            }
        }
    }

    let mut own_area = vec![0usize; candidates.len()];
    let mut won = vec![0usize; candidates.len()];
    for (slot, &(k, _, _)) in candidates.iter().enumerate() {
        own_area[slot] = plane(k).iter().filter(|&&v| v as f64 >= cfg.mask_thresh).count();
    }
    for &o in &owner {
        if o != usize::MAX {
            won[o] += 1;
        }
    }

    let mut slot_id = vec![0u32; candidates.len()];
    let mut segments: Vec<SegmentInfo> = Vec::new();
    let mut stuff_id: BTreeMap<usize, usize> = BTreeMap::new();
    for (slot, &(_, label, score)) in candidates.iter().enumerate() {
        if won[slot] == 0 || won[slot] < cfg.min_area {
            continue;
        }
        if (won[slot] as f64) < cfg.overlap_thresh * own_area[slot] as f64 {
            continue;
        }
        let cat = &vocab.categories()[label];
        if !cat.is_thing {
            if let Some(&pos) = stuff_id.get(&label) {
                let seg: &mut SegmentInfo = &mut segments[pos];
                seg.score = seg.score.max(score);
                slot_id[slot] = seg.id;
                continue;
            }
            stuff_id.insert(label, segments.len());
        }
        let id = segments.len() as u32 + 1;
        slot_id[slot] = id;
        segments.push(SegmentInfo {
            id,
            category_id: cat.id,
            is_thing: cat.is_thing,
            score,
        });
    }

    let segment_ids = owner
        .iter()
        .map(|&o| if o == usize::MAX { 0 } else { slot_id[o] })
        .collect();
    let map = PanopticMap {
        height: image_h,
        width: image_w,
        segment_ids,
        segments,
    };
    map.check_table()?;
    Ok(map)
}

/// Vocabulary index of every pixel, [`VOID_CLASS`] where void.
pub fn semantic_project(pan: &PanopticMap, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let mut class_of: BTreeMap<u32, usize> = BTreeMap::new();
    for s in &pan.segments {
        let idx = vocab
            .index_of(s.category_id)
            .ok_or_else(|| Error::InvalidData(format!("category {} not in vocabulary", s.category_id)))?;
        class_of.insert(s.id, idx);
    }
    pan.segment_ids
        .iter()
        .map(|&id| {
            if id == 0 {
                Ok(VOID_CLASS)
            } else {
                class_of
                    .get(&id)
                    .copied()
                    .ok_or_else(|| Error::InvalidData(format!("segment {id} missing from table")))
            }
        })
        .collect()
}

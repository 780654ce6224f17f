use std::collections::BTreeMap;

use crate::error::{Error, Result};

use super::panoptic::{PanopticMap, SegmentInfo};
use super::vocab::Vocabulary;

/// Binary ground-truth masks at full image resolution.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroundTruth {
    pub height: usize,
    pub width: usize,
    pub masks: Vec<Vec<bool>>,
    /// Index into the vocabulary for each mask.
    pub classes: Vec<usize>,
    pub is_thing: Vec<bool>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.height * self.width;
        if self.classes.len() != self.masks.len() || self.is_thing.len() != self.masks.len() {
            return Err(Error::InvalidData("ground truth field lengths differ".into()));
        }
        let mut thing_owner = vec![usize::MAX; n];
        for (i, m) in self.masks.iter().enumerate() {
            if m.len() != n {
                return Err(Error::InvalidData(format!(
                    "mask {i} has {} pixels, expected {n}",
                    m.len()
                )));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::InvalidData(format!("mask {i} is empty")));
            }
            if self.is_thing[i] {
                for (p, _) in m.iter().enumerate().filter(|(_, &b)| b) {
                    if thing_owner[p] != usize::MAX {
                        return Err(Error::InvalidData(format!(
                            "thing masks {} and {i} overlap",
                            thing_owner[p]
                        )));
                    }
                    thing_owner[p] = i;
                }
            }
        }
        Ok(())
    }

    /// Output grid size for a given stride (ceil division).
    pub fn grid(&self, stride: usize) -> (usize, usize) {
        (self.height.div_ceil(stride), self.width.div_ceil(stride))
    }

    /// Samples every mask at the center of each `stride x stride` cell,
    /// clamped to the image.
    pub fn rasterize(&self, stride: usize) -> Vec<Vec<f64>> {
        let (gh, gw) = self.grid(stride);
        self.masks
            .iter()
            .map(|m| {
                let mut out = Vec::with_capacity(gh * gw);
                for gy in 0..gh {
                    let y = (gy * stride + stride / 2).min(self.height - 1);
                    for gx in 0..gw {
                        let x = (gx * stride + stride / 2).min(self.width - 1);
                        out.push(if m[y * self.width + x] { 1.0 } else { 0.0 });
                    }
                }
                out
            })
            .collect()
    }

    /// Panoptic map with segment id `i + 1` for mask `i`. Later masks win
    /// where stuff masks overlap.
    pub fn to_panoptic(&self, vocab: &Vocabulary) -> Result<PanopticMap> {
        let mut ids = vec![0u32; self.height * self.width];
        let mut segments = Vec::with_capacity(self.masks.len());
        for (i, m) in self.masks.iter().enumerate() {
            let cat = vocab
                .get(self.classes[i])
                .ok_or_else(|| Error::InvalidData(format!("class index {} outside vocabulary", self.classes[i])))?;
            for (p, _) in m.iter().enumerate().filter(|(_, &b)| b) {
                ids[p] = i as u32 + 1;
            }
            segments.push(SegmentInfo {
                id: i as u32 + 1,
                category_id: cat.id,
                is_thing: cat.is_thing,
                score: 1.0,
            });
        }
        let mut map = PanopticMap {
            height: self.height,
            width: self.width,
            segment_ids: ids,
            segments,
        };
        let areas = map.areas();
        map.segments.retain(|s| areas.contains_key(&s.id));
        Ok(map)
    }
}

/// One binary mask per thing segment, one per stuff category.
pub fn gt_from_panoptic(map: &PanopticMap, vocab: &Vocabulary) -> Result<GroundTruth> {
    map.check_table()?;
    let n = map.height * map.width;
    let mut order: Vec<(usize, bool)> = Vec::new();
    let mut slot_of_segment: BTreeMap<u32, usize> = BTreeMap::new();
    let mut stuff_slot: BTreeMap<usize, usize> = BTreeMap::new();
    for s in &map.segments {
        let idx = vocab
            .index_of(s.category_id)
            .ok_or_else(|| Error::InvalidData(format!("segment {} has unknown category {}", s.id, s.category_id)))?;
        let is_thing = vocab.get(idx).unwrap().is_thing;
        let slot = if is_thing {
            order.push((idx, true));
            order.len() - 1
        } else {
            *stuff_slot.entry(idx).or_insert_with(|| {
                order.push((idx, false));
                order.len() - 1
            })
        };
        slot_of_segment.insert(s.id, slot);
    }
    let mut masks = vec![vec![false; n]; order.len()];
    for (p, &id) in map.segment_ids.iter().enumerate() {
        if id != 0 {
            masks[slot_of_segment[&id]][p] = true;
        }
    }
    Ok(GroundTruth {
        height: map.height,
        width: map.width,
        masks,
        classes: order.iter().map(|o| o.0).collect(),
        is_thing: order.iter().map(|o| o.1).collect(),
    })
}

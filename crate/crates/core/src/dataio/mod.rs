//! COCO-panoptic interchange, vocabularies and ground truth.

mod gt;
mod panoptic;
mod vocab;

pub use gt::{gt_from_panoptic, GroundTruth};
pub use panoptic::{id_to_rgb, read_panoptic, rgb_to_id, write_panoptic, PanopticMap, SegmentInfo, MAX_SEGMENT_ID};
pub use vocab::{normalize_name, overlap_mask, Category, Synonyms, Vocabulary};

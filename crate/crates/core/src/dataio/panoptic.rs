use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::vocab::Vocabulary;

/// Largest id representable in a 24-bit RGB pixel, plus one.
pub const MAX_SEGMENT_ID: u32 = 1 << 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub id: u32,
    pub category_id: u32,
    #[serde(rename = "isthing")]
    pub is_thing: bool,
    pub score: f64,
}

/// Per-pixel segment ids (0 = void) plus the segment table.
#[derive(Clone, Debug, PartialEq)]
pub struct PanopticMap {
    pub height: usize,
    pub width: usize,
    pub segment_ids: Vec<u32>,
    pub segments: Vec<SegmentInfo>,
}

/// COCO-panoptic encoding of a segment id.
pub fn id_to_rgb(id: u32) -> Result<[u8; 3]> {
    if id >= MAX_SEGMENT_ID {
        return Err(Error::InvalidData(format!("segment id {id} does not fit in 24 bits")));
    }
    Ok([(id & 0xff) as u8, ((id >> 8) & 0xff) as u8, ((id >> 16) & 0xff) as u8])
}

pub fn rgb_to_id(rgb: [u8; 3]) -> u32 {
    rgb[0] as u32 + 256 * rgb[1] as u32 + 65536 * rgb[2] as u32
}

#[derive(Serialize, Deserialize)]
struct SegmentRecord {
    id: u32,
    category_id: u32,
    #[serde(rename = "isthing")]
    is_thing: bool,
    score: f64,
    area: u64,
}

#[derive(Serialize, Deserialize)]
struct SegmentsFile {
    height: usize,
    width: usize,
    segments_info: Vec<SegmentRecord>,
}

impl PanopticMap {
    /// An all-void map.
    pub fn void(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            segment_ids: vec![0; height * width],
            segments: Vec::new(),
        }
    }

    pub fn segment(&self, id: u32) -> Option<&SegmentInfo> {
        self.segments.iter().find(|s| s.id == id)
    }

    pub fn areas(&self) -> BTreeMap<u32, u64> {
        let mut areas = BTreeMap::new();
        for &id in &self.segment_ids {
            if id != 0 {
                *areas.entry(id).or_insert(0) += 1;
            }
        }
        areas
    }

    /// Checks that the grid and the segment table name the same ids.
    pub fn check_table(&self) -> Result<()> {
        if self.segment_ids.len() != self.height * self.width {
            return Err(Error::InvalidData(format!(
                "panoptic grid of {} pixels for {}x{}",
                self.segment_ids.len(),
                self.height,
                self.width
            )));
        }
        let mut table = BTreeSet::new();
        for s in &self.segments {
            if s.id == 0 {
                return Err(Error::InvalidData("segment table lists id 0".into()));
            }
            if s.id >= MAX_SEGMENT_ID {
                return Err(Error::InvalidData(format!(
                    "segment id {} does not fit in 24 bits",
                    s.id
                )));
            }
            if !table.insert(s.id) {
                return Err(Error::InvalidData(format!("segment id {} listed twice", s.id)));
            }
        }
        let present: BTreeSet<u32> = self.areas().into_keys().collect();
        if let Some(id) = present.difference(&table).next() {
            return Err(Error::InvalidData(format!(
                "segment id {id} appears in the image but not in the segment table"
            )));
        }
        if let Some(id) = table.difference(&present).next() {
            return Err(Error::InvalidData(format!(
                "segment id {id} is listed but covers no pixel"
            )));
        }
        Ok(())
    }

    /// Full invariant check: table consistency, categories from `vocab`,
    /// and at most one segment per stuff category.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        self.check_table()?;
        let mut stuff = BTreeSet::new();
        for s in &self.segments {
            let cat = vocab.by_id(s.category_id).ok_or_else(|| {
                Error::InvalidData(format!("segment {} has unknown category {}", s.id, s.category_id))
            })?;
            if cat.is_thing != s.is_thing {
                return Err(Error::InvalidData(format!(
                    "segment {} thing flag disagrees with category {}",
                    s.id, cat.name
                )));
            }
            if !cat.is_thing && !stuff.insert(s.category_id) {
                return Err(Error::InvalidData(format!(
                    "stuff category {} split across several segments",
                    cat.name
                )));
            }
        }
        Ok(())
    }
}

pub fn write_panoptic(map: &PanopticMap, png_path: &Path, segments_json: &Path) -> Result<()> {
    map.check_table()?;
    let mut rgb = Vec::with_capacity(map.segment_ids.len() * 3);
    for &id in &map.segment_ids {
        rgb.extend_from_slice(&id_to_rgb(id)?);
    }
    let file = File::create(png_path).map_err(|e| Error::io(png_path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), map.width as u32, map.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::Png {
        path: png_path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&rgb).map_err(png_err)?;
    writer.finish().map_err(png_err)?;

    let areas = map.areas();
    let records = map
        .segments
        .iter()
        .map(|s| SegmentRecord {
            id: s.id,
            category_id: s.category_id,
            is_thing: s.is_thing,
            score: s.score,
            area: areas.get(&s.id).copied().unwrap_or(0),
        })
        .collect();
    let doc = SegmentsFile {
        height: map.height,
        width: map.width,
        segments_info: records,
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| Error::json(segments_json, e))?;
    fs::write(segments_json, text + "\n").map_err(|e| Error::io(segments_json, e))
}

pub fn read_panoptic(png_path: &Path, segments_json: &Path) -> Result<PanopticMap> {
    let file = File::open(png_path).map_err(|e| Error::io(png_path, e))?;
    let png_err = |message: String| Error::Png {
        path: png_path.to_path_buf(),
        message,
    };
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| png_err(e.to_string()))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(format!(
            "expected 8-bit RGB, found {:?} at {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![
        0u8;
        reader
            .output_buffer_size()
            .ok_or_else(|| png_err("image too large".into()))?
    ];
    let frame = reader.next_frame(&mut buf).map_err(|e| png_err(e.to_string()))?;
    let bytes = &buf[..frame.buffer_size()];
    let segment_ids: Vec<u32> = bytes.chunks_exact(3).map(|p| rgb_to_id([p[0], p[1], p[2]])).collect();

    let text = fs::read_to_string(segments_json).map_err(|e| Error::io(segments_json, e))?;
    let doc: SegmentsFile = serde_json::from_str(&text).map_err(|e| Error::json(segments_json, e))?;
    if doc.height != height || doc.width != width {
        return Err(Error::InvalidData(format!(
            "segment table is for {}x{} but the PNG is {height}x{width}",
            doc.height, doc.width
        )));
    }
    let map = PanopticMap {
        height,
        width,
        segment_ids,
        segments: doc
            .segments_info
            .iter()
            .map(|r| SegmentInfo {
                id: r.id,
                category_id: r.category_id,
                is_thing: r.is_thing,
                score: r.score,
            })
            .collect(),
    };
    map.check_table()?;
    let areas = map.areas();
    for r in &doc.segments_info {
        if areas.get(&r.id).copied().unwrap_or(0) != r.area {
            return Err(Error::InvalidData(format!(
                "segment {} declares area {} but covers {} pixels",
                r.id,
                r.area,
                areas.get(&r.id).copied().unwrap_or(0)
            )));
        }
    }
    Ok(map)
}

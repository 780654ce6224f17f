use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{Category, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{l2_norm, Tensor};

use super::store::{read_tensor_dir, take, write_tensor_dir};

/// Stride of the spatial backbone map relative to the image.
pub const BACKBONE_STRIDE: usize = 16;

const NORM_TOLERANCE: f64 = 1e-5;

/// Frozen-backbone inputs for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    /// `D_sam x ceil(H/16) x ceil(W/16)`.
    pub f_sam: Tensor,
    /// `D_clip x H_c x W_c`; the grid need not match `f_sam`.
    pub f_clip: Tensor,
    /// `C x D_emb`, unit rows.
    pub g_text: Tensor,
    pub image_h: usize,
    pub image_w: usize,
    pub vocabulary: Vocabulary,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleMeta {
    kind: String,
    image_h: usize,
    image_w: usize,
    vocabulary: Vec<Category>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seen_names: Option<Vec<String>>,
}

const BUNDLE_KIND: &str = "feature-bundle";

impl FeatureBundle {
    pub fn backbone_grid(&self) -> (usize, usize) {
        (
            self.image_h.div_ceil(BACKBONE_STRIDE),
            self.image_w.div_ceil(BACKBONE_STRIDE),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let (_, h, w) = self.f_sam.as_chw("f_sam")?;
        if (h, w) != self.backbone_grid() {
            return Err(Error::Shape(format!(
                "f_sam grid {h}x{w} does not match a {}x{} image at stride {BACKBONE_STRIDE}",
                self.image_h, self.image_w
            )));
        }
        self.f_clip.as_chw("f_clip")?;
        let (c, _) = self.g_text.as_matrix("g_text")?;
        if c != self.vocabulary.len() {
            return Err(Error::Shape(format!(
                "g_text has {c} rows for a vocabulary of {}",
                self.vocabulary.len()
            )));
        }
        for t in [&self.f_sam, &self.f_clip, &self.g_text] {
            t.ensure_finite("bundle tensor")?;
        }
        for r in 0..c {
            let n = l2_norm(self.g_text.row(r)) as f64;
            if (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::InvalidData(format!(
                    "text embedding not normalized: row {r} has norm {n}"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        let meta = BundleMeta {
            kind: BUNDLE_KIND.into(),
            image_h: self.image_h,
            image_w: self.image_w,
            vocabulary: self.vocabulary.categories().to_vec(),
            seen_names: self.vocabulary.seen_names().map(<[String]>::to_vec),
        };
        let meta = serde_json::to_value(meta).map_err(|e| Error::json(dir, e))?;
        write_tensor_dir(
            dir,
            meta,
            &[
                ("f_sam".into(), &self.f_sam),
                ("f_clip".into(), &self.f_clip),
                ("g_text".into(), &self.g_text),
            ],
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (meta, mut tensors) = read_tensor_dir(dir)?;
        let meta: BundleMeta = serde_json::from_value(meta).map_err(|e| Error::json(dir, e))?;
        if meta.kind != BUNDLE_KIND {
            return Err(Error::InvalidData(format!(
                "{} holds a {:?}, not a feature bundle",
                dir.display(),
                meta.kind
            )));
        }
        let mut vocabulary = Vocabulary::new(meta.vocabulary)?;
        if let Some(seen) = meta.seen_names {
            vocabulary = vocabulary.with_seen_names(seen);
        }
        let bundle = Self {
            f_sam: take(&mut tensors, "f_sam", dir)?,
            f_clip: take(&mut tensors, "f_clip", dir)?,
            g_text: take(&mut tensors, "g_text", dir)?,
            image_h: meta.image_h,
            image_w: meta.image_w,
            vocabulary,
        };
        bundle.validate()?;
        Ok(bundle)
    }
}

/// Convenience alias used by callers that only need the load path.
pub fn load_bundle(dir: &Path) -> Result<FeatureBundle> {
    FeatureBundle::load(dir)
}

pub fn save_bundle(bundle: &FeatureBundle, dir: &Path) -> Result<()> {
    bundle.save(dir)
}

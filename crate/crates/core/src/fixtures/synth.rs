use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::{Category, GroundTruth, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, Tensor};

use super::bundle::{FeatureBundle, BACKBONE_STRIDE};

/// Shape of a synthetic scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub image_h: usize,
    pub image_w: usize,
    pub d_sam: usize,
    pub d_clip: usize,
    pub d_emb: usize,
    pub c_test: usize,
    pub n_gt_segments: usize,
    /// Pixel stride of the CLIP feature grid.
    pub clip_stride: usize,
    /// Standard deviation of per-cell noise on `f_sam`.
    pub sam_noise: f32,
    /// Standard deviation of per-cell noise on `f_clip`.
    pub clip_noise: f32,
    /// Fraction of categories listed as seen in training.
    pub seen_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_h: 64,
            image_w: 64,
            d_sam: 32,
            d_clip: 16,
            d_emb: 16,
            c_test: 6,
            n_gt_segments: 4,
            clip_stride: BACKBONE_STRIDE,
            sam_noise: 0.05,
            clip_noise: 0.02,
            seen_fraction: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("image_h", self.image_h),
            ("image_w", self.image_w),
            ("d_sam", self.d_sam),
            ("d_clip", self.d_clip),
            ("d_emb", self.d_emb),
            ("c_test", self.c_test),
            ("n_gt_segments", self.n_gt_segments),
            ("clip_stride", self.clip_stride),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("synth.{name} must be positive")));
            }
        }
        if self.d_clip != self.d_emb {
            return Err(Error::InvalidArgument(format!(
                "synth.d_clip ({}) must equal synth.d_emb ({})",
                self.d_clip, self.d_emb
            )));
        }
        let (gh, gw) = self.cell_grid();
        if self.n_gt_segments > gh * gw {
            return Err(Error::InvalidArgument(format!(
                "{} segments do not fit the {gh}x{gw} feature grid of a {}x{} image",
                self.n_gt_segments, self.image_h, self.image_w
            )));
        }
        for (name, v) in [("sam_noise", self.sam_noise), ("clip_noise", self.clip_noise)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("synth.{name} must be >= 0")));
            }
        }
        if !(0.0..=1.0).contains(&self.seen_fraction) {
            return Err(Error::InvalidArgument("synth.seen_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn cell_grid(&self) -> (usize, usize) {
        (
            self.image_h.div_ceil(BACKBONE_STRIDE),
            self.image_w.div_ceil(BACKBONE_STRIDE),
        )
    }
}

/// Categories `class_0..class_{C-1}`, ids from 1, even indices are things.
/// The first `seen_fraction` of them are marked seen.
pub fn synth_vocabulary(c: usize, seen_fraction: f64) -> Result<Vocabulary> {
    let cats = (0..c)
        .map(|i| Category {
            id: i as u32 + 1,
            name: format!("class_{i}"),
            is_thing: i % 2 == 0,
        })
        .collect();
    let n_seen = (c as f64 * seen_fraction).round() as usize;
    Ok(Vocabulary::new(cats)?.with_seen_names((0..n_seen).map(|i| format!("class_{i}")).collect()))
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal) * scale).collect()
}

/// Segment index of every stride-16 cell: nearest of `n` distinct seed
/// cells, lower seed index on ties.
fn voronoi_cells(rng: &mut ChaCha8Rng, gh: usize, gw: usize, n: usize) -> Vec<usize> {
    let seeds: Vec<(usize, usize)> = sample(rng, gh * gw, n).into_iter().map(|c| (c / gw, c % gw)).collect();
    let mut out = vec![0; gh * gw];
    for y in 0..gh {
        for x in 0..gw {
            let d2 = |&(sy, sx): &(usize, usize)| {
                let dy = y as i64 - sy as i64;
                let dx = x as i64 - sx as i64;
                dy * dy + dx * dx
            };
            let mut best = 0;
            for (i, s) in seeds.iter().enumerate() {
                if d2(s) < d2(&seeds[best]) {
                    best = i;
                }
            }
            out[y * gw + x] = best;
        }
    }
    out
}

fn assign_classes(rng: &mut ChaCha8Rng, vocab: &Vocabulary, n: usize) -> Vec<usize> {
    let c = vocab.len();
    let mut classes: Vec<usize> = (0..c).collect();
    classes.shuffle(rng);
    classes.truncate(n.min(c));
    let things: Vec<usize> = (0..c).filter(|&i| vocab.categories()[i].is_thing).collect();
    while classes.len() < n {
        classes.push(things[rng.random_range(0..things.len())]);
    }
    classes
}

/// Seeded scene whose features are constant per segment up to noise.
///
/// Segments are unions of stride-16 cells. `f_sam` holds a random Gaussian
/// code per segment; `f_clip` holds the text embedding of the segment's
/// class, so the CLIP path classifies correctly up to noise.
pub fn synth_bundle(seed: u64, spec: &SynthSpec) -> Result<(FeatureBundle, GroundTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (gh, gw) = spec.cell_grid();
    let n = spec.n_gt_segments;
    let cell_segment = voronoi_cells(&mut rng, gh, gw, n);

    let vocabulary = synth_vocabulary(spec.c_test, spec.seen_fraction)?;
    let classes = assign_classes(&mut rng, &vocabulary, n);

    let mut g_text = Tensor::zeros(&[spec.c_test, spec.d_emb]);
    for c in 0..spec.c_test {
        let mut row = gaussian(&mut rng, spec.d_emb, 1.0);
        l2_normalize(&mut row);
        g_text.row_mut(c).copy_from_slice(&row);
    }

    let codes: Vec<Vec<f32>> = (0..n).map(|_| gaussian(&mut rng, spec.d_sam, 1.0)).collect();
    let mut f_sam = Tensor::zeros(&[spec.d_sam, gh, gw]);
    for cell in 0..gh * gw {
        let noise = gaussian(&mut rng, spec.d_sam, spec.sam_noise);
        let code = &codes[cell_segment[cell]];
        for ch in 0..spec.d_sam {
            f_sam.data_mut()[ch * gh * gw + cell] = code[ch] + noise[ch];
        }
    }

    let (h, w) = (spec.image_h, spec.image_w);
    let pixel_segment = |y: usize, x: usize| cell_segment[(y / BACKBONE_STRIDE) * gw + x / BACKBONE_STRIDE];

    let s = spec.clip_stride;
    let (ch_, cw) = (h.div_ceil(s), w.div_ceil(s));
    let mut f_clip = Tensor::zeros(&[spec.d_clip, ch_, cw]);
    for cy in 0..ch_ {
        for cx in 0..cw {
            let y = (cy * s + s / 2).min(h - 1);
            let x = (cx * s + s / 2).min(w - 1);
            let text = g_text.row(classes[pixel_segment(y, x)]).to_vec();
            let noise = gaussian(&mut rng, spec.d_clip, spec.clip_noise);
            for ch in 0..spec.d_clip {
                f_clip.data_mut()[(ch * ch_ + cy) * cw + cx] = text[ch] + noise[ch];
            }
        }
    }

    let mut masks = vec![vec![false; h * w]; n];
    for y in 0..h {
        for x in 0..w {
            masks[pixel_segment(y, x)][y * w + x] = true;
        }
    }
    let is_thing = classes.iter().map(|&c| vocabulary.categories()[c].is_thing).collect();
    let gt = GroundTruth {
        height: h,
        width: w,
        masks,
        classes,
        is_thing,
    };
    gt.validate()?;
    let bundle = FeatureBundle {
        f_sam,
        f_clip,
        g_text,
        image_h: h,
        image_w: w,
        vocabulary,
    };
    bundle.validate()?;
    Ok((bundle, gt))
}

//! Seeded random inputs for the ensemble and assignment checks.

use ovseg::inference::ClassDistributions;
use ovseg::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct EnsembleCase {
    pub ldp: Vec<Vec<f64>>,
    pub clip: Vec<Vec<f64>>,
    pub overlap: Vec<bool>,
    pub alpha: f64,
    pub beta: f64,
    pub p_iou: Vec<f64>,
}

fn distribution(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let sharpness: f64 = rng.random_range(0.1..6.0);
    let e: Vec<f64> = (0..c)
        .map(|_| (rng.random_range(-1.0f64..1.0) * sharpness).exp())
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `N <= 8` masks over `2 <= C <= 10` classes; some IoUs are exactly 0 or 1.
pub fn ensemble_case(seed: u64) -> EnsembleCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=8);
    let c = rng.random_range(2..=10);
    EnsembleCase {
        ldp: (0..n).map(|_| distribution(&mut rng, c)).collect(),
        clip: (0..n).map(|_| distribution(&mut rng, c)).collect(),
        overlap: (0..c).map(|_| rng.random_bool(0.5)).collect(),
        alpha: rng.random_range(0.0..=1.0),
        beta: rng.random_range(0.0..=1.0),
        p_iou: (0..n)
            .map(|_| match rng.random_range(0..10) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.random_range(0.0..=1.0),
            })
            .collect(),
    }
}

pub fn matrix(rows: &[Vec<f64>]) -> Tensor<f64> {
    let c = rows.first().map_or(0, Vec::len);
    Tensor::from_vec(&[rows.len(), c], rows.concat()).unwrap()
}

impl EnsembleCase {
    pub fn dist(&self) -> ClassDistributions {
        ClassDistributions {
            p_ldp_raw: matrix(&self.ldp),
            p_clip_raw: matrix(&self.clip),
            overlap_mask: self.overlap.clone(),
            alpha: self.alpha,
            beta: self.beta,
        }
    }
}

/// Random `R x C` cost matrix with `1 <= R, C <= max`; small integer
/// entries when `ties` so that optima are shared.
pub fn cost_matrix(seed: u64, max: usize, ties: bool) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rng.random_range(1..=max);
    let c = rng.random_range(1..=max);
    (0..r)
        .map(|_| {
            (0..c)
                .map(|_| {
                    if ties {
                        rng.random_range(0..4) as f64
                    } else {
                        rng.random_range(-10.0..10.0)
                    }
                })
                .collect()
        })
        .collect()
}

/// Vocabulary of `c` categories, even indices things, ids `10 + i`.
pub fn vocabulary(c: usize) -> ovseg::dataio::Vocabulary {
    use ovseg::dataio::{Category, Vocabulary};
    Vocabulary::new(
        (0..c)
            .map(|i| Category {
                id: 10 + i as u32,
                name: format!("cat{i}"),
                is_thing: i % 2 == 0,
            })
            .collect(),
    )
    .unwrap()
}

/// Paints random rectangles; stuff categories reuse one id.
fn paint(
    rng: &mut ChaCha8Rng,
    vocab: &ovseg::dataio::Vocabulary,
    h: usize,
    w: usize,
    rects: usize,
    void_rate: f64,
) -> ovseg::dataio::PanopticMap {
    use ovseg::dataio::{PanopticMap, SegmentInfo};
    let mut ids = vec![0u32; h * w];
    let mut segments: Vec<SegmentInfo> = Vec::new();
    let mut stuff_id = std::collections::BTreeMap::new();
    for _ in 0..rects {
        let cat = &vocab.categories()[rng.random_range(0..vocab.len())];
        let id = if cat.is_thing {
            None
        } else {
            stuff_id.get(&cat.id).copied()
        };
        let id = id.unwrap_or_else(|| {
            let id = segments.len() as u32 * 7 + 3;
            segments.push(SegmentInfo {
                id,
                category_id: cat.id,
                is_thing: cat.is_thing,
                score: 1.0,
            });
            if !cat.is_thing {
                stuff_id.insert(cat.id, id);
            }
            id
        });
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (y1, x1) = (rng.random_range(y0..h) + 1, rng.random_range(x0..w) + 1);
        for y in y0..y1 {
            for x in x0..x1 {
                ids[y * w + x] = id;
            }
        }
    }
    for v in ids.iter_mut() {
        if rng.random_bool(void_rate) {
            *v = 0;
        }
    }
    let present: std::collections::BTreeSet<u32> = ids.iter().copied().collect();
    segments.retain(|s| present.contains(&s.id));
    PanopticMap {
        height: h,
        width: w,
        segment_ids: ids,
        segments,
    }
}

/// Ground truth plus a prediction that keeps most segments, shifts some
/// pixels and relabels a few.
pub fn panoptic_pair(
    seed: u64,
    vocab: &ovseg::dataio::Vocabulary,
) -> (ovseg::dataio::PanopticMap, ovseg::dataio::PanopticMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rng.random_range(8..24), rng.random_range(8..24));
    let n = rng.random_range(1..7);
    let gt = paint(&mut rng, vocab, h, w, n, 0.03);
    if rng.random_bool(0.25) {
        let n = rng.random_range(1..7);
        let pred = paint(&mut rng, vocab, h, w, n, 0.05);
        return (pred, gt);
    }
    let mut pred = gt.clone();
    let shift = rng.random_range(0..3);
    for y in 0..h {
        for x in (0..w).rev() {
            let src = x.saturating_sub(shift);
            pred.segment_ids[y * w + x] = gt.segment_ids[y * w + src];
        }
    }
    for s in pred.segments.iter_mut() {
        s.id += 1000;
        if rng.random_bool(0.2) {
            let cat = &vocab.categories()[rng.random_range(0..vocab.len())];
            if cat.is_thing == s.is_thing {
                s.category_id = cat.id;
            }
        }
    }
    for v in pred.segment_ids.iter_mut() {
        if *v != 0 {
            *v += 1000;
        }
    }
    // stuff segments that now share a category merge into one id
    let mut first: std::collections::BTreeMap<u32, u32> = std::collections::BTreeMap::new();
    let mut rename = std::collections::BTreeMap::new();
    for s in &pred.segments {
        if !s.is_thing {
            let keep = *first.entry(s.category_id).or_insert(s.id);
            rename.insert(s.id, keep);
        }
    }
    for v in pred.segment_ids.iter_mut() {
        if let Some(&k) = rename.get(v) {
            *v = k;
        }
    }
    pred.segments.retain(|s| s.is_thing || rename.get(&s.id) == Some(&s.id));
    let present: std::collections::BTreeSet<u32> = pred.segment_ids.iter().copied().collect();
    pred.segments.retain(|s| present.contains(&s.id));
    (pred, gt)
}

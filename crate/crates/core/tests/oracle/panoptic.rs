//! From-scratch panoptic quality by walking every pixel pair.

use ovseg::dataio::{PanopticMap, Vocabulary};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub iou_sum: f64,
}

fn category(map: &PanopticMap, id: u32) -> u32 {
    map.segments.iter().find(|s| s.id == id).unwrap().category_id
}

/// Per-vocabulary-index counts summed over `pairs` of `(pred, gt)`.
pub fn counts(pairs: &[(&PanopticMap, &PanopticMap)], vocab: &Vocabulary) -> Vec<Counts> {
    let mut out = vec![Counts::default(); vocab.len()];
    for (pred, gt) in pairs {
        let area = |m: &PanopticMap, id: u32| m.segment_ids.iter().filter(|&&v| v == id).count() as u64;
        let both = |g: u32, p: u32| {
            gt.segment_ids
                .iter()
                .zip(&pred.segment_ids)
                .filter(|(&a, &b)| a == g && b == p)
                .count() as u64
        };
        let mut gt_hit = vec![false; gt.segments.len()];
        let mut pred_hit = vec![false; pred.segments.len()];
        for (gi, g) in gt.segments.iter().enumerate() {
            for (pi, p) in pred.segments.iter().enumerate() {
                if g.category_id != p.category_id {
                    continue;
                }
                let inter = both(g.id, p.id);
                let union = area(gt, g.id) + area(pred, p.id) - inter - both(0, p.id);
                if union == 0 {
                    continue;
                }
                let iou = inter as f64 / union as f64;
                if iou > 0.5 {
                    gt_hit[gi] = true;
                    pred_hit[pi] = true;
                    let c = &mut out[vocab.index_of(g.category_id).unwrap()];
                    c.tp += 1;
                    c.iou_sum += iou;
                }
            }
        }
        for (gi, g) in gt.segments.iter().enumerate() {
            if !gt_hit[gi] && area(gt, g.id) > 0 {
                out[vocab.index_of(g.category_id).unwrap()].fn_ += 1;
            }
        }
        for (pi, p) in pred.segments.iter().enumerate() {
            let a = area(pred, p.id);
            if pred_hit[pi] || a == 0 || 2 * both(0, p.id) > a {
                continue;
            }
            out[vocab.index_of(category(pred, p.id)).unwrap()].fp += 1;
        }
    }
    out
}

/// Mean PQ over categories with at least one ground-truth segment.
pub fn mean_pq(counts: &[Counts]) -> f64 {
    let present: Vec<&Counts> = counts.iter().filter(|c| c.tp + c.fn_ > 0).collect();
    if present.is_empty() {
        return 0.0;
    }
    let pq = |c: &Counts| {
        if c.tp == 0 {
            return 0.0;
        }
        let sq = c.iou_sum / c.tp as f64;
        let rq = c.tp as f64 / (c.tp as f64 + 0.5 * c.fp as f64 + 0.5 * c.fn_ as f64);
        sq * rq
    };
    present.iter().map(|c| pq(c)).sum::<f64>() / present.len() as f64
}

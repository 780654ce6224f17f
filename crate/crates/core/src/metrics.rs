//! Panoptic quality and mean IoU.
//!
//! Matched IoUs are summed in 53-bit fixed point, so accumulators merge
//! exactly in any order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::{PanopticMap, Vocabulary};
use crate::error::{shape_err, Error, Result};
use crate::inference::VOID_CLASS;

const IOU_SCALE: f64 = (1u64 << 53) as f64;

/// Per-category counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PqCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// Sum of matched IoUs times 2^53. Exact: every matched IoU is a double
    /// in (0.5, 1], hence a multiple of 2^-53.
    pub iou_sum_fixed: u128,
}

impl PqCounts {
    pub fn iou_sum(&self) -> f64 {
        self.iou_sum_fixed as f64 / IOU_SCALE
    }

    fn add(&mut self, o: &PqCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.iou_sum_fixed += o.iou_sum_fixed;
    }
}

/// Fixed-point form of a matched IoU.
pub fn iou_to_fixed(iou: f64) -> u128 {
    (iou * IOU_SCALE) as u128
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PqAccumulator {
    pub counts: Vec<PqCounts>,
    pub is_thing: Vec<bool>,
    pub is_seen: Vec<bool>,
}

impl PqAccumulator {
    /// `is_seen` is usually the category overlap mask of the vocabulary.
    pub fn new(vocab: &Vocabulary, is_seen: Vec<bool>) -> Result<Self> {
        if is_seen.len() != vocab.len() {
            return Err(shape_err!(
                "{} seen flags for {} categories",
                is_seen.len(),
                vocab.len()
            ));
        }
        Ok(Self {
            counts: vec![PqCounts::default(); vocab.len()],
            is_thing: vocab.categories().iter().map(|c| c.is_thing).collect(),
            is_seen,
        })
    }

    pub fn merge(&mut self, other: &PqAccumulator) -> Result<()> {
        if self.is_thing != other.is_thing || self.is_seen != other.is_seen {
            return Err(Error::InvalidArgument(
                "cannot merge accumulators over different vocabularies".into(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.add(b);
        }
        Ok(())
    }
}

fn category_index(map: &PanopticMap, vocab: &Vocabulary) -> Result<BTreeMap<u32, usize>> {
    map.segments
        .iter()
        .map(|s| {
            vocab
                .index_of(s.category_id)
                .map(|i| (s.id, i))
                .ok_or_else(|| Error::InvalidData(format!("category {} not in vocabulary", s.category_id)))
        })
        .collect()
}

/// Adds one image. Segments match when they share a category and their
/// IoU, with ground-truth void pixels left out of the union, exceeds 1/2.
/// An unmatched prediction lying mostly on ground-truth void is ignored.
pub fn pq_accumulate(acc: &mut PqAccumulator, pred: &PanopticMap, gt: &PanopticMap, vocab: &Vocabulary) -> Result<()> {
    if (pred.height, pred.width) != (gt.height, gt.width) {
        return Err(shape_err!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height,
            pred.width,
            gt.height,
            gt.width
        ));
    }
    if acc.counts.len() != vocab.len() {
        return Err(shape_err!(
            "accumulator over {} categories, vocabulary {}",
            acc.counts.len(),
            vocab.len()
        ));
    }
    pred.check_table()?;
    gt.check_table()?;
    let pred_cat = category_index(pred, vocab)?;
    let gt_cat = category_index(gt, vocab)?;

    let mut inter: BTreeMap<(u32, u32), u64> = BTreeMap::new();
    for (&g, &p) in gt.segment_ids.iter().zip(&pred.segment_ids) {
        *inter.entry((g, p)).or_insert(0) += 1;
    }
    let gt_area = gt.areas();
    let pred_area = pred.areas();
    let on_void = |p: u32| inter.get(&(0, p)).copied().unwrap_or(0);

    let mut gt_matched = BTreeMap::new();
    let mut pred_matched = BTreeMap::new();
    for (&(g, p), &i) in &inter {
        if g == 0 || p == 0 || gt_cat[&g] != pred_cat[&p] {
            continue;
        }
        let union = gt_area[&g] + pred_area[&p] - i - on_void(p);
        let iou = i as f64 / union as f64;
        if iou > 0.5 {
            gt_matched.insert(g, ());
            pred_matched.insert(p, ());
            let c = &mut acc.counts[gt_cat[&g]];
            c.tp += 1;
            c.iou_sum_fixed += iou_to_fixed(iou);
        }
    }
    for (&g, _) in &gt_area {
        if !gt_matched.contains_key(&g) {
            acc.counts[gt_cat[&g]].fn_ += 1;
        }
    }
    for (&p, &area) in &pred_area {
        if pred_matched.contains_key(&p) {
            continue;
        }
        if on_void(p) * 2 > area {
            continue;
        }
        acc.counts[pred_cat[&p]].fp += 1;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryPq {
    pub id: u32,
    pub name: String,
    pub is_thing: bool,
    pub is_seen: bool,
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    #[serde(flatten)]
    pub counts: PqCounts,
}

/// Unweighted means over the categories of a split that occur in the
/// ground truth; `n` is how many there were.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PqAggregate {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PqReport {
    pub all: PqAggregate,
    pub things: PqAggregate,
    pub stuff: PqAggregate,
    pub seen: PqAggregate,
    pub unseen: PqAggregate,
    pub per_category: Vec<CategoryPq>,
}

/// `(pq, sq, rq)` of one category.
pub fn pq_sq_rq(c: &PqCounts) -> (f64, f64, f64) {
    let sq = if c.tp == 0 { 0.0 } else { c.iou_sum() / c.tp as f64 };
    let denom = c.tp as f64 + 0.5 * c.fp as f64 + 0.5 * c.fn_ as f64;
    let rq = if denom == 0.0 { 0.0 } else { c.tp as f64 / denom };
    (sq * rq, sq, rq)
}

pub fn pq_report(acc: &PqAccumulator, vocab: &Vocabulary) -> PqReport {
    let per_category: Vec<CategoryPq> = vocab
        .categories()
        .iter()
        .enumerate()
        .map(|(i, cat)| {
            let c = acc.counts[i];
            let (pq, sq, rq) = pq_sq_rq(&c);
            CategoryPq {
                id: cat.id,
                name: cat.name.clone(),
                is_thing: acc.is_thing[i],
                is_seen: acc.is_seen[i],
                pq,
                sq,
                rq,
                counts: c,
            }
        })
        .collect();
    let aggregate = |keep: &dyn Fn(&CategoryPq) -> bool| {
        let rows: Vec<&CategoryPq> = per_category
            .iter()
            .filter(|c| c.counts.tp + c.counts.fn_ > 0 && keep(c))
            .collect();
        if rows.is_empty() {
            return PqAggregate::default();
        }
        let n = rows.len() as f64;
        PqAggregate {
            pq: rows.iter().map(|c| c.pq).sum::<f64>() / n,
            sq: rows.iter().map(|c| c.sq).sum::<f64>() / n,
            rq: rows.iter().map(|c| c.rq).sum::<f64>() / n,
            n: rows.len(),
        }
    };
    PqReport {
        all: aggregate(&|_| true),
        things: aggregate(&|c| c.is_thing),
        stuff: aggregate(&|c| !c.is_thing),
        seen: aggregate(&|c| c.is_seen),
        unseen: aggregate(&|c| !c.is_seen),
        per_category,
    }
}

impl PqReport {
    /// Aligned text table, split summary first.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>7} {:>7} {:>7} {:>5}", "split", "PQ", "SQ", "RQ", "n");
        for (name, a) in [
            ("all", &self.all),
            ("things", &self.things),
            ("stuff", &self.stuff),
            ("seen", &self.seen),
            ("unseen", &self.unseen),
        ] {
            let _ = writeln!(
                s,
                "{:<10} {:>7.3} {:>7.3} {:>7.3} {:>5}",
                name,
                100.0 * a.pq,
                100.0 * a.sq,
                100.0 * a.rq,
                a.n
            );
        }
        let width = self.per_category.iter().map(|c| c.name.len()).max().unwrap_or(0).max(8);
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<width$} {:>5} {:>4} {:>7} {:>7} {:>7} {:>4} {:>4} {:>4}",
            "category", "thing", "seen", "PQ", "SQ", "RQ", "TP", "FP", "FN"
        );
        for c in &self.per_category {
            let _ = writeln!(
                s,
                "{:<width$} {:>5} {:>4} {:>7.3} {:>7.3} {:>7.3} {:>4} {:>4} {:>4}",
                c.name,
                if c.is_thing { "y" } else { "n" },
                if c.is_seen { "y" } else { "n" },
                100.0 * c.pq,
                100.0 * c.sq,
                100.0 * c.rq,
                c.counts.tp,
                c.counts.fp,
                c.counts.fn_
            );
        }
        s
    }
}

/// Per-class intersection and union pixel counts over any number of images.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticAccumulator {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub miou: f64,
    /// `None` for classes with empty union.
    pub per_class: Vec<Option<f64>>,
}

impl SemanticAccumulator {
    pub fn new(c: usize) -> Self {
        Self {
            intersection: vec![0; c],
            union: vec![0; c],
        }
    }

    /// Ground-truth void pixels are skipped; predicted void counts against
    /// the ground-truth class.
    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(shape_err!("semantic grids of {} and {} pixels", pred.len(), gt.len()));
        }
        let c = self.intersection.len();
        for (&p, &g) in pred.iter().zip(gt) {
            if g == VOID_CLASS {
                continue;
            }
            if g >= c || (p != VOID_CLASS && p >= c) {
                return Err(Error::InvalidData(format!("class index outside {c} classes")));
            }
            if p == g {
                self.intersection[g] += 1;
                self.union[g] += 1;
            } else {
                self.union[g] += 1;
                if p != VOID_CLASS {
                    self.union[p] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &SemanticAccumulator) -> Result<()> {
        if self.intersection.len() != other.intersection.len() {
            return Err(shape_err!("cannot merge mIoU counts over different class counts"));
        }
        for (a, b) in self.intersection.iter_mut().zip(&other.intersection) {
            *a += b;
        }
        for (a, b) in self.union.iter_mut().zip(&other.union) {
            *a += b;
        }
        Ok(())
    }

    pub fn report(&self) -> MiouReport {
        let per_class: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MiouReport { miou, per_class }
    }
}

/// mIoU of a single pair of category grids.
pub fn miou(pred_sem: &[usize], gt_sem: &[usize], c: usize) -> Result<MiouReport> {
    let mut acc = SemanticAccumulator::new(c);
    acc.add(pred_sem, gt_sem)?;
    Ok(acc.report())
}

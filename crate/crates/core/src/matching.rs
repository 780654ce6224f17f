//! One-to-one assignment between ground-truth segments and predictions.

use crate::dataio::GroundTruth;
use crate::decoder::MaskPredictions;
use crate::error::{shape_err, Error, Result};
use crate::losses::{bce_with_logits, dice_loss};
use crate::numerics::Tensor;

/// Mask-transformer matching weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostWeights {
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            bce: 5.0,
            dice: 5.0,
        }
    }
}

/// Pairs `(row, column)` sorted by row; for a cost matrix built by
/// [`match_cost`] rows are ground-truth segments and columns predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    /// Column matched to each row, if any.
    pub fn column_of(&self, rows: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; rows];
        for &(i, j) in &self.pairs {
            out[i] = Some(j);
        }
        out
    }
}

/// Minimum-cost assignment on a rows <= cols matrix given as a closure.
/// Returns the column of each row. Potentials method, O(n^2 m).
fn solve_rows_le_cols(n: usize, m: usize, a: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of[p[j] - 1] = j - 1;
        }
    }
    col_of
}

/// Optimal cost of matching `min(rows, cols)` pairs within a submatrix.
fn sub_optimum(cost: &[f64], width: usize, rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    let at = |r: usize, c: usize| cost[rows[r] * width + cols[c]];
    if rows.len() <= cols.len() {
        let col_of = solve_rows_le_cols(rows.len(), cols.len(), at);
        col_of.iter().enumerate().map(|(r, &c)| at(r, c)).sum()
    } else {
        let row_of = solve_rows_le_cols(cols.len(), rows.len(), |c, r| at(r, c));
        row_of.iter().enumerate().map(|(c, &r)| at(r, c)).sum()
    }
}

/// Minimum total cost over one-to-one assignments of `min(R, C)` pairs.
/// Among optimal assignments (within a 1e-9 relative tolerance) the
/// lexicographically smallest sorted pair list is returned.
pub fn hungarian(cost: &Tensor<f64>) -> Result<Assignment> {
    let (r, c) = cost.as_matrix("cost matrix")?;
    if cost.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cost matrix contains a non-finite entry".into()));
    }
    let data = cost.data();
    let all_rows: Vec<usize> = (0..r).collect();
    let all_cols: Vec<usize> = (0..c).collect();
    let optimum = sub_optimum(data, c, &all_rows, &all_cols);
    let tol = 1e-9 * optimum.abs().max(1.0);

    let target = r.min(c);
    let mut pairs = Vec::with_capacity(target);
    let mut fixed = 0.0;
    let mut free_cols = all_cols;
    for i in 0..r {
        if pairs.len() == target {
            break;
        }
        let rest_rows: Vec<usize> = (i + 1..r).collect();
        let need_after_match = target - pairs.len() - 1;
        let mut chosen = None;
        if rest_rows.len().min(free_cols.len() - 1) >= need_after_match {
            for (pos, &j) in free_cols.iter().enumerate() {
                let mut cols = free_cols.clone();
                cols.remove(pos);
                let total = fixed + data[i * c + j] + sub_optimum(data, c, &rest_rows, &cols);
                if total <= optimum + tol {
                    chosen = Some(pos);
                    break;
                }
            }
        }
        if let Some(pos) = chosen {
            let j = free_cols.remove(pos);
            fixed += data[i * c + j];
            pairs.push((i, j));
        }
    }
    if pairs.len() != target {
        return Err(Error::InvalidData(
            "assignment tie-break failed to reach the optimum".into(),
        ));
    }
    let total_cost = pairs.iter().map(|&(i, j)| data[i * c + j]).sum();
    Ok(Assignment { pairs, total_cost })
}

/// `N_mask x N` cost of assigning ground-truth segment `i` to prediction `j`:
/// `-w_cls * prob_j[class_i] + w_bce * BCE + w_dice * Dice`, with masks
/// compared on the stride-4 grid.
pub fn match_cost(
    gt: &GroundTruth,
    pred: &MaskPredictions,
    class_probs: &Tensor<f64>,
    weights: CostWeights,
) -> Result<Tensor<f64>> {
    let n = pred.num_queries();
    let (gh, gw) = gt.grid(4);
    if pred.mask_grid() != (gh, gw) {
        return Err(shape_err!(
            "prediction grid {:?} vs ground-truth stride-4 grid {gh}x{gw}",
            pred.mask_grid()
        ));
    }
    let (pn, pc) = class_probs.as_matrix("class probabilities")?;
    if pn != n {
        return Err(shape_err!("{pn} class rows for {n} predictions"));
    }
    if let Some(&bad) = gt.classes.iter().find(|&&k| k >= pc) {
        return Err(shape_err!("class index {bad} outside {pc} class columns"));
    }
    let targets = gt.rasterize(4);
    let px = gh * gw;
    let logits: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            pred.p_mask_logits.data()[j * px..(j + 1) * px]
                .iter()
                .map(|&v| v as f64)
                .collect()
        })
        .collect();
    let mut out = Tensor::zeros(&[gt.len(), n]);
    for (i, y) in targets.iter().enumerate() {
        for (j, p) in logits.iter().enumerate() {
            let cls = -class_probs.row(j)[gt.classes[i]];
            let (bce, _) = bce_with_logits(y, p);
            let (dice, _) = dice_loss(y, p);
            out.row_mut(i)[j] = weights.class * cls + weights.bce * bce + weights.dice * dice;
        }
    }
    out.ensure_finite("matching cost")?;
    Ok(out)
}

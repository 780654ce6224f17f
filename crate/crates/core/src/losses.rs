//! Training losses on matched pairs, with analytic gradients.
//!
//! Everything here is `f64`. Gradients are taken with the assignment held
//! fixed, which is how the losses are differentiated during training.

use crate::dataio::GroundTruth;
use crate::decoder::MaskPredictions;
use crate::error::{shape_err, Error, Result};
use crate::ldp::MaskEmbeddings;
use crate::matching::{hungarian, match_cost, Assignment, CostWeights};
use crate::numerics::{sigmoid, softmax_slice, Tensor};

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn check_len(y: &[f64], p: &[f64]) -> Result<()> {
    if y.len() != p.len() || y.is_empty() {
        return Err(shape_err!("target has {} pixels, logits {}", y.len(), p.len()));
    }
    Ok(())
}

/// Mean binary cross-entropy of `sigmoid(p)` against `y`, and its gradient
/// `(sigmoid(p) - y) / n` with respect to `p`.
pub fn bce_with_logits(y: &[f64], p: &[f64]) -> (f64, Vec<f64>) {
    let n = y.len().max(1) as f64;
    let loss = y.iter().zip(p).map(|(&y, &p)| softplus(p) - y * p).sum::<f64>() / n;
    let grad = y.iter().zip(p).map(|(&y, &p)| (sigmoid(p) - y) / n).collect();
    (loss, grad)
}

/// Pixel-wise BCE mask loss.
pub fn mask_loss(y: &[f64], p_logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len(y, p_logits)?;
    Ok(bce_with_logits(y, p_logits))
}

/// `1 - (2 sum(s y) + 1) / (sum(s) + sum(y) + 1)` with `s = sigmoid(p)`.
pub fn dice_loss(y: &[f64], p: &[f64]) -> (f64, Vec<f64>) {
    let s: Vec<f64> = p.iter().map(|&v| sigmoid(v)).collect();
    let inter: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
    let denom = s.iter().sum::<f64>() + y.iter().sum::<f64>() + 1.0;
    let num = 2.0 * inter + 1.0;
    let grad = s
        .iter()
        .zip(y)
        .map(|(&s, &y)| -(2.0 * y * denom - num) / (denom * denom) * s * (1.0 - s))
        .collect();
    (1.0 - num / denom, grad)
}

/// `sum min(s, y) / sum max(s, y)` with its gradient with respect to `p`;
/// 1 with zero gradient when both masks are empty.
pub fn soft_iou(y: &[f64], p: &[f64]) -> (f64, Vec<f64>) {
    let s: Vec<f64> = p.iter().map(|&v| sigmoid(v)).collect();
    let a: f64 = s.iter().zip(y).map(|(&s, &y)| s.min(y)).sum();
    let b: f64 = s.iter().zip(y).map(|(&s, &y)| s.max(y)).sum();
    if b == 0.0 {
        return (1.0, vec![0.0; p.len()]);
    }
    let grad = s
        .iter()
        .zip(y)
        .map(|(&s, &y)| {
            let da = if s < y { 1.0 } else { 0.0 };
            let db = if s > y { 1.0 } else { 0.0 };
            (da * b - a * db) / (b * b) * s * (1.0 - s)
        })
        .collect();
    (a / b, grad)
}

/// Which reading of the IoU objective to evaluate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum IouLossKind {
    /// `(predicted_iou - soft_iou(y, p))^2`.
    #[default]
    Regression,
    /// `mean((sigmoid(p) - y)^2)`; independent of the predicted IoU.
    LiteralMse,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouLoss {
    pub loss: f64,
    pub actual_iou: f64,
    pub grad_predicted_iou: f64,
    pub grad_logits: Vec<f64>,
}

pub fn iou_loss(y: &[f64], p_logits: &[f64], predicted_iou: f64, kind: IouLossKind) -> Result<IouLoss> {
    check_len(y, p_logits)?;
    if !(0.0..=1.0).contains(&predicted_iou) {
        return Err(Error::InvalidArgument(format!(
            "predicted IoU {predicted_iou} outside [0, 1]"
        )));
    }
    let (actual, d_actual) = soft_iou(y, p_logits);
    Ok(match kind {
        IouLossKind::Regression => {
            let r = predicted_iou - actual;
            IouLoss {
                loss: r * r,
                actual_iou: actual,
                grad_predicted_iou: 2.0 * r,
                grad_logits: d_actual.iter().map(|g| -2.0 * r * g).collect(),
            }
        }
        IouLossKind::LiteralMse => {
            let n = y.len() as f64;
            let mut loss = 0.0;
            let mut grad = Vec::with_capacity(y.len());
            for (&y, &p) in y.iter().zip(p_logits) {
                let s = sigmoid(p);
                loss += (s - y) * (s - y) / n;
                grad.push(2.0 * (s - y) * s * (1.0 - s) / n);
            }
            IouLoss {
                loss,
                actual_iou: actual,
                grad_predicted_iou: 0.0,
                grad_logits: grad,
            }
        }
    })
}

/// Text rows followed by the void embedding: `(C + 1) x D`.
pub fn with_void(g_text: &Tensor, void_embedding: &Tensor) -> Result<Tensor<f64>> {
    let (c, d) = g_text.as_matrix("g_text")?;
    if void_embedding.numel() != d {
        return Err(shape_err!(
            "void embedding has {} entries, text rows {d}",
            void_embedding.numel()
        ));
    }
    let mut data: Vec<f64> = g_text.data().iter().map(|&v| v as f64).collect();
    data.extend(void_embedding.data().iter().map(|&v| v as f64));
    Tensor::from_vec(&[c + 1, d], data)
}

/// Cross-entropy of `softmax(row . g^T / tau)` at `y_class`, and its
/// gradient with respect to `row`. `classes` usually ends with the void row.
pub fn class_loss(y_class: usize, row: &[f64], classes: &Tensor<f64>, tau: f64) -> Result<(f64, Vec<f64>)> {
    let (c, d) = classes.as_matrix("class embeddings")?;
    if row.len() != d {
        return Err(shape_err!("embedding has {} entries, class rows {d}", row.len()));
    }
    if y_class >= c {
        return Err(Error::InvalidArgument(format!("class {y_class} outside {c} classes")));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let logits: Vec<f64> = (0..c)
        .map(|k| classes.row(k).iter().zip(row).map(|(a, b)| a * b).sum::<f64>() / tau)
        .collect();
    let mut probs = logits.clone();
    softmax_slice(&mut probs, 1.0)?;
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let loss = lse - logits[y_class];
    let mut grad = vec![0.0; d];
    for k in 0..c {
        let coeff = (probs[k] - if k == y_class { 1.0 } else { 0.0 }) / tau;
        for (g, &e) in grad.iter_mut().zip(classes.row(k)) {
            *g += coeff * e;
        }
    }
    Ok((loss, grad))
}

/// Weights of the class, mask and IoU terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gammas {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for Gammas {
    fn default() -> Self {
        Self { a: 2.0, b: 5.0, c: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossConfig {
    pub gammas: Gammas,
    pub iou_kind: IouLossKind,
    /// Adds the dice term to the mask loss.
    pub dice_in_mask_loss: bool,
    pub matching: CostWeights,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairLoss {
    pub gt: usize,
    pub pred: usize,
    pub mask: f64,
    pub iou: f64,
    pub class: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub l_mask: f64,
    pub l_iou: f64,
    /// Mean over all queries; unmatched ones are scored against void.
    pub l_class: f64,
    pub l_total: f64,
    pub pairs: Vec<PairLoss>,
    pub gammas: Gammas,
}

/// Gradients of `l_total` with the assignment held fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct TotalGrad {
    /// Per query, per stride-4 pixel.
    pub logits: Vec<Vec<f64>>,
    pub p_iou: Vec<f64>,
    /// `N x D_emb`.
    pub g_ldp: Vec<Vec<f64>>,
}

/// Prediction-side inputs of the total loss, in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossInputs {
    pub logits: Vec<Vec<f64>>,
    pub p_iou: Vec<f64>,
    pub g_ldp: Vec<Vec<f64>>,
}

impl LossInputs {
    pub fn new(pred: &MaskPredictions, embeddings: &MaskEmbeddings) -> Result<Self> {
        let n = pred.num_queries();
        let (h, w) = pred.mask_grid();
        let px = h * w;
        let (en, _) = embeddings.g_ldp.as_matrix("g_ldp")?;
        if en != n || pred.p_iou.numel() != n {
            return Err(shape_err!(
                "{n} mask predictions, {en} embeddings, {} IoU scores",
                pred.p_iou.numel()
            ));
        }
        let f = |s: &[f32]| s.iter().map(|&v| v as f64).collect::<Vec<_>>();
        Ok(Self {
            logits: (0..n)
                .map(|j| f(&pred.p_mask_logits.data()[j * px..(j + 1) * px]))
                .collect(),
            p_iou: f(pred.p_iou.data()),
            g_ldp: (0..n).map(|j| f(embeddings.g_ldp.row(j))).collect(),
        })
    }
}

/// Total loss for a fixed assignment of ground-truth rows `targets`
/// (stride-4 rasterized) to predictions.
pub fn total_loss_fixed(
    targets: &[Vec<f64>],
    gt_classes: &[usize],
    inputs: &LossInputs,
    classes: &Tensor<f64>,
    tau: f64,
    assignment: &Assignment,
    cfg: &LossConfig,
) -> Result<(LossReport, TotalGrad)> {
    let n = inputs.logits.len();
    let void = classes.dim(0) - 1;
    let d = classes.dim(1);
    let mut grad = TotalGrad {
        logits: inputs.logits.iter().map(|l| vec![0.0; l.len()]).collect(),
        p_iou: vec![0.0; n],
        g_ldp: vec![vec![0.0; d]; n],
    };
    let g = cfg.gammas;
    let np = assignment.pairs.len();
    let mut target_of = vec![None; n];
    for &(i, j) in &assignment.pairs {
        if i >= targets.len() || j >= n {
            return Err(Error::InvalidArgument(format!("pair ({i}, {j}) outside the problem")));
        }
        target_of[j] = Some(i);
    }

    let mut pairs = Vec::with_capacity(np);
    let (mut l_mask, mut l_iou) = (0.0, 0.0);
    for &(i, j) in &assignment.pairs {
        let y = &targets[i];
        let p = &inputs.logits[j];
        let (mut m, mut gm) = mask_loss(y, p)?;
        if cfg.dice_in_mask_loss {
            let (dl, dg) = dice_loss(y, p);
            m += dl;
            gm.iter_mut().zip(dg).for_each(|(a, b)| *a += b);
        }
        let iou = iou_loss(y, p, inputs.p_iou[j], cfg.iou_kind)?;
        let wm = g.b / np as f64;
        let wi = g.c / np as f64;
        for ((acc, a), b) in grad.logits[j].iter_mut().zip(&gm).zip(&iou.grad_logits) {
            *acc += wm * a + wi * b;
        }
        grad.p_iou[j] += wi * iou.grad_predicted_iou;
        l_mask += m / np as f64;
        l_iou += iou.loss / np as f64;
        pairs.push(PairLoss {
            gt: i,
            pred: j,
            mask: m,
            iou: iou.loss,
            class: 0.0,
        });
    }

    let mut l_class = 0.0;
    for j in 0..n {
        let y = target_of[j].map_or(void, |i| gt_classes[i]);
        let (l, gr) = class_loss(y, &inputs.g_ldp[j], classes, tau)?;
        l_class += l / n as f64;
        for (acc, v) in grad.g_ldp[j].iter_mut().zip(gr) {
            *acc += g.a * v / n as f64;
        }
        if let Some(pl) = pairs.iter_mut().find(|pl| pl.pred == j) {
            pl.class = l;
        }
    }

    let report = LossReport {
        l_mask,
        l_iou,
        l_class,
        l_total: g.a * l_class + g.b * l_mask + g.c * l_iou,
        pairs,
        gammas: g,
    };
    Ok((report, grad))
}

/// Matches predictions to ground truth and evaluates the weighted loss.
pub fn total_loss(
    gt: &GroundTruth,
    pred: &MaskPredictions,
    embeddings: &MaskEmbeddings,
    g_text: &Tensor,
    void_embedding: &Tensor,
    tau: f64,
    cfg: &LossConfig,
) -> Result<(LossReport, TotalGrad, Assignment)> {
    let classes = with_void(g_text, void_embedding)?;
    let inputs = LossInputs::new(pred, embeddings)?;
    let c = g_text.dim(0);
    let mut probs = Tensor::<f64>::zeros(&[inputs.g_ldp.len(), c]);
    for (j, row) in inputs.g_ldp.iter().enumerate() {
        let out = probs.row_mut(j);
        for (k, o) in out.iter_mut().enumerate() {
            *o = classes.row(k).iter().zip(row).map(|(a, b)| a * b).sum::<f64>();
        }
        softmax_slice(out, tau)?;
    }
    let cost = match_cost(gt, pred, &probs, cfg.matching)?;
    let assignment = hungarian(&cost)?;
    let targets = gt.rasterize(4);
    let (report, grad) = total_loss_fixed(&targets, &gt.classes, &inputs, &classes, tau, &assignment, cfg)?;
    Ok((report, grad, assignment))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_at_zero_logits() {
        let (l, _) = mask_loss(&[1.0; 16], &[0.0; 16]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_limit() {
        let y = [1.0, 0.0, 1.0, 0.0];
        let p = [40.0, -40.0, 40.0, -40.0];
        assert!(mask_loss(&y, &p).unwrap().0 < 1e-15);
    }

    #[test]
    fn bce_symmetry() {
        let y = [1.0, 0.0, 0.0, 1.0];
        let p = [0.3, -1.2, 2.0, 0.1];
        let neg_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
        let neg_p: Vec<f64> = p.iter().map(|v| -v).collect();
        let a = mask_loss(&y, &p).unwrap().0;
        let b = mask_loss(&neg_y, &neg_p).unwrap().0;
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn iou_regression_values() {
        // saturated logits reproduce y, so the actual IoU is 1
        let y = [1.0, 0.0, 1.0, 1.0];
        let p = [60.0, -60.0, 60.0, 60.0];
        let r = iou_loss(&y, &p, 0.5, IouLossKind::Regression).unwrap();
        assert!((r.actual_iou - 1.0).abs() < 1e-12);
        assert!((r.loss - 0.25).abs() < 1e-12);
        let exact = iou_loss(&y, &[0.0; 4], 0.5, IouLossKind::Regression).unwrap();
        let again = iou_loss(&y, &[0.0; 4], exact.actual_iou, IouLossKind::Regression).unwrap();
        assert_eq!(again.loss, 0.0);
    }

    #[test]
    fn iou_rejects_out_of_range() {
        assert!(iou_loss(&[1.0], &[0.0], 1.5, IouLossKind::Regression).is_err());
    }

    #[test]
    fn class_loss_uniform() {
        let classes = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (l, _) = class_loss(0, &[0.5, 0.5], &classes, 1.0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn class_loss_sharp_limit() {
        let classes = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let (l, _) = class_loss(1, &[0.0, 1.0, 0.0], &classes, 1e-3).unwrap();
        assert!(l < 1e-12);
    }

    #[test]
    fn unit_losses_weighted() {
        let g = Gammas::default();
        assert_eq!(g.a * 1.0 + g.b * 1.0 + g.c * 1.0, 8.0);
    }
}
